"""Diffusion models whose prior is a Gaussian mixture tied to labeled data modes.

Sampling from prior component ``i`` yields data from mode ``i``: the forward
process drifts every sample of label ``i`` to ``N(mu_i, sigma_i^2 I)``, and the
learned reverse process inverts that drift.
"""

from .kernels import BACKEND
from .schedule import NoiseSchedule, build_schedule

__version__ = "0.1.0"
__all__ = ["BACKEND", "NoiseSchedule", "build_schedule", "__version__"]
