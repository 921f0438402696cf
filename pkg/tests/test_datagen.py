import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from modal_diffusion.datagen import (LabeledDataset, four_mode_centers, gen_four_mode,
                                     gen_maze_lite, gen_ring_modes, generate,
                                     interpolate_polyline, ring_centers)
from modal_diffusion.metrics import hard_classify


def test_zero_spread_points_at_centers():
    d = gen_four_mode(10, std=0.0)
    assert np.array_equal(d.points, four_mode_centers()[d.labels])


def test_four_mode_cluster_means():
    n = 25_000
    d = gen_four_mode(n)
    c = four_mode_centers()
    assert np.all(np.abs(d.label_means() - c) < 4 * 0.3 / math.sqrt(n))
    assert np.array_equal(np.bincount(d.labels), [n] * 4)
    assert d.k == 4 and d.dim == 2


def test_four_mode_label_order_by_quadrant():
    c = four_mode_centers(2.0)
    assert np.array_equal(np.sign(c), [[1, 1], [-1, 1], [-1, -1], [1, -1]])


def test_nearest_center_classifier_is_near_perfect():
    d = gen_four_mode(5000, seed=11)
    acc = np.mean(hard_classify(d.points, four_mode_centers(), np.full(4, 0.3)) == d.labels)
    assert acc >= 0.999


@given(seed=st.integers(0, 2**31 - 1))
def test_generators_are_deterministic(seed):
    for cfg in ({"kind": "four_mode_2d", "n_per_mode": 20}, {"kind": "ring_modes", "k": 5,
                "n_per_mode": 10}, {"kind": "maze_lite", "n_per_layout": 5, "horizon": 6}):
        a, b = generate({**cfg, "seed": seed}), generate({**cfg, "seed": seed})
        assert np.array_equal(a.points, b.points) and np.array_equal(a.labels, b.labels)
        assert a.labels.max() < a.k


def test_ring_two_modes_antipodal():
    c = ring_centers(2, 3.0)
    assert np.allclose(c[0], -c[1])


def test_ring_rotation_permutes_labels():
    k = 6
    d = gen_ring_modes(k, 4.0, 0.0, 3)
    th = 2 * math.pi / k
    rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    rotated = d.points @ rot.T
    c = ring_centers(k, 4.0)
    idx = np.argmin(np.linalg.norm(rotated[:, None] - c[None], axis=2), axis=1)
    assert np.array_equal(idx, (d.labels + 1) % k)


def test_ring_min_chord():
    c = ring_centers(8, 4.0)
    d = np.linalg.norm(c[:, None] - c[None], axis=2)[~np.eye(8, dtype=bool)]
    assert d.min() == pytest.approx(4 * math.sqrt(2 - 2 * math.cos(math.pi / 4)), abs=1e-12)
    assert d.min() == pytest.approx(3.0615, abs=1e-4)


def test_ring_rejects_single_mode():
    with pytest.raises(ValueError):
        gen_ring_modes(k=1)


def test_maze_shapes_and_noise_free_copies():
    d = gen_maze_lite(3, 48, 10, 0.0)
    assert d.dim == 96 and set(np.unique(d.labels)) == {0, 1, 2}
    for j in range(3):
        rows = d.by_label(j)
        assert np.all(rows == rows[0])


def test_maze_horizon_two_is_start_goal():
    d = gen_maze_lite(2, 2, 4, 0.5)
    assert d.dim == 4
    from modal_diffusion.datagen import maze_layout
    for j in range(2):
        w = maze_layout(j, 0)
        assert np.allclose(d.by_label(j), np.concatenate([w[0], w[-1]]))


def test_maze_many_layouts_procedural():
    d = gen_maze_lite(5, 10, 3, 0.1, seed=2)
    assert d.k == 5 and d.dim == 20


def test_interpolation_spacing():
    p = interpolate_polyline(np.array([[0.0, 0.0], [3.0, 0.0], [3.0, 3.0]]), 7)
    steps = np.linalg.norm(np.diff(p, axis=0), axis=1)
    assert np.allclose(steps, 1.0) and np.allclose(p[-1], [3, 3])


def test_dataset_validation():
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((2, 2)), np.array([0, 2]), 2)
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((0, 2)), np.zeros(0, int), 1)
    with pytest.raises(ValueError):
        LabeledDataset(np.array([[np.nan, 0.0]]), np.array([0]), 1)
    with pytest.raises(ValueError):
        generate({"kind": "spiral"})
