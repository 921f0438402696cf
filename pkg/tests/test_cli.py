import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from modal_diffusion import io
from modal_diffusion.cli import main

FAST_TRAIN = ["--set", "training.steps=300", "--set", "training.hidden=[32, 32]",
              "--set", "training.batch=128"]


def run(*argv):
    return main([str(a) for a in argv])


def files(d: Path) -> dict:
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.is_file()}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    g = root / "gen"
    assert run("gen", "--out", g, "--seed", 3, "--set", "generator.n_per_mode=200") == 0
    t = root / "train"
    assert run("train", "--out", t, "--set", f"data.file={g / 'dataset.csv'}", *FAST_TRAIN) == 0
    s = root / "sample"
    assert run("sample", "--out", s, "--set", f"checkpoint={t / 'checkpoint.json'}",
               "--set", "sampling.n=200") == 0
    e = root / "eval"
    assert run("eval", "--out", e, "--set", f"samples={s / 'samples.csv'}",
               "--set", f"modes.dataset={g / 'dataset.csv'}") == 0
    return {"root": root, "gen": g, "train": t, "sample": s, "eval": e}


def test_gen_outputs(pipeline):
    d = io.read_dataset_csv(pipeline["gen"] / "dataset.csv")
    assert d.points.shape == (800, 2)
    assert (pipeline["gen"] / "dataset.csv.provenance.json").exists() or \
        any(p.name.endswith("provenance.json") for p in pipeline["gen"].iterdir())


def test_maze_header(tmp_path):
    assert run("gen", "--out", tmp_path, "--set", "generator.kind=maze_lite",
               "--set", "generator.n_layouts=3", "--set", "generator.horizon=48",
               "--set", "generator.n_per_layout=4") == 0
    header = (tmp_path / "dataset.csv").read_text().splitlines()[0].split(",")
    assert header == [f"x{j}" for j in range(1, 97)] + ["label"]


def test_train_outputs(pipeline):
    ck = io.load_checkpoint(pipeline["train"] / "checkpoint.json")
    assert ck["optimizer"].step == 300
    rows = (pipeline["train"] / "losses.csv").read_text().splitlines()
    assert rows[0] == "step,loss,lr" and len(rows) == 301


def test_floats_written_at_17_digits(pipeline):
    line = (pipeline["sample"] / "samples.csv").read_text().splitlines()[1]
    v = line.split(",")[0]
    assert float(format(float(v), ".17g")) == float(v)
    assert len(v.lstrip("-").replace(".", "").split("e")[0].lstrip("0")) >= 15


def test_sample_outputs(pipeline):
    x, req, asg = io.read_samples_csv(pipeline["sample"] / "samples.csv")
    assert x.shape == (200, 2) and set(req) <= {0, 1, 2, 3}
    assert (pipeline["sample"] / "samples.svg").read_text().startswith("<svg")


def test_eval_outputs(pipeline):
    rep = json.loads((pipeline["eval"] / "report.json").read_text())
    assert 0.0 <= rep["acc"] <= 1.0
    lines = (pipeline["eval"] / "report.csv").read_text().splitlines()
    assert lines[0].startswith("mode,n,acc") and lines[-1].startswith("all,")


def test_config_echo_and_override_precedence(tmp_path, pipeline):
    cfgfile = tmp_path / "c.json"
    cfgfile.write_text(json.dumps({"generator": {"n_per_mode": 7, "std": 0.1}}))
    assert run("gen", "--out", tmp_path / "o", "--config", cfgfile,
               "--set", "generator.n_per_mode=5") == 0
    echo = json.loads((tmp_path / "o" / "config.json").read_text())
    assert echo["generator"]["n_per_mode"] == 5 and echo["generator"]["std"] == 0.1
    assert io.read_dataset_csv(tmp_path / "o" / "dataset.csv").points.shape[0] == 20


def test_every_command_is_deterministic(tmp_path, pipeline):
    g, t, s = pipeline["gen"], pipeline["train"], pipeline["sample"]
    cases = {
        "gen": ["--seed", 3, "--set", "generator.n_per_mode=200"],
        "train": ["--set", f"data.file={g / 'dataset.csv'}", *FAST_TRAIN],
        "sample": ["--set", f"checkpoint={t / 'checkpoint.json'}", "--set", "sampling.n=200"],
        "eval": ["--set", f"samples={s / 'samples.csv'}",
                 "--set", f"modes.dataset={g / 'dataset.csv'}"],
    }
    for cmd, args in cases.items():
        a = tmp_path / f"{cmd}_rerun"
        assert run(cmd, "--out", a, *args) == 0
        assert files(a) == files(pipeline[cmd]), cmd


def test_guided_sampling_commands(tmp_path, pipeline):
    ck = pipeline["train"] / "checkpoint.json"
    # the default ring prior has four components; guidance needs a standard-prior model
    assert run("sample", "--out", tmp_path / "bad", "--set", f"checkpoint={ck}",
               "--set", "guidance.kind=cg", "--set", "guidance.weight=1") == 1
    g = pipeline["gen"] / "dataset.csv"
    std = tmp_path / "std"
    assert run("train", "--out", std, "--set", f"data.file={g}", "--set", "prior.layout=standard",
               *FAST_TRAIN) == 0
    for kind in ("cg", "none"):
        o = tmp_path / kind
        assert run("sample", "--out", o, "--set", f"checkpoint={std / 'checkpoint.json'}",
                   "--set", f"guidance.kind={kind}", "--set", "guidance.weight=1",
                   "--set", "sampling.n=50") == 0
    _, req, _ = io.read_samples_csv(tmp_path / "none" / "samples.csv")
    assert np.all(req == -1)
    cond = tmp_path / "cond"
    assert run("train", "--out", cond, "--set", f"data.file={g}", "--set", "prior.layout=standard",
               "--set", "training.conditional=true", *FAST_TRAIN) == 0
    assert run("sample", "--out", tmp_path / "cfg", "--set",
               f"checkpoint={cond / 'checkpoint.json'}", "--set", "guidance.kind=cfg",
               "--set", "guidance.weight=1.05", "--set", "guidance.target_label=2",
               "--set", "sampling.n=50") == 0
    _, req, _ = io.read_samples_csv(tmp_path / "cfg" / "samples.csv")
    assert np.all(req == 2)


def test_mixture_weights_select_one_component(tmp_path, pipeline):
    assert run("sample", "--out", tmp_path, "--set",
               f"checkpoint={pipeline['train'] / 'checkpoint.json'}",
               "--set", "sampling.weights=[1, 0, 0, 0]", "--set", "sampling.n=100") == 0
    _, req, _ = io.read_samples_csv(tmp_path / "samples.csv")
    assert np.all(req == 0)


def test_resume_with_no_extra_steps_is_identical(tmp_path, pipeline):
    ck = pipeline["train"] / "checkpoint.json"
    assert run("train", "--out", tmp_path, "--set", f"data.file={pipeline['gen'] / 'dataset.csv'}",
               "--set", f"resume={ck}", *FAST_TRAIN) == 0
    assert (tmp_path / "checkpoint.json").read_bytes() == ck.read_bytes()


def test_stop_and_resume_matches_uninterrupted(tmp_path, pipeline):
    data = f"data.file={pipeline['gen'] / 'dataset.csv'}"
    assert run("train", "--out", tmp_path / "a", "--set", data, "--set", "stop_at=120",
               *FAST_TRAIN) == 0
    assert run("train", "--out", tmp_path / "b", "--set", data,
               "--set", f"resume={tmp_path / 'a' / 'checkpoint.json'}", *FAST_TRAIN) == 0
    assert (tmp_path / "b" / "checkpoint.json").read_bytes() == \
        (pipeline["train"] / "checkpoint.json").read_bytes()


@pytest.mark.parametrize("argv", [
    ["train", "--set", "data.file=/nonexistent/dataset.csv"],
    ["gen", "--set", "generator.bogus_key=1", "--set", "no_such_block.x=1"],
    ["gen", "--set", "nosuchkey=1"],
    ["gen", "--set", "generator.kind=spiral"],
    ["sample", "--set", "checkpoint=/nonexistent.json"],
    ["repro-toy", "--set", "toy.unknown=1"],
    ["verify", "--set", "inject=not_a_fault"],
    ["frobnicate"],
    [],
])
def test_usage_errors_exit_1(tmp_path, argv):
    if argv and argv[0] != "frobnicate":
        argv = argv + ["--out", str(tmp_path)]
    with pytest.raises(SystemExit) as exc:
        code = main(argv)
        raise SystemExit(code)
    assert exc.value.code == 1


def test_malformed_samples_csv_exit_1(tmp_path):
    bad = tmp_path / "s.csv"
    bad.write_text("a,b\n1,2\n")
    assert run("eval", "--out", tmp_path / "o", "--set", f"samples={bad}",
               "--set", "modes.centers=[[0, 0]]", "--set", "modes.sigmas=[1]",
               "--set", "modes.data_std=1") == 1


def test_verify_injection_exits_2(tmp_path):
    assert run("verify", "--out", tmp_path, "--set", "fast=true",
               "--set", "inject=simplex_k_plus_1") == 2
    rep = json.loads((tmp_path / "verify.json").read_text())
    assert rep["all_passed"] is False


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exits_2(tmp_path, pipeline):
    assert run("train", "--out", tmp_path, "--set",
               f"data.file={pipeline['gen'] / 'dataset.csv'}", "--set", "training.lr=1e300",
               "--set", "training.steps=50") == 2


def test_repro_toy_small_is_deterministic(tmp_path):
    args = ["--set", "toy.steps=150", "--set", "toy.n_samples_per_mode=40",
            "--set", "toy.n_per_mode=100", "--set", "toy.training={\"hidden\": [16, 16]}"]
    assert run("repro-toy", "--out", tmp_path / "a", *args) == 0
    assert run("repro-toy", "--out", tmp_path / "b", *args) == 0
    fa = files(tmp_path / "a")
    assert fa == files(tmp_path / "b")
    svgs = [n for n in fa if n.endswith(".svg")]
    assert len(svgs) == 9 and "summary.csv" in fa and "summary.json" in fa


def test_console_script_runs():
    out = subprocess.run([sys.executable, "-m", "modal_diffusion.cli", "--help"],
                         capture_output=True, text=True)
    assert out.returncode == 0 and "repro-toy" in out.stdout
