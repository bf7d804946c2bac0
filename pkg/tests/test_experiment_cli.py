import csv
import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from ogemm.cli import main
from ogemm.datasets import write_idx
from ogemm.experiments import reference_device_path, resolve_config
from ogemm.manifest import ExperimentManifest
from ogemm.trace import TRACE_HEADER

TINY = {
    "reward": {"n_pairs": 200},
    "dqn": {"epochs": 1, "iters": 15, "val_devices": 2, "val_iters": 8, "warmup": 60, "memory": 60, "batch": 16},
    "bayes": {"iters": 6, "runs": 2},
    "cascade": {"bayes_iters": 6},
    "train": {"epochs": 2, "finetune_epochs": 1},
}
REF = str(reference_device_path())


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text(yaml.safe_dump(TINY))
    return str(p)


def header(path):
    with open(path, newline="") as fh:
        return next(csv.reader(fh))


def test_help_and_usage_errors(capsys):
    with pytest.raises(SystemExit) as e:
        main(["reward"])
    assert e.value.code == 2
    assert "--device" in capsys.readouterr().err
    with pytest.raises(SystemExit) as e:
        main(["materials", "show", "--bogus"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 2


def test_missing_device_subprocess():
    r = subprocess.run([sys.executable, "-m", "ogemm", "device", "eval"], capture_output=True, text=True)
    assert r.returncode == 2
    assert "usage:" in r.stderr and "--device" in r.stderr


def test_domain_errors_exit_1(tmp_path, capsys):
    assert main(["device", "eval", "--device", str(tmp_path / "none.yaml")]) == 1
    assert main(["stack", "simulate", "--layers", "ITO:72,XYZ:3"]) == 1
    assert main(["stack", "simulate", "--layers", "ITO:-4"]) == 1
    assert main(["reproduce", "table1", "--dataset", "mnist", "--path", str(tmp_path), "--out",
                 str(tmp_path / "t")]) == 1
    assert "IDX files not found" in capsys.readouterr().err


def test_materials_and_stack(tmp_path, capsys):
    assert main(["materials", "show"]) == 0
    assert "GST_crystalline,7.2,1.9" in capsys.readouterr().out
    out = tmp_path / "st"
    assert main(["stack", "simulate", "--layers", "ITO:72,GST:10,ITO:39", "--wl-step", "100", "--out", str(out)]) == 0
    rows = list(csv.DictReader(capsys.readouterr().out.splitlines()))
    assert float(rows[0]["T"]) > float(rows[1]["T"])  # amorphous above crystalline
    assert header(out / "spectrum_s0.csv") == ["wavelength_nm", "T", "R"]
    assert (out / "spectrum.png").exists() and (out / "manifest.json").exists()


def test_device_commands(tmp_path, capsys):
    assert main(["device", "eval", "--device", REF, "--out", str(tmp_path / "d")]) == 0
    assert header(tmp_path / "d" / "levels.csv") == ["level", "crystalline_fraction", "T"]
    assert main(["device", "random", "--seed", "2", "--out", str(tmp_path / "r")]) == 0
    assert (tmp_path / "r" / "device.yaml").exists()


def test_reward_command(tmp_path, tiny):
    out = tmp_path / "rw"
    assert main(["reward", "--device", REF, "--config", tiny, "--power", "0.05", "--out", str(out)]) == 0
    rep = yaml.safe_load((out / "reward.yaml").read_text())
    assert rep["n_pairs"] == 200 and rep["p_total_w"] == 0.05
    assert header(out / "histogram.csv") == ["bin_center", "count"]
    assert (out / "histogram.png").exists()


@pytest.mark.parametrize("kind", ["dqn", "bayes", "cascade", "closed-loop"])
def test_optimize_commands(tmp_path, tiny, kind):
    out = tmp_path / kind
    assert main(["optimize", kind, "--config", tiny, "--out", str(out)]) == 0
    assert tuple(header(out / "trace.csv")) == TRACE_HEADER
    assert (out / "trace.png").exists() and (out / "trace_bands.csv").exists()
    m = ExperimentManifest.read(out)
    assert m.command == f"optimize {kind}" and m.config["reward"]["n_pairs"] == 200
    assert "trace.csv" in m.primary_artifacts()


def test_reproduce_fig2(tmp_path, tiny, capsys):
    out = tmp_path / "f2"
    assert main(["reproduce", "fig2", "--seed", "1", "--config", tiny, "--out", str(out)]) == 0
    for name in ("dqn", "bayes", "cascade"):
        assert tuple(header(out / f"{name}_trace.csv")) == TRACE_HEADER
    with open(out / "summary.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["path"] for r in rows] == ["dqn", "bayes", "cascade"]
    assert all(r["seed"] == "1" for r in rows)
    assert (out / "fig2.png").exists()
    assert header(out / "cascade_efficiency.csv") == ["seed", "cascade_final_reward", "cascade_bayes_iters",
                                                      "cascade_total_iters", "bayes_iters_to_cascade_level"]


def test_table1_train_infer(tmp_path, tiny, capsys):
    out = tmp_path / "t1"
    assert main(["reproduce", "table1", "--dataset", "synthetic-c2db", "--config", tiny, "--out", str(out)]) == 0
    with open(out / "accuracy.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["regime", "accuracy"]
    assert [r[0] for r in rows[1:]] == ["exact", "exact-train+optical-inference", "hybrid", "physics-aware"]
    assert all(0 <= float(r[1]) <= 1 for r in rows[1:])
    tr = tmp_path / "tr"
    assert main(["train", "--dataset", "synthetic-c2db", "--mode", "hybrid", "--config", tiny, "--out", str(tr)]) == 0
    inf = tmp_path / "inf"
    assert main(["infer", "--model", str(tr / "model.pkl"), "--dataset", "synthetic-c2db", "--out", str(inf)]) == 0
    assert header(inf / "confusion.csv")[0] == "true\\pred"


def test_dataset_inspect(tmp_path, capsys):
    (tmp_path / "m.csv").write_text("id,a,label\nx,0,NM\ny,1,FM\nz,1,AFM\n")
    assert main(["dataset", "inspect", "--path", str(tmp_path / "m.csv")]) == 0
    assert "AFM+FM: 2" in capsys.readouterr().out
    d = tmp_path / "idx"
    d.mkdir()
    for stem in ("train", "t10k"):
        write_idx(np.zeros((3, 4, 4), np.uint8), d / f"{stem}-images-idx3-ubyte")
        write_idx(np.array([0, 1, 1], np.uint8), d / f"{stem}-labels-idx1-ubyte")
    assert main(["dataset", "inspect", "--path", str(d)]) == 0
    assert "3 samples x 16 features" in capsys.readouterr().out


def test_summarize_reads_every_csv(tmp_path, tiny, capsys):
    out = tmp_path / "all"
    assert main(["reproduce", "fig2", "--config", tiny, "--out", str(out)]) == 0
    assert main(["reward", "--device", REF, "--config", tiny, "--out", str(out / "rw")]) == 0
    capsys.readouterr()
    assert main(["summarize", str(out)]) == 0
    text = capsys.readouterr().out
    n_csv = len(list(out.rglob("*.csv")))
    assert len(text.strip().splitlines()) == n_csv
    assert "median final accumulated reward" in text


def test_config_precedence(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("seed: 5\nreward: {n_pairs: 300}\n")
    cfg = resolve_config(p, {"reward": {"n_pairs": 400}})
    assert cfg["seed"] == 5 and cfg["reward"]["n_pairs"] == 400 and cfg["dqn"]["iters"] == 1000
    assert resolve_config(None, None, fast=True)["reward"]["n_pairs"] == 1000
    p.write_text("reward: {pairs: 3}\n")
    assert main(["materials", "show", "--config", str(p)]) == 1


def test_lock_blocks_second_run(tmp_path, tiny):
    out = tmp_path / "locked"
    out.mkdir()
    (out / ".lock").write_text("123")
    assert main(["reward", "--device", REF, "--config", tiny, "--out", str(out)]) == 1


def test_replay_bitwise_across_threads(tmp_path, tiny):
    out = tmp_path / "run"
    assert main(["optimize", "bayes", "--config", tiny, "--threads", "1", "--out", str(out)]) == 0
    assert main(["replay", str(out), "--threads", "3", "--out", str(tmp_path / "again")]) == 0
    ref, new = ExperimentManifest.read(out), ExperimentManifest.read(tmp_path / "again")
    assert new.config["threads"] == 3 and ref.config["threads"] == 1
    for name, digest in ref.primary_artifacts().items():
        assert new.artifacts[name] == digest, name


def test_replay_detects_changed_output(tmp_path, tiny, capsys):
    out = tmp_path / "run"
    assert main(["reward", "--device", REF, "--config", tiny, "--out", str(out)]) == 0
    m = json.loads((out / "manifest.json").read_text())
    m["artifacts"]["reward.yaml"] = "0" * 64
    (out / "manifest.json").write_text(json.dumps(m))
    assert main(["replay", str(out)]) == 1
    assert "DIFFERS    reward.yaml" in capsys.readouterr().out
