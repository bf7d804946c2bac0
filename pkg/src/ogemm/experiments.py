"""Experiment protocols shared by the command line and the acceptance suite.

Configuration is a nested dict: built-in defaults, optionally the fast
profile, then a YAML file, then explicit overrides (highest precedence).
"""

from __future__ import annotations

import copy
import csv
import tempfile
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import device as dev
from .bayes import CascadeResult, bayes_runs, cascade_optimize
from .datasets import (LabeledDataset, load_image_dataset, load_materials_csv, split_dataset,
                       write_synthetic_materials_csv)
from .dqn import AgentConfig, DeviceEnvironment, QAgent, closed_loop_train, train_agent, validate_agent
from .emulator import EmulatorConfig, ExactBackend, OpticalBackend
from .errors import ConfigurationError, DomainError
from .materials import MaterialsTable, load_database
from .nn import DenseNet, accuracy, confusion_matrix, predict, train_classifier
from .trace import OptimizationTrace

DEFAULT_CONFIG = {
    "seed": 0,
    "threads": None,
    "materials": None,          # path; None = shipped table
    "wavelength_nm": None,      # None = the table's operating wavelength
    "emulator": {"array_rows": 4, "array_cols": 4, "p_total_w": 0.1, "bandwidth_hz": 1e9,
                 "responsivity_a_per_w": 1.0, "noise_enabled": True},
    "reward": {"n_pairs": 10000, "mat_dim": 4},
    "dqn": {"epochs": 10, "iters": 1000, "val_devices": 10, "val_iters": 500, "gamma": 0.9,
            "lr": 0.005, "batch": 128, "memory": 2000, "warmup": 2000, "policy": "argmax"},
    "bayes": {"iters": 200, "runs": 10},
    "cascade": {"bayes_iters": 200},
    "train": {"epochs": 10, "finetune_epochs": 2, "batch": 128, "lr": 0.005, "hidden": None,
              "train_subset": None, "test_subset": None},
}

# CI-scale settings; see README for the expected deviations from full runs.
FAST_PROFILE = {
    "reward": {"n_pairs": 1000},
    "dqn": {"epochs": 2, "iters": 200, "val_devices": 8, "val_iters": 100},
    "bayes": {"iters": 100, "runs": 4},
    "train": {"epochs": 3, "finetune_epochs": 1, "train_subset": 10000, "test_subset": 2000},
}

IMAGE_DATASETS = ("mnist", "fashion-mnist", "kmnist")
TABULAR_DATASETS = ("c2db", "synthetic-c2db", "digits")
TABLE1_REGIMES = ("exact", "exact-train+optical-inference", "hybrid", "physics-aware")


def deep_update(base: dict, upd: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (upd or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_update(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _check_keys(cfg: dict, ref: dict, where: str = "") -> None:
    for k, v in cfg.items():
        if k not in ref:
            raise ConfigurationError(f"unknown config key {where}{k!r}")
        if isinstance(v, dict) and isinstance(ref[k], dict):
            _check_keys(v, ref[k], f"{where}{k}.")


def resolve_config(config_file: str | Path | None = None, overrides: dict | None = None,
                   fast: bool = False) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if fast:
        cfg = deep_update(cfg, FAST_PROFILE)
    if config_file is not None:
        try:
            file_cfg = yaml.safe_load(Path(config_file).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigurationError(f"cannot read config {config_file}: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise ConfigurationError(f"{config_file}: expected a mapping")
        _check_keys(file_cfg, DEFAULT_CONFIG)
        cfg = deep_update(cfg, file_cfg)
    if overrides:
        _check_keys(overrides, DEFAULT_CONFIG)
        cfg = deep_update(cfg, overrides)
    cfg["fast"] = bool(fast)
    return cfg


def materials_table(cfg: dict) -> tuple[MaterialsTable, str]:
    db = load_database(cfg.get("materials"))
    return db.at(cfg.get("wavelength_nm")), db.digest


def emulator_config(cfg: dict, seed: int | None = None) -> EmulatorConfig:
    e = dict(cfg["emulator"])
    return EmulatorConfig(rng_seed=int(cfg["seed"] if seed is None else seed), **e)


def agent_config(cfg: dict) -> AgentConfig:
    d = cfg["dqn"]
    return AgentConfig(gamma=d["gamma"], lr=d["lr"], batch=d["batch"], memory_capacity=d["memory"],
                       warmup_samples=d["warmup"], policy=d["policy"])


def device_env(cfg: dict, table: MaterialsTable, seed: int | None = None) -> DeviceEnvironment:
    return DeviceEnvironment(table, emulator_config(cfg, seed), n_pairs=cfg["reward"]["n_pairs"],
                             mat_dim=cfg["reward"]["mat_dim"])


def reference_device_path() -> Path:
    return Path(str(resources.files("ogemm") / "data" / "reference_device.yaml"))


def reference_device() -> dev.DeviceGenome:
    return dev.load_device(reference_device_path())


# --- device optimisation, three paths ----------------------------------------------------------


@dataclass
class Fig2Result:
    seed: int
    dqn_train: OptimizationTrace
    dqn: OptimizationTrace
    bayes: OptimizationTrace
    cascade: CascadeResult
    agent: QAgent = field(repr=False)

    def paths(self) -> dict[str, OptimizationTrace]:
        """Validation trace of each path (the cascade's is its DQN stage)."""
        return {"dqn": self.dqn, "bayes": self.bayes, "cascade": self.cascade.validation}

    def summary(self) -> list[dict]:
        return [trace_summary(name, tr, self.seed) for name, tr in self.paths().items()]


def trace_summary(path: str, tr: OptimizationTrace, seed: int = 0) -> dict:
    row = {"path": path, "seed": seed, "runs": tr.n_runs, "iterations": tr.n_iters}
    for m, short in (("reward", "reward"), ("t_max", "tmax"), ("t_diff", "tdiff"), ("thickness", "thickness")):
        row[f"initial_{short}"] = tr.initial(m)
        row[f"final_{short}"] = tr.final(m)
    row["best_reward"] = float(np.max(tr.reward))
    return row


SUMMARY_FIELDS = ("path", "seed", "runs", "iterations", "initial_reward", "final_reward",
                  "initial_tmax", "final_tmax", "initial_tdiff", "final_tdiff",
                  "initial_thickness", "final_thickness", "best_reward")


def write_summary_csv(rows: list[dict], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})
    return path


def run_fig2(cfg: dict, table: MaterialsTable, seed: int, env: DeviceEnvironment | None = None) -> Fig2Result:
    """All three optimisation paths for one seed, sharing one trained agent."""
    env = env or device_env(cfg, table, seed)
    d = cfg["dqn"]
    agent = QAgent(dev.N_DIMS, dev.N_ACTIONS, agent_config(cfg), seed=seed)
    train = train_agent(env, agent, d["epochs"], d["iters"], seed)
    dqn = validate_agent(agent, env, d["val_devices"], d["val_iters"], seed)
    bayes, _ = bayes_runs(env, cfg["bayes"]["runs"], cfg["bayes"]["iters"], seed)
    casc = cascade_optimize(env, agent, d["val_devices"], cfg["cascade"]["bayes_iters"], d["val_iters"], seed)
    return Fig2Result(seed, train, dqn, bayes, casc, agent)


def bayes_iterations_to_reach(bayes: OptimizationTrace, level: float) -> float:
    """First iteration at which the Bayesian accumulated mean reward reaches ``level`` (inf if never)."""
    curve = bayes.mean_curve("reward")
    hit = np.flatnonzero(curve >= level)
    return float(hit[0]) if hit.size else float("inf")


def cascade_efficiency(res: Fig2Result, cfg: dict) -> dict:
    """Cascade iteration count against the Bayesian iterations needed for the same reward."""
    level = res.cascade.validation.final()
    b_iters = res.cascade.bayes.n_iters if res.cascade.bayes is not None else 0
    return {"seed": res.seed, "cascade_final_reward": level, "cascade_bayes_iters": b_iters,
            "cascade_total_iters": b_iters + cfg["dqn"]["val_iters"],
            "bayes_iters_to_cascade_level": bayes_iterations_to_reach(res.bayes, level)}


def write_efficiency_csv(rows: list[dict], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})
    return path


def run_closed_loop(cfg: dict, table: MaterialsTable, host: dev.DeviceGenome | None, seed: int,
                    host_tt=None, emu: EmulatorConfig | None = None):
    """Closed loop: the Q-network's products run on the emulated host device."""
    env = device_env(cfg, table, seed)
    host_tt = host_tt if host_tt is not None else dev.transmittance_table(host or reference_device(), table)
    emu = emu or emulator_config(cfg, seed)
    d = cfg["dqn"]
    return closed_loop_train(env, host_tt, emu, d["epochs"], d["iters"], d["val_devices"], d["val_iters"],
                             agent_config(cfg), seed)


# --- classification, four regimes --------------------------------------------------------------


def load_named_dataset(name: str, path: str | Path | None = None, seed: int = 0
                       ) -> tuple[LabeledDataset, LabeledDataset]:
    """Train/test splits of a named dataset.

    Image sets use their canonical files (``path`` = data root); ``c2db``
    needs ``path`` to the CSV; ``synthetic-c2db`` is the bundled fixture;
    ``digits`` is scikit-learn's 8x8 digit set (a small real-image check).
    """
    if name in IMAGE_DATASETS:
        return load_image_dataset(name, path)
    if name == "c2db":
        if path is None:
            raise ConfigurationError("c2db needs --path to a materials CSV")
        return split_dataset(load_materials_csv(path), 0.8, seed)
    if name == "synthetic-c2db":
        with tempfile.TemporaryDirectory() as tmp:
            ds = load_materials_csv(write_synthetic_materials_csv(Path(tmp) / "fixture.csv", 2000, seed=0))
        return split_dataset(ds, 0.8, seed)
    if name == "digits":
        try:
            from sklearn.datasets import load_digits
        except ImportError as exc:
            raise ConfigurationError("the digits dataset needs scikit-learn") from exc
        X, y = load_digits(return_X_y=True)
        ds = LabeledDataset(X / 16.0, y.astype(np.int64), tuple(str(i) for i in range(10)), "all")
        return split_dataset(ds, 0.8, seed)
    raise ConfigurationError(f"unknown dataset {name!r}; choose from "
                             f"{', '.join(IMAGE_DATASETS + TABULAR_DATASETS)}")


def classifier_dims(name: str, train: LabeledDataset, hidden=None) -> list[int]:
    if hidden is None:
        hidden = [100] if name in IMAGE_DATASETS or name == "digits" else [64]
    return [train.dim, *hidden, train.n_classes]


def build_classifier(dims, seed: int, backend=None) -> DenseNet:
    return DenseNet(dims, ["relu"] * (len(dims) - 2) + ["softmax"], backend, seed=seed)


@dataclass
class Table1Result:
    dataset: str
    accuracies: dict[str, float]
    confusion: dict[str, np.ndarray]
    histories: dict[str, list]
    class_names: tuple[str, ...]
    nets: dict[str, DenseNet] = field(default_factory=dict, repr=False)


def run_table1(name: str, train: LabeledDataset, test: LabeledDataset, host_tt, emu: EmulatorConfig,
               cfg: dict, seed: int = 0) -> Table1Result:
    """The four training/inference regimes on one dataset."""
    t = cfg["train"]
    train = train.subset(t["train_subset"], seed)
    test = test.subset(t["test_subset"], seed)
    dims = classifier_dims(name, train, t["hidden"])

    def optical(key: int) -> OpticalBackend:
        return OpticalBackend(host_tt, emu, stream_key=key)

    common = dict(batch=t["batch"], lr=t["lr"], seed=seed)
    exact_net, h_exact = train_classifier(build_classifier(dims, seed), train.features, train.labels,
                                          t["epochs"], "exact", **common)
    nets = {"exact": exact_net,
            "exact-train+optical-inference": exact_net.copy(backend=optical(1))}
    hybrid = exact_net.copy()
    hybrid.backend = optical(2)
    state_net, h_hybrid = _finetune(hybrid, train, t["finetune_epochs"], common)
    nets["hybrid"] = state_net
    pa_net, h_pa = train_classifier(build_classifier(dims, seed), train.features, train.labels, t["epochs"],
                                    "physics-aware", optical_backend=optical(3), **common)
    nets["physics-aware"] = pa_net
    # inference streams are separate from the training ones
    for key, regime in enumerate(TABLE1_REGIMES[1:], start=10):
        nets[regime].backend = optical(key)
    acc, cms = {}, {}
    for regime in TABLE1_REGIMES:
        pred = predict(nets[regime], test.features)
        acc[regime] = float(np.mean(pred == test.labels))
        cms[regime] = confusion_matrix(test.labels, pred, test.n_classes)
    hist = {"exact": h_exact, "hybrid": h_exact + h_hybrid, "physics-aware": h_pa}
    return Table1Result(name, acc, cms, hist, test.class_names, nets)


def _finetune(net: DenseNet, train: LabeledDataset, epochs: int, common: dict):
    from .nn import AdamState, train_epochs

    state = AdamState.for_net(net, lr=common["lr"])
    hist = train_epochs(net, train.features, train.labels, epochs, state, common["batch"],
                        common["seed"] + 1, tag="finetune")
    return net, hist


def write_accuracy_csv(accuracies: dict[str, float], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["regime", "accuracy"])
        for k, v in accuracies.items():
            w.writerow([k, repr(float(v))])
    return path


def write_confusion_csv(cm: np.ndarray, class_names, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred", *class_names])
        for name, row in zip(class_names, np.asarray(cm)):
            w.writerow([name, *map(int, row)])
    return path


def write_history_csv(history: list[dict], path: str | Path) -> Path:
    path = Path(path)
    keys = ["phase", "epoch", "backend", "loss", "train_acc", "test_acc"]
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, extrasaction="ignore")
        w.writeheader()
        for r in history:
            w.writerow(r)
    return path


def check_dataset_name(name: str) -> None:
    if name not in IMAGE_DATASETS + TABULAR_DATASETS:
        raise DomainError(f"unknown dataset {name!r}")
