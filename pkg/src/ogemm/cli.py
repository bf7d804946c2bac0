"""Command-line entry point: ``ogemm <command> [<subcommand>] [options]``.

Exit status: 0 on success, 1 on a domain/data/configuration error, 2 on a
usage error (argparse's convention).
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import device as dev
from . import plotting
from .bayes import bayes_runs, cascade_optimize, write_gp_dump
from .datasets import (IDX_IMAGES_MAGIC, LabeledDataset, load_idx, load_image_dataset,
                       load_materials_csv, locate_image_dataset, read_idx)
from .dqn import QAgent, train_agent, validate_agent
from .emulator import OpticalBackend
from .errors import (ConfigurationError, DomainError, NumericalError, ParseError, StateError,
                     TrainingError)
from .experiments import (IMAGE_DATASETS, TABLE1_REGIMES, TABULAR_DATASETS, agent_config,
                          build_classifier, cascade_efficiency, classifier_dims, device_env,
                          emulator_config, load_named_dataset, materials_table, reference_device,
                          resolve_config, run_closed_loop, run_fig2, run_table1, trace_summary,
                          write_accuracy_csv, write_confusion_csv, write_history_csv,
                          write_efficiency_csv, write_summary_csv)
from .manifest import ExperimentManifest, compare_artifacts, locked, new_manifest
from .materials import GST, LAYER_MATERIALS, load_database
from .nn import DenseNet, predict, train_classifier
from .reward import evaluate_table
from .rng import THREADS_ENV
from .tmm import Layer, LayerStack, tmm_spectrum, write_spectrum_csv
from .trace import TRACE_HEADER, OptimizationTrace, read_trace_csv

EXPECTED_ERRORS = (DomainError, ParseError, ConfigurationError, StateError, TrainingError,
                   NumericalError, FileNotFoundError)


# --- argument parsing --------------------------------------------------------------------------


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("common options")
    g.add_argument("--seed", type=int, help="base random seed (default 0)")
    g.add_argument("--threads", type=int, help=f"worker threads (default ${THREADS_ENV} or 1)")
    g.add_argument("--out", type=Path, help="output directory")
    g.add_argument("--config", type=Path, help="YAML config file (overridden by flags)")
    g.add_argument("--fast", action="store_true", help="CI-scale profile (1,000 pairs, short runs)")
    g.add_argument("--materials", type=Path, help="materials index file (YAML)")
    g.add_argument("--wavelength", type=float, help="operating wavelength in nm")
    return p


def _emulator_flags(p) -> None:
    p.add_argument("--pairs", type=int, help="benchmark pairs per reward evaluation")
    p.add_argument("--power", type=float, help="total optical input power (W)")
    p.add_argument("--bandwidth", type=float, help="detector bandwidth (Hz)")
    p.add_argument("--no-noise", action="store_true", help="disable shot noise")


def _dqn_flags(p) -> None:
    p.add_argument("--epochs", type=int, help="training epochs")
    p.add_argument("--iters", type=int, help="training iterations per epoch")
    p.add_argument("--val-devices", type=int, help="validation start devices")
    p.add_argument("--val-iters", type=int, help="validation iterations")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="ogemm", description="Optical GEMM device/system co-design toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def leaf(parent, name, help, func):
        p = parent.add_parser(name, help=help, parents=[common], description=help)
        p.set_defaults(func=func)
        return p

    def group(name, help):
        p = sub.add_parser(name, help=help, description=help)
        s = p.add_subparsers(dest="action", required=True, metavar="ACTION")
        return s

    g = group("materials", "inspect the materials index table")
    leaf(g, "show", "print the active (n, k) table", cmd_materials_show)

    g = group("stack", "thin-film stack calculations")
    p = leaf(g, "simulate", "transmittance/reflectance spectrum of a layer stack", cmd_stack_simulate)
    p.add_argument("--layers", required=True,
                   help="comma list MATERIAL:NM[:S], e.g. ITO:72,GST:10,ITO:39 (S = crystalline fraction)")
    p.add_argument("--gst-states", default="0,1", help="crystalline fractions to simulate (default 0,1)")
    p.add_argument("--wl-start", type=float, default=1100.0)
    p.add_argument("--wl-stop", type=float, default=1600.0)
    p.add_argument("--wl-step", type=float, default=5.0)

    g = group("device", "device genomes")
    p = leaf(g, "eval", "30-level transmittance table and metrics of a device", cmd_device_eval)
    p.add_argument("--device", type=Path, required=True, help="device file (YAML)")
    leaf(g, "random", "draw a random legal device", cmd_device_random)

    p = sub.add_parser("reward", help="GEMM-accuracy reward of a device", parents=[common])
    p.set_defaults(func=cmd_reward)
    p.add_argument("--device", type=Path, required=True, help="device file (YAML)")
    _emulator_flags(p)
    p.add_argument("--mat-dim", type=int, help="benchmark matrix size (default 4)")

    g = group("optimize", "device optimisation")
    p = leaf(g, "dqn", "train a deep Q-learning agent and validate it", cmd_optimize_dqn)
    _dqn_flags(p)
    _emulator_flags(p)
    p = leaf(g, "bayes", "Bayesian optimisation from random reward<0 devices", cmd_optimize_bayes)
    p.add_argument("--iters", type=int, help="iterations per run")
    p.add_argument("--runs", type=int, help="independent runs")
    _emulator_flags(p)
    p = leaf(g, "cascade", "Bayesian warm start feeding a DQN agent", cmd_optimize_cascade)
    p.add_argument("--bayes-iters", type=int, help="Bayesian iterations (default 200)")
    p.add_argument("--agent", type=Path, help="trained agent checkpoint (otherwise one is trained)")
    _dqn_flags(p)
    _emulator_flags(p)
    p = leaf(g, "closed-loop", "DQN whose Q-network runs on the emulated host device", cmd_optimize_closed_loop)
    p.add_argument("--host-device", type=Path, help="host device file (default: bundled reference device)")
    _dqn_flags(p)
    _emulator_flags(p)

    names = ", ".join(IMAGE_DATASETS + TABULAR_DATASETS)
    p = sub.add_parser("train", help="train a classifier in one regime", parents=[common])
    p.set_defaults(func=cmd_train)
    p.add_argument("--dataset", required=True, help=f"one of: {names}")
    p.add_argument("--mode", default="exact", choices=("exact", "physics-aware", "hybrid"))
    p.add_argument("--device", type=Path, help="host device for emulated products (default: reference device)")
    p.add_argument("--path", type=Path, help="data root (image sets) or CSV file (c2db)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--finetune-epochs", type=int)
    p.add_argument("--hidden", help="comma list of hidden widths")
    p.add_argument("--subset", type=int, help="use this many training samples")
    _emulator_flags(p)

    p = sub.add_parser("infer", help="accuracy and confusion matrix of a saved model", parents=[common])
    p.set_defaults(func=cmd_infer)
    p.add_argument("--model", type=Path, required=True, help="checkpoint from `train`")
    p.add_argument("--dataset", required=True, help=f"one of: {names}")
    p.add_argument("--backend", default="optical", choices=("exact", "optical"))
    p.add_argument("--device", type=Path, help="host device (default: reference device)")
    p.add_argument("--path", type=Path)
    _emulator_flags(p)

    g = group("dataset", "dataset utilities")
    p = leaf(g, "inspect", "shape and class histogram of a dataset file or folder", cmd_dataset_inspect)
    p.add_argument("--path", type=Path, required=True)

    g = group("reproduce", "end-to-end reproductions")
    p = leaf(g, "table1", "four training/inference regimes on one dataset", cmd_reproduce_table1)
    p.add_argument("--dataset", required=True, help=f"one of: {names}")
    p.add_argument("--path", type=Path)
    p.add_argument("--device", type=Path, help="host device (default: reference device)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--finetune-epochs", type=int)
    _emulator_flags(p)
    p = leaf(g, "fig2", "DQN, Bayesian and cascaded device optimisation", cmd_reproduce_fig2)
    p.add_argument("--seeds", help="comma list of seeds (default: --seed)")
    _dqn_flags(p)
    _emulator_flags(p)

    p = sub.add_parser("summarize", help="summarise trace / accuracy / summary CSVs")
    p.set_defaults(func=cmd_summarize)
    p.add_argument("paths", nargs="+", type=Path, help="CSV files or output directories")

    p = sub.add_parser("replay", help="re-run a manifest and compare its primary outputs")
    p.set_defaults(func=cmd_replay)
    p.add_argument("manifest", type=Path, help="manifest.json or its directory")
    p.add_argument("--out", type=Path, help="where to write the replay (default: <dir>-replay)")
    p.add_argument("--threads", type=int, help="replay with this many worker threads instead")
    return parser


# --- helpers -----------------------------------------------------------------------------------


def _overrides(args, section: str | None = None) -> dict:
    """Config overrides from explicitly given flags."""
    o: dict = {}

    def put(path, value):
        if value is None:
            return
        d = o
        for k in path[:-1]:
            d = d.setdefault(k, {})
        d[path[-1]] = value

    put(("seed",), getattr(args, "seed", None))
    put(("threads",), getattr(args, "threads", None))
    put(("materials",), str(args.materials) if getattr(args, "materials", None) else None)
    put(("wavelength_nm",), getattr(args, "wavelength", None))
    put(("reward", "n_pairs"), getattr(args, "pairs", None))
    put(("reward", "mat_dim"), getattr(args, "mat_dim", None))
    put(("emulator", "p_total_w"), getattr(args, "power", None))
    put(("emulator", "bandwidth_hz"), getattr(args, "bandwidth", None))
    if getattr(args, "no_noise", False):
        put(("emulator", "noise_enabled"), False)
    if section == "dqn":
        for flag, key in (("epochs", "epochs"), ("iters", "iters"), ("val_devices", "val_devices"),
                          ("val_iters", "val_iters")):
            put(("dqn", key), getattr(args, flag, None))
    if section == "bayes":
        put(("bayes", "iters"), getattr(args, "iters", None))
        put(("bayes", "runs"), getattr(args, "runs", None))
    put(("cascade", "bayes_iters"), getattr(args, "bayes_iters", None))
    if section == "train":
        put(("train", "epochs"), getattr(args, "epochs", None))
        put(("train", "finetune_epochs"), getattr(args, "finetune_epochs", None))
        put(("train", "train_subset"), getattr(args, "subset", None))
        if getattr(args, "hidden", None):
            put(("train", "hidden"), [int(h) for h in args.hidden.split(",") if h.strip()])
    return o


def _config(args, section: str | None = None) -> dict:
    cfg = resolve_config(getattr(args, "config", None), _overrides(args, section), getattr(args, "fast", False))
    if cfg.get("threads"):
        os.environ[THREADS_ENV] = str(cfg["threads"])
    return cfg


def _out(args, default: str) -> Path:
    return Path(args.out) if getattr(args, "out", None) else Path("runs") / default


def _print_rows(rows, header) -> None:
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)


def _host(path, table):
    g = dev.load_device(path) if path else reference_device()
    return g, dev.transmittance_table(g, table)


class Run:
    """Lock the output directory, then write the manifest on success."""

    def __init__(self, args, command: str, cfg: dict, out: Path, digest: str | None, seeds: dict):
        self.args, self.command, self.cfg, self.out = args, command, cfg, out
        self.manifest = new_manifest(command, getattr(args, "_argv", sys.argv[1:]), cfg, seeds, digest)
        self._lock = locked(out)

    def __enter__(self):
        self._lock.__enter__()
        return self.out

    def __exit__(self, *exc):
        try:
            if exc[0] is None:
                self.manifest.wall_seconds = time.time() - self.manifest.started
                self.manifest.record_artifacts(self.out)
                self.manifest.write(self.out)
        finally:
            self._lock.__exit__(*exc)
        return False


# --- commands ----------------------------------------------------------------------------------


def cmd_materials_show(args) -> int:
    cfg = _config(args)
    table, digest = materials_table(cfg)
    rows = [list(r) for r in table.rows()]
    print(f"# wavelength_nm={table.lambda_nm:g} source={table.source} sha256={digest[:12]}")
    _print_rows(rows, ["material", "n", "k"])
    if args.out:
        with Run(args, "materials show", cfg, args.out, digest, {}) as out:
            with (out / "materials.csv").open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["material", "n", "k"])
                w.writerows(rows)
    return 0


def _parse_layers(spec: str) -> list[tuple[int, float, float | None]]:
    out = []
    names = {n.lower(): i for i, n in enumerate(LAYER_MATERIALS)}
    for item in spec.split(","):
        parts = item.strip().split(":")
        if len(parts) not in (2, 3) or parts[0].lower() not in names:
            raise DomainError(f"bad layer {item!r}; use MATERIAL:NM[:S] with MATERIAL in {', '.join(LAYER_MATERIALS)}")
        try:
            thick = float(parts[1])
            s = float(parts[2]) if len(parts) == 3 else None
        except ValueError:
            raise DomainError(f"bad number in layer {item!r}") from None
        out.append((names[parts[0].lower()], thick, s))
    return out


def cmd_stack_simulate(args) -> int:
    cfg = _config(args)
    db = load_database(cfg.get("materials"))
    layers = _parse_layers(args.layers)
    states = [float(s) for s in args.gst_states.split(",")]
    if not args.wl_step > 0 or args.wl_stop < args.wl_start:
        raise DomainError("wavelength grid must be increasing")
    grid = np.arange(args.wl_start, args.wl_stop + 0.5 * args.wl_step, args.wl_step)
    tables = db.tables(grid)
    op = db.at(cfg.get("wavelength_nm"))
    results = {}
    rows = []
    for s in states:
        stack = LayerStack(tuple(Layer(m, t, (s if st is None else st) if m == GST else None)
                                 for m, t, st in layers))
        stack.check()
        results[s] = tmm_spectrum(stack, tables)
        T, R = tmm_spectrum(stack, [op])[0][1:]
        rows.append([s, op.lambda_nm, T, R])
    _print_rows(rows, ["gst_state", "wavelength_nm", "T", "R"])
    if args.out:
        with Run(args, "stack simulate", cfg, args.out, db.digest, {}) as out:
            curves = {}
            for s, spec in results.items():
                write_spectrum_csv(spec, out / f"spectrum_s{s:g}.csv")
                arr = np.array(spec)
                curves[f"s={s:g}"] = (arr[:, 1], arr[:, 2])
            plotting.plot_spectrum(grid, curves, out / "spectrum.png")
    return 0


def cmd_device_eval(args) -> int:
    cfg = _config(args)
    table, digest = materials_table(cfg)
    g = dev.load_device(args.device)
    tt = dev.transmittance_table(g, table)
    rows = [[k, s, T] for k, (s, T) in enumerate(zip(tt.states, tt.levels))]
    _print_rows(rows, ["level", "crystalline_fraction", "T"])
    info = {"layers": " / ".join(f"{n} {l.thickness_nm:g}nm" for n, l in zip(dev.layer_names(g), dev.decode(g))),
            "t_max": tt.t_max, "t_min": tt.t_min, "t_diff": tt.t_diff, "max_gap": tt.max_gap,
            "total_thickness_nm": tt.total_thickness_nm}
    for k, v in info.items():
        print(f"# {k}: {v}")
    if args.out:
        with Run(args, "device eval", cfg, args.out, digest, {}) as out:
            with (out / "levels.csv").open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["level", "crystalline_fraction", "T"])
                w.writerows([[k, repr(float(s)), repr(float(T))] for k, s, T in rows])
            dev.save_device(g, out / "device.yaml", table)
            plotting.plot_levels(tt.levels, out / "levels.png")
    return 0


def cmd_device_random(args) -> int:
    cfg = _config(args)
    table, digest = materials_table(cfg)
    g = dev.random_genome(cfg["seed"])
    text = yaml.safe_dump(dev.describe(g, table), sort_keys=False)
    print(text, end="")
    if args.out:
        with Run(args, "device random", cfg, args.out, digest, {"seed": cfg["seed"]}) as out:
            dev.save_device(g, out / "device.yaml", table)
    return 0


def cmd_reward(args) -> int:
    cfg = _config(args)
    table, digest = materials_table(cfg)
    g = dev.load_device(args.device)
    tt = dev.transmittance_table(g, table)
    emu = emulator_config(cfg)
    rep = evaluate_table(tt, emu, cfg["reward"]["n_pairs"], cfg["reward"]["mat_dim"])
    summary = dict(rep.summary(), t_max=tt.t_max, t_diff=tt.t_diff, device=str(args.device),
                   p_total_w=emu.p_total_w, bandwidth_hz=emu.bandwidth_hz, noise_enabled=emu.noise_enabled)
    print(yaml.safe_dump(summary, sort_keys=False), end="")
    out_dir = _out(args, "reward")
    with Run(args, "reward", cfg, out_dir, digest, {"seed": cfg["seed"]}) as out:
        (out / "reward.yaml").write_text(yaml.safe_dump(summary, sort_keys=False))
        rep.write_histogram(out / "histogram.csv")
        if not rep.degenerate:
            plotting.plot_histogram(rep.hist_centers, rep.hist_counts, out / "histogram.png",
                                    f"reward {rep.reward:.4f}")
    return 0


def _write_trace_outputs(out: Path, tr: OptimizationTrace, stem: str = "trace", table=None) -> None:
    tr.write_csv(out / f"{stem}.csv")
    tr.write_bands_csv(out / f"{stem}_bands.csv")
    plotting.plot_traces([tr], out / f"{stem}.png")
    best_r, best_g = tr.best()
    if best_g is not None and hasattr(best_g, "to_vector"):
        dev.save_device(best_g, out / f"{stem}_best_device.yaml", table)


def cmd_optimize_dqn(args) -> int:
    cfg = _config(args, "dqn")
    table, digest = materials_table(cfg)
    seed = cfg["seed"]
    d = cfg["dqn"]
    env = device_env(cfg, table)
    with Run(args, "optimize dqn", cfg, _out(args, f"dqn-seed{seed}"), digest, {"seed": seed}) as out:
        agent = QAgent(dev.N_DIMS, dev.N_ACTIONS, agent_config(cfg), seed=seed)
        train = train_agent(env, agent, d["epochs"], d["iters"], seed)
        val = validate_agent(agent, env, d["val_devices"], d["val_iters"], seed)
        train.write_csv(out / "train_trace.csv")
        plotting.plot_training_curve(train.reward[0], out / "train_reward.png")
        _write_trace_outputs(out, val, "trace", table)
        agent.net.save(out / "agent.pkl")
        print(f"validation reward: initial {val.initial():.4f} -> final {val.final():.4f} "
              f"(accumulated average over {val.n_runs} devices)")
    return 0


def cmd_optimize_bayes(args) -> int:
    cfg = _config(args, "bayes")
    table, digest = materials_table(cfg)
    seed = cfg["seed"]
    env = device_env(cfg, table)
    with Run(args, "optimize bayes", cfg, _out(args, f"bayes-seed{seed}"), digest, {"seed": seed}) as out:
        tr, opts = bayes_runs(env, cfg["bayes"]["runs"], cfg["bayes"]["iters"], seed)
        _write_trace_outputs(out, tr, "trace", table)
        for k, opt in enumerate(opts):
            write_gp_dump(opt.gp, out / f"gp_run{k}.npz")
        print(f"bayes reward: initial {tr.initial():.4f} -> final {tr.final():.4f}; "
              f"best {tr.best()[0]:.4f}")
    return 0


def cmd_optimize_cascade(args) -> int:
    cfg = _config(args, "dqn")
    table, digest = materials_table(cfg)
    seed = cfg["seed"]
    d = cfg["dqn"]
    env = device_env(cfg, table)
    with Run(args, "optimize cascade", cfg, _out(args, f"cascade-seed{seed}"), digest, {"seed": seed}) as out:
        agent = QAgent(dev.N_DIMS, dev.N_ACTIONS, agent_config(cfg), seed=seed)
        if args.agent:
            agent.net = DenseNet.load(args.agent)
        else:
            train_agent(env, agent, d["epochs"], d["iters"], seed)
            agent.net.save(out / "agent.pkl")
        res = cascade_optimize(env, agent, d["val_devices"], cfg["cascade"]["bayes_iters"], d["val_iters"], seed)
        _write_trace_outputs(out, res.trace, "trace", table)
        _write_trace_outputs(out, res.validation, "validation_trace", table)
        if res.gp is not None:
            write_gp_dump(res.gp, out / "gp.npz")
        print(f"cascade DQN stage: initial {res.validation.initial():.4f} -> final {res.validation.final():.4f}")
    return 0


def cmd_optimize_closed_loop(args) -> int:
    cfg = _config(args, "dqn")
    table, digest = materials_table(cfg)
    seed = cfg["seed"]
    host, _ = _host(args.host_device, table)
    with Run(args, "optimize closed-loop", cfg, _out(args, f"closed-loop-seed{seed}"), digest,
             {"seed": seed}) as out:
        train, val, agent = run_closed_loop(cfg, table, host, seed)
        dev.save_device(host, out / "host_device.yaml", table)
        train.write_csv(out / "train_trace.csv")
        _write_trace_outputs(out, val, "trace", table)
        agent.net.save(out / "agent.pkl")
        print(f"closed-loop validation reward: initial {val.initial():.4f} -> final {val.final():.4f}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args, "train")
    table, digest = materials_table(cfg)
    seed = cfg["seed"]
    t = cfg["train"]
    train, test = load_named_dataset(args.dataset, args.path, seed)
    train = train.subset(t["train_subset"], seed)
    test = test.subset(t["test_subset"], seed)
    _, tt = _host(args.device, table)
    backend = OpticalBackend(tt, emulator_config(cfg), stream_key=3) if args.mode != "exact" else None
    net = build_classifier(classifier_dims(args.dataset, train, t["hidden"]), seed)
    with Run(args, "train", cfg, _out(args, f"train-{args.dataset}-{args.mode}"), digest, {"seed": seed}) as out:
        net, hist = train_classifier(net, train.features, train.labels, t["epochs"], args.mode,
                                     optical_backend=backend, finetune_epochs=t["finetune_epochs"],
                                     batch=t["batch"], lr=t["lr"], seed=seed,
                                     X_test=test.features, y_test=test.labels)
        write_history_csv(hist, out / "history.csv")
        net.save(out / "model.pkl")
        print(f"{args.dataset} {args.mode}: test accuracy {hist[-1]['test_acc']:.4f}")
    return 0


def cmd_infer(args) -> int:
    cfg = _config(args)
    table, digest = materials_table(cfg)
    _, test = load_named_dataset(args.dataset, args.path, cfg["seed"])
    backend = None
    if args.backend == "optical":
        _, tt = _host(args.device, table)
        backend = OpticalBackend(tt, emulator_config(cfg), stream_key=10)
    net = DenseNet.load(args.model, backend)
    if net.dims[0] != test.dim:
        raise DomainError(f"model expects {net.dims[0]} features, dataset has {test.dim}")
    pred = predict(net, test.features)
    acc = float(np.mean(pred == test.labels))
    from .nn import confusion_matrix

    cm = confusion_matrix(test.labels, pred, test.n_classes)
    print(f"accuracy: {acc:.4f}")
    with Run(args, "infer", cfg, _out(args, f"infer-{args.dataset}"), digest, {"seed": cfg["seed"]}) as out:
        write_accuracy_csv({args.backend: acc}, out / "accuracy.csv")
        write_confusion_csv(cm, test.class_names, out / "confusion.csv")
        plotting.plot_confusion(cm, test.class_names, out / "confusion.png", f"accuracy {100 * acc:.2f}%")
    return 0


def _inspect_dataset(path: Path) -> list[tuple[str, LabeledDataset]]:
    if path.is_dir():
        files = locate_image_dataset("", path)
        if files is None:
            raise FileNotFoundError(f"{path}: no train/t10k IDX files found")
        return [("train", load_idx(files["train_images"], files["train_labels"], "train")),
                ("test", load_idx(files["test_images"], files["test_labels"], "test"))]
    if path.suffix.lower() == ".csv":
        return [("all", load_materials_csv(path))]
    raw = path.read_bytes()[:4]
    if raw[:2] == b"\x1f\x8b" or int.from_bytes(raw, "big") == IDX_IMAGES_MAGIC or "images" in path.name:
        images = read_idx(path, IDX_IMAGES_MAGIC)
        label_path = Path(str(path).replace("images-idx3", "labels-idx1").replace("images.idx3", "labels.idx1"))
        if label_path != path and label_path.exists():
            return [(path.name, load_idx(path, label_path))]
        print(f"{path}: {images.shape[0]} images of shape {images.shape[1:]} (no labels file found)")
        return []
    raise ParseError(f"{path}: not a directory, CSV or IDX file")


def cmd_dataset_inspect(args) -> int:
    for tag, ds in _inspect_dataset(args.path):
        print(f"{tag}: {len(ds)} samples x {ds.dim} features, {ds.n_classes} classes, "
              f"feature range [{ds.features.min():g}, {ds.features.max():g}]")
        for name, count in ds.class_histogram().items():
            print(f"  {name}: {count}")
    return 0


def cmd_reproduce_table1(args) -> int:
    cfg = _config(args, "train")
    table, digest = materials_table(cfg)
    seed = cfg["seed"]
    train, test = load_named_dataset(args.dataset, args.path, seed)
    host, tt = _host(args.device, table)
    with Run(args, "reproduce table1", cfg, _out(args, f"table1-{args.dataset}"), digest, {"seed": seed}) as out:
        res = run_table1(args.dataset, train, test, tt, emulator_config(cfg), cfg, seed)
        write_accuracy_csv(res.accuracies, out / "accuracy.csv")
        for regime in TABLE1_REGIMES:
            stem = regime.replace("+", "_")
            write_confusion_csv(res.confusion[regime], res.class_names, out / f"confusion_{stem}.csv")
            plotting.plot_confusion(res.confusion[regime], res.class_names, out / f"confusion_{stem}.png",
                                    f"{regime}: {100 * res.accuracies[regime]:.2f}%")
        for regime, hist in res.histories.items():
            write_history_csv(hist, out / f"history_{regime}.csv")
        plotting.plot_accuracy_bars(res.accuracies, out / "accuracy.png", args.dataset)
        dev.save_device(host, out / "host_device.yaml", table)
        _print_rows([[k, f"{v:.4f}"] for k, v in res.accuracies.items()], ["regime", "accuracy"])
    return 0


def cmd_reproduce_fig2(args) -> int:
    cfg = _config(args, "dqn")
    table, digest = materials_table(cfg)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg["seed"]]
    rows, eff = [], []
    with Run(args, "reproduce fig2", cfg, _out(args, f"fig2-seed{seeds[0]}"), digest, {"seeds": seeds}) as out:
        for seed in seeds:
            res = run_fig2(cfg, table, seed)
            sub = out if len(seeds) == 1 else out / f"seed{seed}"
            sub.mkdir(exist_ok=True)
            res.dqn_train.write_csv(sub / "dqn_train_trace.csv")
            for name, tr in res.paths().items():
                _write_trace_outputs(sub, tr, f"{name}_trace", table)
            res.cascade.trace.write_csv(sub / "cascade_full_trace.csv")
            plotting.plot_traces([res.dqn, res.bayes, res.cascade.validation], sub / "fig2.png")
            rows += res.summary()
            eff.append(cascade_efficiency(res, cfg))
        write_summary_csv(rows, out / "summary.csv")
        write_efficiency_csv(eff, out / "cascade_efficiency.csv")
        _print_rows([[r["path"], r["seed"], f"{r['initial_reward']:.4f}", f"{r['final_reward']:.4f}",
                      f"{r['initial_tdiff']:.4f}", f"{r['final_tdiff']:.4f}"] for r in rows],
                    ["path", "seed", "initial_reward", "final_reward", "initial_tdiff", "final_tdiff"])
    return 0


def _summarize_csv(path: Path) -> None:
    with path.open(newline="") as fh:
        header = next(csv.reader(fh), None)
    if header is None:
        print(f"{path}: empty")
        return
    if tuple(header) == TRACE_HEADER:
        d = read_trace_csv(path)
        print(f"{path}: {len(d['iteration'])} iterations; reward {d['reward_avg'][0]:.4f} -> "
              f"{d['reward_avg'][-1]:.4f}; t_diff {d['tdiff_avg'][0]:.4g} -> {d['tdiff_avg'][-1]:.4g}; "
              f"t_max {d['tmax_avg'][0]:.4g} -> {d['tmax_avg'][-1]:.4g}")
    elif header == ["regime", "accuracy"]:
        with path.open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        print(f"{path}: " + ", ".join(f"{r['regime']} {100 * float(r['accuracy']):.2f}%" for r in rows))
    elif header and header[0] == "path" and "final_reward" in header:
        with path.open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        by_path: dict[str, list[float]] = {}
        for r in rows:
            by_path.setdefault(r["path"], []).append(float(r["final_reward"]))
        print(f"{path}: median final accumulated reward " +
              ", ".join(f"{k} {np.median(v):.4f}" for k, v in by_path.items()))
    else:
        with path.open(newline="") as fh:
            n = sum(1 for _ in fh) - 1
        print(f"{path}: {n} rows, columns {','.join(header)}")


def cmd_summarize(args) -> int:
    files = []
    for p in args.paths:
        if p.is_dir():
            files += sorted(p.rglob("*.csv"))
        elif p.exists():
            files.append(p)
        else:
            raise FileNotFoundError(p)
    for f in files:
        _summarize_csv(f)
    return 0


def _with_flag(argv: list[str], flag: str, value) -> list[str]:
    argv = list(argv)
    for i, a in enumerate(argv):
        if a == flag and i + 1 < len(argv):
            argv[i + 1] = str(value)
            return argv
        if a.startswith(flag + "="):
            argv[i] = f"{flag}={value}"
            return argv
    return argv + [flag, str(value)]


def cmd_replay(args) -> int:
    ref = ExperimentManifest.read(args.manifest)
    src_dir = args.manifest if args.manifest.is_dir() else args.manifest.parent
    out = args.out or src_dir.with_name(src_dir.name + "-replay")
    if ref.materials_sha256:
        db = load_database(ref.config.get("materials"))
        if db.digest != ref.materials_sha256:
            raise ConfigurationError("materials file changed since the manifest was written "
                                     f"({db.digest[:12]} != {ref.materials_sha256[:12]})")
    argv = _with_flag(ref.argv, "--out", out)
    if args.threads is not None:
        argv = _with_flag(argv, "--threads", args.threads)
    code = main(argv)
    if code != 0:
        return code
    new = ExperimentManifest.read(out)
    results = compare_artifacts(ref, new)
    for name, same in results:
        print(f"{'identical' if same else 'DIFFERS  '}  {name}")
    ok = all(same for _, same in results)
    print("replay reproduced all primary outputs" if ok else "replay differs")
    return 0 if ok else 1


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args._argv = argv
    try:
        return int(args.func(args) or 0)
    except EXPECTED_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
