"""``nsreg`` command line: synth, train, eval, sweep-alpha, gradcheck.

Every command accepts ``--config file.json``; explicit flags override file values
and unknown keys are rejected. The resolved configuration is written next to
the outputs as canonical JSON.

Exit codes: 0 ok, 1 config error, 2 data error, 3 verification failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .canon import canonical_json
from .evaluation import METRICS, EvalReport, SplitConfig, evaluate, make_rotations
from .experiments import run_open_set, worker_count
from .graph import ConfigError, GraphLoadError, SynthConfig, generate_synthetic, load_graph, save_graph, \
    separability_auc
from .numeric import DimensionError, Tape, grad_check
from .trainer import CheckpointError, TrainConfig, build_batch, init_state, load_checkpoint, objective, \
    save_checkpoint, train

log = logging.getLogger("nsreg")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3
GRADCHECK_MAX_NODES = 50
GRADCHECK_TOL = 1e-4


class VerificationError(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse would exit with status 2, which is reserved for data errors here
    def error(self, message):
        raise ConfigError(message)


def _parse_bool(s: str) -> bool:
    low = s.lower()
    if low in ("on", "true", "1", "yes"):
        return True
    if low in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {s!r}")


def _parse_tuple(s: str):
    parts = [p.strip() for p in s.split(",") if p.strip()]
    return tuple(float(p) if "." in p or "e" in p.lower() else int(p) for p in parts)


def _add_fields(p: argparse.ArgumentParser, cls, skip=()) -> None:
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        flag = "--" + f.name.replace("_", "-")
        default = f.default
        if isinstance(default, bool):
            kind = _parse_bool
        elif isinstance(default, int):
            kind = int
        elif isinstance(default, float):
            kind = float
        elif isinstance(default, tuple) or default is None:
            kind = _parse_tuple
        else:
            kind = str
        p.add_argument(flag, dest=f.name, type=kind, default=None, help=f"default: {default}")


def _data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="directory written by `nsreg synth` (edges.txt, labels.csv, features.*)")
    p.add_argument("--edges")
    p.add_argument("--features")
    p.add_argument("--labels")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nsreg", description="Open-set graph anomaly detection with normal structure "
                                               "regularisation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic open-set benchmark")
    p.add_argument("--config")
    p.add_argument("--out", dest="out_dir")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--binary-features", dest="binary_features", type=_parse_bool, default=None)
    _add_fields(p, SynthConfig)

    p = sub.add_parser("train", help="train one detector on one open-set rotation")
    p.add_argument("--config")
    p.add_argument("--out", dest="out_dir")
    p.add_argument("--rotation", type=int, default=None)
    p.add_argument("--nsr", dest="nsr_enabled", type=_parse_bool, default=None, help="on/off")
    _data_args(p)
    _add_fields(p, TrainConfig, skip=("nsr_enabled",))

    p = sub.add_parser("eval", help="evaluate a checkpoint on its open-set split")
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--out", dest="out_dir")
    p.add_argument("--rotation", type=int, default=None)
    _data_args(p)

    p = sub.add_parser("sweep-alpha", help="train/evaluate across relation label values")
    p.add_argument("--config")
    p.add_argument("--out", dest="out_dir")
    p.add_argument("--alphas", type=_parse_tuple, default=None)
    p.add_argument("--seeds", dest="n_seeds", type=int, default=None, help="number of seeds")
    p.add_argument("--nsr", dest="nsr_enabled", type=_parse_bool, default=None, help="on/off")
    _data_args(p)
    _add_fields(p, TrainConfig, skip=("nsr_enabled", "alpha"))

    p = sub.add_parser("gradcheck", help="finite-difference check of the full training objective")
    p.add_argument("--config")
    p.add_argument("--out", dest="out_dir")
    p.add_argument("--nodes", type=int, default=None)
    p.add_argument("--nsr", dest="nsr_enabled", type=_parse_bool, default=None, help="on/off")
    p.add_argument("--corrupt-group", dest="corrupt_group", default=None,
                   help="test hook: perturb this group's analytic gradient")
    _add_fields(p, TrainConfig, skip=("nsr_enabled",))
    return parser


# --------------------------------------------------------------------------- config resolution

COMMAND_KEYS = {
    "synth": {"out_dir", "seed", "binary_features"},
    "train": {"out_dir", "rotation", "data", "edges", "features", "labels"},
    "eval": {"out_dir", "rotation", "data", "edges", "features", "labels", "checkpoint"},
    "sweep-alpha": {"out_dir", "alphas", "n_seeds", "data", "edges", "features", "labels"},
    "gradcheck": {"out_dir", "nodes", "corrupt_group"},
}
COMMAND_DEFAULTS = {
    "synth": {"seed": 0, "binary_features": True},
    "train": {"rotation": 0},
    "eval": {"rotation": 0},
    "sweep-alpha": {"alphas": (0.2, 0.4, 0.6, 0.8, 1.0), "n_seeds": 5},
    "gradcheck": {"nodes": 30, "hidden": 16, "b_ad_normals": 8, "batch_relations": 24, "fanouts": (3, 3)},
}
MODEL_CLS = {"synth": SynthConfig, "train": TrainConfig, "sweep-alpha": TrainConfig, "gradcheck": TrainConfig}


def resolve(args: argparse.Namespace) -> dict:
    """File values, then explicit flags; everything checked against the command's keys."""
    cmd = args.command
    cls = MODEL_CLS.get(cmd)
    allowed = set(COMMAND_KEYS[cmd]) | ({f.name for f in dataclasses.fields(cls)} if cls else set())
    if cmd == "sweep-alpha":
        allowed.discard("alpha")
    resolved = dict(COMMAND_DEFAULTS[cmd])
    if args.config:
        try:
            from_file = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(from_file, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(from_file) - allowed
        if unknown:
            raise ConfigError(f"unknown config keys for {cmd}: {sorted(unknown)}")
        resolved.update(from_file)
    for key, val in vars(args).items():
        if key in allowed and val is not None:
            resolved[key] = val
    return resolved


def _split_model(resolved: dict, cls) -> tuple[dict, dict]:
    names = {f.name for f in dataclasses.fields(cls)}
    return ({k: v for k, v in resolved.items() if k in names},
            {k: v for k, v in resolved.items() if k not in names})


def _out_dir(run: dict) -> Path:
    if not run.get("out_dir"):
        raise ConfigError("--out is required")
    out = Path(run["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_resolved(out: Path, resolved: dict) -> None:
    (out / "config.json").write_text(canonical_json(resolved) + "\n")


def _load_data(run: dict):
    base = Path(run["data"]) if run.get("data") else None
    edges = run.get("edges") or (base / "edges.txt" if base else None)
    labels = run.get("labels") or (base / "labels.csv" if base else None)
    feats = run.get("features")
    if feats is None and base is not None:
        feats = base / "features.bin" if (base / "features.bin").exists() else base / "features.csv"
    if not (edges and feats and labels):
        raise ConfigError("give --data DIR or all of --edges, --features, --labels")
    return load_graph(edges, feats, labels)


def _split(g, cfg: TrainConfig, rotation: int):
    splits = make_rotations(g, SplitConfig(cfg.n_labelled_anomalies, cfg.labelled_normal_fraction, cfg.seed))
    if not 0 <= rotation < len(splits):
        raise ConfigError(f"rotation {rotation} out of range; graph has {len(splits)} anomaly classes")
    return splits[rotation]


# --------------------------------------------------------------------------- commands

def cmd_synth(resolved: dict) -> int:
    model, run = _split_model(resolved, SynthConfig)
    cfg = SynthConfig(**model)
    g = generate_synthetic(cfg, run["seed"])
    out = _out_dir(run)
    paths = save_graph(g, out, binary_features=run["binary_features"])
    manifest = {
        "generator_seed": run["seed"],
        "separability_auc": separability_auc(g),
        "n_nodes": g.n,
        "n_edges": g.n_edges,
        "anomaly_classes": g.anomaly_classes,
        "files": {k: p.name for k, p in paths.items()},
    }
    (out / "manifest.json").write_text(canonical_json(manifest) + "\n")
    _write_resolved(out, resolved)
    print(f"wrote {g.n} nodes / {g.n_edges} edges to {out} (separability AUC {manifest['separability_auc']:.4f})")
    return EXIT_OK


def cmd_train(resolved: dict) -> int:
    model, run = _split_model(resolved, TrainConfig)
    cfg = TrainConfig(**model)
    g = _load_data(run)
    split = _split(g, cfg, run["rotation"])
    out = _out_dir(run)
    _write_resolved(out, resolved)
    state, history = train(g, split, cfg)
    save_checkpoint(state, out / "checkpoint.nsrc")
    with open(out / "losses.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "ad_loss", "nsr_loss"])
        for rec in history:
            w.writerow([rec.iteration, repr(rec.ad_loss), repr(rec.nsr_loss)])
    print(f"trained {state.iteration} iterations; checkpoint at {out / 'checkpoint.nsrc'}")
    return EXIT_OK


def cmd_eval(resolved: dict) -> int:
    run = resolved
    if not run.get("checkpoint"):
        raise ConfigError("--checkpoint is required")
    state = load_checkpoint(run["checkpoint"])
    g = _load_data(run)
    if g.d != state.detector.encoder.in_dim:
        raise DimensionError(f"graph has {g.d} features but the checkpoint expects {state.detector.encoder.in_dim}")
    split = _split(g, state.config, run["rotation"])
    report = EvalReport()
    report.add(evaluate(state.detector, g, split))
    out = _out_dir(run)
    _write_resolved(out, resolved)
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "report.csv").write_text(report.to_csv())
    row = report.rows[0]
    print(" ".join(f"{m}={row[m]:.4f}" for m in METRICS))
    return EXIT_OK


def cmd_sweep_alpha(resolved: dict) -> int:
    model, run = _split_model(resolved, TrainConfig)
    alphas = tuple(float(a) for a in run["alphas"])
    if not alphas or any(not 0.0 <= a <= 1.0 for a in alphas):
        raise ConfigError(f"alphas must lie in [0, 1], got {alphas}")
    base = TrainConfig(**model)
    g = _load_data(run)
    out = _out_dir(run)
    _write_resolved(out, resolved)
    seeds = [base.seed + i for i in range(int(run["n_seeds"]))]
    rows = []
    summary = []
    for a in alphas:
        rep = run_open_set(g, dataclasses.replace(base, alpha=a), seeds, worker_count(), alpha=a)
        rows += rep.rows
        summary.append({"alpha": a, **{m: rep.aggregate()[m] for m in METRICS}})
    cols = ["alpha", "rotation", "seen_class", "seed", *METRICS]
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, cols, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    with open(out / "sweep_summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, ["alpha", *METRICS], lineterminator="\n")
        w.writeheader()
        for r in summary:
            w.writerow({k: repr(v) for k, v in r.items()})
    for r in summary:
        print(f"alpha={r['alpha']:.2f} auc_roc_all={r['auc_roc_all']:.4f} auc_roc_unseen={r['auc_roc_unseen']:.4f}")
    return EXIT_OK


def gradcheck_graph(n_nodes: int, seed: int):
    per_class = max(2, n_nodes // 10)
    cfg = SynthConfig(n_normal=n_nodes - 2 * per_class, n_anomaly_per_class=per_class, feature_dim=8,
                      shift_dims=2, normal_groups=2, p_nn=0.3, p_nn_between=0.05, p_na=0.05, p_aa=(0.5, 0.5))
    return generate_synthetic(cfg, seed)


def run_gradcheck(cfg: TrainConfig, n_nodes: int = 30, corrupt_group: str | None = None) -> dict[str, object]:
    """Per-group max relative error of the joint objective; "no gradient path"
    for relation groups when the regulariser is off."""
    if n_nodes > GRADCHECK_MAX_NODES:
        raise ConfigError(f"gradcheck is limited to {GRADCHECK_MAX_NODES} nodes, got {n_nodes}")
    g = gradcheck_graph(n_nodes, cfg.seed)
    split = make_rotations(g, SplitConfig(max(1, min(cfg.n_labelled_anomalies, 2)), 0.3, cfg.seed))[0]
    state = init_state(g, split, cfg)
    batch = build_batch(g, split, state)
    det = state.detector

    def loss(tape: Tape):
        return objective(tape, g, batch, det, cfg)[0]

    probe = Tape()
    loss(probe)
    reachable = {gr.name for gr in probe.groups}
    checked = [gr for gr in det.groups() if gr.name in reachable]

    def corrupt(gr):
        if gr.name == corrupt_group:
            gr.grad.reshape(-1)[0] += 1.0

    report: dict[str, object] = dict(grad_check(loss, checked, corrupt=corrupt if corrupt_group else None))
    for gr in det.groups():
        report.setdefault(gr.name, "no gradient path")
    return report


def cmd_gradcheck(resolved: dict) -> int:
    model, run = _split_model(resolved, TrainConfig)
    cfg = TrainConfig(**model)
    report = run_gradcheck(cfg, int(run["nodes"]), run.get("corrupt_group"))
    failed = []
    for name, err in report.items():
        if isinstance(err, str):
            status = err
        else:
            status = "ok" if err < GRADCHECK_TOL else "FAIL"
            if status == "FAIL":
                failed.append(name)
            status = f"{err:.3e} {status}"
        print(f"{name:24s} {status}")
    if run.get("out_dir"):
        out = _out_dir(run)
        _write_resolved(out, resolved)
        (out / "gradcheck.json").write_text(canonical_json(report) + "\n")
    if failed:
        raise VerificationError(f"gradient check failed for {', '.join(failed)}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "sweep-alpha": cmd_sweep_alpha,
            "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](resolve(args))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (GraphLoadError, CheckpointError, DimensionError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except VerificationError as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
