"""neural-descent command line: generate, train, fit, bench, ablate.

Every command accepts ``--config FILE`` with ``key = value`` lines whose keys
are the long flag names (dashes or underscores).  Flags given on the command
line override file values; unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import baselines as bl
from . import bench
from .dataset import generate_dataset, read_dataset, dumps
from .hund import (
    META_KINDS, REGIMES, CheckpointError, TrainConfig, TrainingDiverged, config_dict, load_checkpoint,
    save_checkpoint, train,
)
from .renderloss import LossWeights, RasterConfig

log = logging.getLogger("neural_descent")

THREADS_ENV = "NEURAL_DESCENT_THREADS"
DATASET_FILE = "dataset.jsonl"
MANIFEST_FILE = "manifest.json"
CHECKPOINT_FILE = "model.ckpt"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- parser


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _nonneg_float(text: str) -> float:
    v = float(text)
    if not (math.isfinite(v) and v >= 0):
        raise argparse.ArgumentTypeError(f"expected a nonnegative number, got {text}")
    return v


def _unit_float(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"expected a value in [0, 1], got {text}")
    return v


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file; command-line flags take precedence")
    p.add_argument("--threads", type=_positive_int, default=None,
                   help=f"worker processes for sample-parallel work (default: ${THREADS_ENV} or 1)")
    p.add_argument("--verbose", action="store_true", help="log progress to stderr")


def _loss_flags(p: argparse.ArgumentParser) -> None:
    d = LossWeights()
    p.add_argument("--lambda-k", type=_nonneg_float, default=d.lambda_k, help="keypoint weight (default %(default)s)")
    p.add_argument("--lambda-b", type=_nonneg_float, default=d.lambda_b, help="part-map weight; 0 skips rendering (default %(default)s)")
    p.add_argument("--lambda-m", type=_nonneg_float, default=d.lambda_m, help="3D vertex weight (default %(default)s)")
    p.add_argument("--lambda-3d", type=_nonneg_float, default=d.lambda_3d, help="3D joint weight (default %(default)s)")
    r = RasterConfig()
    p.add_argument("--sigma", type=float, default=r.sigma, help="soft raster blur in px^2 (default %(default)s)")
    p.add_argument("--gamma", type=float, default=r.gamma, help="soft raster depth temperature (default %(default)s)")


def _train_flags(p: argparse.ArgumentParser) -> None:
    d = TrainConfig()
    p.add_argument("--regime", choices=REGIMES, default=d.regime, help="training regime (default %(default)s)")
    p.add_argument("--meta", choices=META_KINDS, default=d.meta_loss_kind, help="meta-loss (default %(default)s)")
    p.add_argument("--m", type=_positive_int, default=d.M, help="refinement stages (default %(default)s)")
    p.add_argument("--epochs", type=int, default=d.epochs, help="training epochs (default %(default)s)")
    p.add_argument("--batch", type=_positive_int, default=d.batch_size, help="batch size (default %(default)s)")
    p.add_argument("--lr", type=_nonneg_float, default=d.learning_rate, help="Adam learning rate (default %(default)s)")
    p.add_argument("--max-steps", type=int, default=None, help="stop after this many optimizer steps")
    p.add_argument("--grad-clip", type=float, default=None, help="clip the global gradient norm")
    p.add_argument("--fs-with-unit", action="store_true", help="add the unit loss to fully supervised stage losses")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="neural-descent", description="Learned refinement of articulated body fits.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="synthesize a dataset", description="Synthesize observations from sampled body states.")
    _common(g)
    g.add_argument("--n", type=_positive_int, required=True, help="number of samples")
    g.add_argument("--seed", type=int, default=0, help="random seed (default %(default)s)")
    g.add_argument("--pose-scale", type=_nonneg_float, default=0.3, help="pose prior std (default %(default)s)")
    g.add_argument("--shape-scale", type=_nonneg_float, default=0.5, help="shape prior std (default %(default)s)")
    g.add_argument("--kp-noise", type=_nonneg_float, default=0.0, help="keypoint noise std in crop px (default %(default)s)")
    g.add_argument("--kp-dropout", type=_unit_float, default=0.0, help="keypoint dropout rate (default %(default)s)")
    g.add_argument("--part-dropout", type=_unit_float, default=0.0, help="part channel dropout rate (default %(default)s)")
    g.add_argument("--raster", type=_positive_int, default=64, help="part-map resolution (default %(default)s)")
    g.add_argument("--out", required=True, help="output directory")

    t = sub.add_parser("train", help="train a refiner", description="Meta-train the encoder and recurrent refiner.")
    _common(t)
    t.add_argument("--data", required=True, help="dataset directory or file")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--seed", type=int, default=0, help="initialization and shuffling seed (default %(default)s)")
    _train_flags(t)
    _loss_flags(t)

    f = sub.add_parser("fit", help="fit one sample", description="Fit one sample and dump every iterate.")
    _common(f)
    f.add_argument("--data", required=True, help="dataset directory or file")
    f.add_argument("--index", type=int, default=0, help="sample position in the dataset (default %(default)s)")
    f.add_argument("--ckpt", help="refiner checkpoint (needed for hund and hybrid)")
    f.add_argument("--method", default="hund", help="hund, gd, bfgs or hybrid<i> (default %(default)s)")
    f.add_argument("--gd-steps", type=int, default=100, help="gradient descent steps (default %(default)s)")
    f.add_argument("--gd-step", type=_nonneg_float, default=1e-4, help="gradient descent step size (default %(default)s)")
    f.add_argument("--bfgs-iters", type=_positive_int, default=100, help="BFGS iteration cap (default %(default)s)")
    f.add_argument("--grad-tol", type=_nonneg_float, default=1e-6, help="BFGS gradient tolerance (default %(default)s)")
    f.add_argument("--out", help="write the CSV here instead of stdout")
    _loss_flags(f)

    b = sub.add_parser("bench", help="benchmark methods", description="Run refiner and baselines over a dataset.")
    _common(b)
    b.add_argument("--data", required=True, help="dataset directory or file")
    b.add_argument("--ckpt", help="refiner checkpoint (needed for hund and hybrid)")
    b.add_argument("--methods", default="hund,bfgs", help="comma-separated methods (default %(default)s)")
    b.add_argument("--limit", type=int, default=None, help="use only the first N samples")
    b.add_argument("--gd-steps", type=int, default=100, help="gradient descent steps (default %(default)s)")
    b.add_argument("--gd-step", type=_nonneg_float, default=1e-4, help="gradient descent step size (default %(default)s)")
    b.add_argument("--bfgs-iters", type=_positive_int, default=100, help="BFGS iteration cap (default %(default)s)")
    b.add_argument("--grad-tol", type=_nonneg_float, default=1e-6, help="BFGS gradient tolerance (default %(default)s)")
    b.add_argument("--out", required=True, help="output directory")
    _loss_flags(b)

    a = sub.add_parser("ablate", help="compare meta-losses", description="Train one refiner per meta-loss and seed.")
    _common(a)
    a.add_argument("--train-data", required=True, help="training dataset directory or file")
    a.add_argument("--test-data", required=True, help="test dataset directory or file")
    a.add_argument("--kinds", default=",".join(META_KINDS), help="comma-separated meta-losses (default %(default)s)")
    a.add_argument("--seeds", type=_positive_int, default=3, help="seeds 0..N-1 per kind (default %(default)s)")
    a.add_argument("--out", required=True, help="output directory")
    _train_flags(a)
    _loss_flags(a)
    return parser


# ---------------------------------------------------------------- config files


def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; '#' starts a comment."""
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._subparsers._group_actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _apply_config(sub: argparse.ArgumentParser, values: dict[str, str]) -> None:
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    defaults = {}
    for k, raw in values.items():
        if k not in actions:
            raise UsageError(f"unknown config key {k!r}")
        a = actions[k]
        if isinstance(a, argparse._StoreTrueAction):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"config key {k!r} expects a boolean")
            v = raw.lower() in ("true", "1", "yes")
        else:
            try:
                v = a.type(raw) if a.type else raw
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"config key {k!r}: {exc}") from None
            if a.choices is not None and v not in a.choices:
                raise UsageError(f"config key {k!r}: {v!r} not in {list(a.choices)}")
        defaults[k] = v
        a.required = False
    sub.set_defaults(**defaults)


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    argv = list(argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config and known.command in ("generate", "train", "fit", "bench", "ablate"):
        try:
            values = read_config_file(known.config)
            _apply_config(_subparser(parser, known.command), values)
        except (OSError, UsageError) as exc:
            parser.error(str(exc))
    return parser.parse_args(argv)


def resolve_threads(flag: int | None) -> int:
    if flag is not None:
        return flag
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            v = int(env)
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be a positive integer, got {env!r}") from None
        if v < 1:
            raise UsageError(f"{THREADS_ENV} must be a positive integer, got {env!r}")
        return v
    return 1


# ---------------------------------------------------------------- helpers


def _dataset_path(p) -> Path:
    p = Path(p)
    return p / DATASET_FILE if p.is_dir() else p


def _load_dataset(p):
    path = _dataset_path(p)
    if not path.exists():
        raise UsageError(f"dataset not found: {path}")
    return read_dataset(path), path.read_bytes()


def _weights(ns) -> LossWeights:
    return LossWeights(ns.lambda_k, ns.lambda_b, ns.lambda_m, ns.lambda_3d)


def _raster(ns, ds) -> RasterConfig:
    return RasterConfig(sigma=ns.sigma, gamma=ns.gamma, H=ds.raster.H, W=ds.raster.W)


def _train_config(ns, seed: int) -> TrainConfig:
    return TrainConfig(
        meta_loss_kind=ns.meta, M=ns.m, batch_size=ns.batch, learning_rate=ns.lr, epochs=ns.epochs,
        regime=ns.regime, seed=seed, max_steps=ns.max_steps, fs_with_unit=ns.fs_with_unit, grad_clip=ns.grad_clip,
    )


def _echo(ns) -> dict:
    d = {k: v for k, v in vars(ns).items() if k not in ("config", "verbose", "threads")}
    return d


def _write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)


def _all_finite(values) -> bool:
    return all(math.isfinite(v) for v in values)


def _checkpoint(ns, ds, required: bool):
    if not ns.ckpt:
        if required:
            raise UsageError("this method needs --ckpt")
        return None, None, b""
    path = Path(ns.ckpt)
    if path.is_dir():
        path = path / CHECKPOINT_FILE
    if not path.exists():
        raise UsageError(f"checkpoint not found: {path}")
    expect = {
        "N_p": ds.skeleton.pose_dim, "N_s": ds.skeleton.shape_dim, "P": ds.skeleton.num_parts,
        "N_j": len(ds.samples[0].observation.keypoints2d),
    }
    params, header = load_checkpoint(path, expect)
    return params, header, path.read_bytes()


# ---------------------------------------------------------------- commands


def cmd_generate(ns) -> int:
    ds = generate_dataset(
        ns.n, ns.seed, ns.pose_scale, ns.kp_noise, ns.part_dropout,
        kp_dropout=ns.kp_dropout, shape_scale=ns.shape_scale, raster_size=ns.raster,
    )
    data = dumps(ds).encode("utf-8")
    out = Path(ns.out)
    _write(out / DATASET_FILE, data)
    _write(out / MANIFEST_FILE, bench.manifest("generate", _echo(ns), outputs={DATASET_FILE: data}).encode("utf-8"))
    return 0


def cmd_train(ns) -> int:
    ds, raw = _load_dataset(ns.data)
    config = _train_config(ns, ns.seed)
    weights = _weights(ns)
    cfg = _raster(ns, ds)
    callback = None
    if ns.verbose:
        callback = lambda row: log.info("step %d epoch %d %s meta %.6g", row["step"], row["epoch"], row["regime"], row["meta_loss"])
    try:
        params, tlog = train(ds.observations, config, weights, cfg, ds.skeleton, callback=callback)
    except TrainingDiverged as exc:
        print(f"neural-descent train: {exc}", file=sys.stderr)
        return 1
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    extra = {"train": config_dict(config), "weights": weights.__dict__, "raster": {"sigma": cfg.sigma, "gamma": cfg.gamma, "H": cfg.H, "W": cfg.W}}
    save_checkpoint(out / CHECKPOINT_FILE, params, ds.skeleton, config.M, len(ds.samples[0].observation.keypoints2d), extra)
    log_csv = tlog.to_csv().encode("utf-8")
    _write(out / "train_log.csv", log_csv)
    ck = (out / CHECKPOINT_FILE).read_bytes()
    man = bench.manifest("train", _echo(ns), {DATASET_FILE: raw}, {CHECKPOINT_FILE: ck, "train_log.csv": log_csv})
    _write(out / MANIFEST_FILE, man.encode("utf-8"))
    ok = all(np.all(np.isfinite(a)) for a in params.arrays.values())
    return 0 if ok else 1


def cmd_fit(ns) -> int:
    ds, _ = _load_dataset(ns.data)
    if not 0 <= ns.index < len(ds):
        raise UsageError(f"--index {ns.index} outside dataset of {len(ds)} samples")
    kind, stages = bench.parse_method(ns.method)
    params, header, _ = _checkpoint(ns, ds, kind in ("hund", "hybrid"))
    M = header["M"] if header else TrainConfig().M
    obs = ds.samples[ns.index].observation
    weights, cfg = _weights(ns), _raster(ns, ds)
    if kind == "hund":
        trace = bl.hund_trace(obs, params, M, weights, ds.skeleton, cfg)
    elif kind == "gd":
        trace = bl.fit_gd(obs, None, weights, ns.gd_steps, ns.gd_step, ds.skeleton, cfg)
    elif kind == "bfgs":
        trace = bl.fit_bfgs(obs, None, weights, ns.bfgs_iters, ns.grad_tol, ds.skeleton, cfg)
    else:
        if not 0 <= stages <= M:
            raise UsageError(f"hybrid stage count {stages} outside [0, {M}]")
        trace = bl.fit_hybrid(obs, params, stages, weights, ns.bfgs_iters, ns.grad_tol, M, ds.skeleton, cfg)
    D = ds.skeleton.state_dim
    lines = [",".join(["index", "loss_total", "loss_k", "loss_b", "prior", "evals"] + [f"s{j}" for j in range(D)])]
    for k, (x, f, n, info) in enumerate(zip(trace.iterates, trace.losses, trace.evals, trace.breakdowns)):
        info = info or {}
        vals = [f, info.get("keypoint", math.nan), info.get("part", math.nan), info.get("prior", math.nan)]
        lines.append(",".join([str(k)] + [repr(float(v)) for v in vals] + [str(n)] + [repr(float(v)) for v in x]))
    text = "\n".join(lines) + "\n"
    if ns.out:
        _write(Path(ns.out), text.encode("utf-8"))
    else:
        sys.stdout.write(text)
    return 0 if _all_finite(trace.losses) else 1


def cmd_bench(ns) -> int:
    ds, raw = _load_dataset(ns.data)
    methods = [bench.parse_method(m) for m in ns.methods.split(",") if m.strip()]
    params, header, ck = _checkpoint(ns, ds, any(k in ("hund", "hybrid") for k, _ in methods))
    if ns.limit is not None:
        ds = ds.subset(range(min(ns.limit, len(ds))))
    config = bench.BenchConfig(
        M=header["M"] if header else TrainConfig().M, gd_steps=ns.gd_steps, gd_step_size=ns.gd_step,
        bfgs_max_iters=ns.bfgs_iters, grad_tol=ns.grad_tol, threads=resolve_threads(ns.threads), weights=_weights(ns),
    )
    ds.raster = _raster(ns, ds)
    report = bench.run_benchmark(ds, methods, params, config)
    out = Path(ns.out)
    files = {"report.csv": report.to_csv().encode("utf-8")}
    summary = {"methods": report.summary()}
    labels = [bench.method_label(k, i) for k, i in methods]
    if "hund" in labels and "bfgs" in labels:
        table = bench.crossover_table(report)
        files["crossover.csv"] = bench.crossover_csv(table).encode("utf-8")
        summary["crossover"] = {k: table[k] for k in ("median_hund_evals", "median_baseline_evals", "never_matched")}
    files["summary.json"] = (json.dumps(summary, indent=2, sort_keys=True) + "\n").encode("utf-8")
    for name, data in files.items():
        _write(out / name, data)
    inputs = {DATASET_FILE: raw}
    if ck:
        inputs[CHECKPOINT_FILE] = ck
    _write(out / MANIFEST_FILE, bench.manifest("bench", {**_echo(ns), "bench": config.to_dict()}, inputs, files).encode("utf-8"))
    return 0 if _all_finite(r["loss_total"] for r in report.rows) else 1


def cmd_ablate(ns) -> int:
    tr, raw_tr = _load_dataset(ns.train_data)
    te, raw_te = _load_dataset(ns.test_data)
    kinds = [k.strip() for k in ns.kinds.split(",") if k.strip()]
    bad = [k for k in kinds if k not in META_KINDS]
    if bad or not kinds:
        raise UsageError(f"--kinds must list meta-losses from {META_KINDS}")
    tr.raster = _raster(ns, tr)
    te.raster = _raster(ns, te)
    callback = None
    if ns.verbose:
        callback = lambda r: log.info("ablate %s seed %d: mpjpe %.2f mm", r["kind"], r["seed"], r["mpjpe_mm"])
    result = bench.ablate_metaloss(tr, te, kinds, _train_config(ns, 0), range(ns.seeds), _weights(ns), callback)
    # diverged kinds have infinite medians; JSON has no infinity, so they become null
    table = [{k: (v if not isinstance(v, float) or math.isfinite(v) else None) for k, v in row.items()} for row in result["table"]]
    files = {
        "ablation.csv": bench.ablation_csv(result).encode("utf-8"),
        "summary.json": (json.dumps({"kinds": table}, indent=2, sort_keys=True) + "\n").encode("utf-8"),
    }
    out = Path(ns.out)
    for name, data in files.items():
        _write(out / name, data)
    man = bench.manifest("ablate", _echo(ns), {"train.jsonl": raw_tr, "test.jsonl": raw_te}, files)
    _write(out / MANIFEST_FILE, man.encode("utf-8"))
    return 0 if _all_finite(r["mpjpe_mm"] for r in result["runs"]) else 1


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "fit": cmd_fit, "bench": cmd_bench, "ablate": cmd_ablate}


def main(argv=None) -> int:
    ns = parse_args(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(message)s")
    try:
        ns.threads = resolve_threads(ns.threads)
        return COMMANDS[ns.command](ns)
    except UsageError as exc:
        print(f"neural-descent {ns.command}: error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, ValueError) as exc:
        print(f"neural-descent {ns.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
