"""Benchmark orchestration: run refiner and baseline fits over a dataset,
record per-iterate losses and pose errors, and aggregate them.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import baselines as bl
from .bodymodel import Skeleton
from .dataset import Dataset
from .hund import RefinerParams, TrainConfig, TrainingDiverged, train, unroll
from .renderloss import LossWeights, ObservationBatch, RasterConfig

COLUMNS = (
    "method", "sample_id", "index", "loss_total", "loss_k", "loss_b", "prior",
    "mpjpe_mm", "mpjpe_pa_mm", "mpjpe_trans_mm", "evals",
)
FLOAT_COLUMNS = COLUMNS[3:10]
_HYBRID = re.compile(r"^hybrid\(?(\d+)\)?$")


def parse_method(name: str) -> tuple[str, int | None]:
    """'hund' | 'gd' | 'bfgs' | 'hybrid3' / 'hybrid(3)' -> (kind, stages)."""
    name = name.strip().lower()
    if name in ("hund", "gd", "bfgs"):
        return name, None
    m = _HYBRID.match(name)
    if m:
        return "hybrid", int(m.group(1))
    raise ValueError(f"unknown method {name!r}; expected hund, gd, bfgs or hybrid<i>")


def method_label(kind: str, stages: int | None) -> str:
    return kind if stages is None else f"{kind}{stages}"


@dataclass(frozen=True)
class BenchConfig:
    M: int = 5
    gd_steps: int = 100
    gd_step_size: float = 1e-4
    bfgs_max_iters: int = 100
    grad_tol: float = 1e-6
    threads: int = 1
    weights: LossWeights = field(default_factory=LossWeights)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("threads")
        return d


@dataclass
class BenchmarkReport:
    rows: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def sort(self) -> None:
        self.rows.sort(key=lambda r: (r["method"], r["sample_id"], r["index"]))

    def methods(self) -> list[str]:
        return sorted({r["method"] for r in self.rows})

    def final_rows(self, method: str) -> dict[int, dict]:
        """Last row of every sample's trace for ``method``."""
        out: dict[int, dict] = {}
        for r in self.rows:
            if r["method"] == method:
                out[r["sample_id"]] = r
        return out

    def trace(self, method: str, sample_id: int) -> list[dict]:
        return [r for r in self.rows if r["method"] == method and r["sample_id"] == sample_id]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in self.rows:
            w.writerow([repr(r[c]) if c in FLOAT_COLUMNS else r[c] for c in COLUMNS])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "BenchmarkReport":
        reader = csv.DictReader(io.StringIO(text))
        if tuple(reader.fieldnames or ()) != COLUMNS:
            raise ValueError(f"unexpected report columns {reader.fieldnames}")
        rows = []
        for r in reader:
            row = {"method": r["method"], "sample_id": int(r["sample_id"]), "index": int(r["index"]), "evals": int(r["evals"])}
            row.update({c: float(r[c]) for c in FLOAT_COLUMNS})
            rows.append(row)
        return cls(rows)

    def summary(self) -> dict[str, dict]:
        """Per-method medians of the final iterate's loss, errors and evaluation count."""
        out = {}
        for m in self.methods():
            final = list(self.final_rows(m).values())
            out[m] = {
                "samples": len(final),
                **{f"median_{c}": float(np.median([r[c] for r in final])) for c in ("loss_total", "mpjpe_mm", "mpjpe_pa_mm", "mpjpe_trans_mm", "evals")},
            }
        return out


def _rows(method: str, sample, trace: bl.OptimizerTrace, skeleton: Skeleton) -> list[dict]:
    gt = sample.observation.gt_joints
    rows = []
    for k, (x, f, n, info) in enumerate(zip(trace.iterates, trace.losses, trace.evals, trace.breakdowns)):
        info = info or {}
        if gt is not None:
            mp, pa, tr = (1000.0 * v for v in bl.metrics(bl.state_joints(x, skeleton), gt))
        else:
            mp = pa = tr = math.nan
        rows.append({
            "method": method, "sample_id": sample.sample_id, "index": k,
            "loss_total": float(f), "loss_k": float(info.get("keypoint", math.nan)),
            "loss_b": float(info.get("part", math.nan)), "prior": float(info.get("prior", math.nan)),
            "mpjpe_mm": mp, "mpjpe_pa_mm": pa, "mpjpe_trans_mm": tr, "evals": int(n),
        })
    return rows


def fit_sample(sample, methods, params, config: BenchConfig, skeleton: Skeleton, cfg: RasterConfig) -> list[dict]:
    """All methods on one sample; rows in method order."""
    obs = sample.observation
    w = config.weights
    rows = []
    for kind, stages in methods:
        if kind == "hund":
            trace = bl.hund_trace(obs, params, config.M, w, skeleton, cfg)
        elif kind == "gd":
            trace = bl.fit_gd(obs, None, w, config.gd_steps, config.gd_step_size, skeleton, cfg)
        elif kind == "bfgs":
            trace = bl.fit_bfgs(obs, None, w, config.bfgs_max_iters, config.grad_tol, skeleton, cfg)
        else:
            trace = bl.fit_hybrid(obs, params, stages, w, config.bfgs_max_iters, config.grad_tol, config.M, skeleton, cfg)
        rows += _rows(method_label(kind, stages), sample, trace, skeleton)
    return rows


_WORKER: dict = {}


def _init_worker(methods, params, config, skeleton, cfg):
    _WORKER.update(methods=methods, params=params, config=config, skeleton=skeleton, cfg=cfg)


def _work(sample):
    w = _WORKER
    return fit_sample(sample, w["methods"], w["params"], w["config"], w["skeleton"], w["cfg"])


def run_benchmark(
    dataset: Dataset,
    methods,
    params: RefinerParams | None = None,
    config: BenchConfig | None = None,
) -> BenchmarkReport:
    """Fit every sample with every method; baselines start from the A-pose."""
    config = config or BenchConfig()
    parsed = [parse_method(m) if isinstance(m, str) else m for m in methods]
    if params is None and any(k in ("hund", "hybrid") for k, _ in parsed):
        raise ValueError("methods hund and hybrid need trained refiner parameters")
    for k, i in parsed:
        if k == "hybrid" and not 0 <= i <= config.M:
            raise ValueError(f"hybrid stage count {i} outside [0, {config.M}]")
    report = BenchmarkReport()
    if not parsed:
        return report
    args = (parsed, params, config, dataset.skeleton, dataset.raster)
    if config.threads > 1:
        with ProcessPoolExecutor(config.threads, initializer=_init_worker, initargs=args) as ex:
            for rows in ex.map(_work, dataset.samples):
                report.rows += rows
    else:
        for s in dataset.samples:
            report.rows += fit_sample(s, *args)
    report.sort()
    return report


# ---------------------------------------------------------------- aggregates


def crossover_table(report: BenchmarkReport, hund: str = "hund", baseline: str = "bfgs") -> dict:
    """Evaluations the baseline needs to match the refiner's final loss, per sample.

    Samples where the baseline never gets there count as infinitely many.
    """
    ref = report.final_rows(hund)
    rows = []
    for sid, r in sorted(ref.items()):
        target = r["loss_total"]
        trace = report.trace(baseline, sid)
        needed = next((t["evals"] for t in trace if t["loss_total"] <= target), None)
        rows.append({
            "sample_id": sid, "hund_loss": target, "hund_evals": r["evals"],
            "baseline_evals": needed, "baseline_final_loss": trace[-1]["loss_total"] if trace else math.nan,
        })
    needed = [math.inf if r["baseline_evals"] is None else r["baseline_evals"] for r in rows]
    return {
        "rows": rows,
        "median_hund_evals": float(np.median([r["hund_evals"] for r in rows])) if rows else math.nan,
        "median_baseline_evals": float(np.median(needed)) if rows else math.nan,
        "never_matched": sum(r["baseline_evals"] is None for r in rows),
    }


def crossover_csv(table: dict) -> str:
    lines = ["sample_id,hund_loss,hund_evals,baseline_evals,baseline_final_loss"]
    for r in table["rows"]:
        n = "never" if r["baseline_evals"] is None else str(r["baseline_evals"])
        lines.append(f"{r['sample_id']},{r['hund_loss']!r},{r['hund_evals']},{n},{r['baseline_final_loss']!r}")
    return "\n".join(lines) + "\n"


def evaluate_refiner(dataset: Dataset, params: RefinerParams, M: int, weights: LossWeights) -> dict:
    """Median final-stage MPJPE / MPJPE-PA (mm) of the refiner on ``dataset``."""
    trajs = unroll(ObservationBatch.stack(dataset.observations), params, M, weights, dataset.raster, dataset.skeleton)
    mp, pa = [], []
    for traj, s in zip(trajs, dataset.samples):
        m = bl.metrics(bl.state_joints(traj.states[-1], dataset.skeleton), s.observation.gt_joints)
        mp.append(1000.0 * m[0])
        pa.append(1000.0 * m[1])
    return {"mpjpe_mm": float(np.median(mp)), "mpjpe_pa_mm": float(np.median(pa))}


def ablate_metaloss(
    train_set: Dataset,
    test_set: Dataset,
    kinds,
    config: TrainConfig,
    seeds=(0,),
    weights: LossWeights | None = None,
    callback=None,
) -> dict:
    """Train one refiner per (kind, seed) with otherwise identical settings and
    compare median test errors.  The per-kind score is the median over seeds.

    A run whose training diverges scores an infinite error.
    """
    kinds = list(kinds)
    if not kinds:
        raise ValueError("ablation needs at least one meta-loss kind")
    weights = weights or LossWeights()
    runs = []
    for kind in kinds:
        for seed in seeds:
            c = replace(config, meta_loss_kind=kind, seed=seed)
            try:
                params, log = train(train_set.observations, c, weights, train_set.raster, train_set.skeleton)
            except TrainingDiverged:
                runs.append({"kind": kind, "seed": seed, "mpjpe_mm": math.inf, "mpjpe_pa_mm": math.inf,
                             "final_meta_loss": math.nan, "status": "diverged"})
            else:
                res = evaluate_refiner(test_set, params, c.M, weights)
                final = log.meta_losses[-1] if log.rows else math.nan
                runs.append({"kind": kind, "seed": seed, **res, "final_meta_loss": final, "status": "ok"})
            if callback is not None:
                callback(runs[-1])
    table = []
    for kind in kinds:
        mine = [r for r in runs if r["kind"] == kind]
        table.append({
            "kind": kind,
            "median_mpjpe_mm": float(np.median([r["mpjpe_mm"] for r in mine])),
            "median_mpjpe_pa_mm": float(np.median([r["mpjpe_pa_mm"] for r in mine])),
        })
    return {"runs": runs, "table": table}


def ablation_csv(result: dict) -> str:
    lines = ["kind,seed,status,mpjpe_mm,mpjpe_pa_mm,final_meta_loss"]
    for r in result["runs"]:
        lines.append(f"{r['kind']},{r['seed']},{r['status']},{r['mpjpe_mm']!r},{r['mpjpe_pa_mm']!r},{r['final_meta_loss']!r}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- manifests


def content_hash(data: bytes) -> str:
    """Git blob id of ``data``."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def manifest(command: str, config: dict, inputs: dict[str, bytes] | None = None, outputs: dict[str, bytes] | None = None) -> str:
    doc = {
        "command": command,
        "config": config,
        "inputs": {k: content_hash(v) for k, v in sorted((inputs or {}).items())},
        "outputs": {k: content_hash(v) for k, v in sorted((outputs or {}).items())},
    }
    return json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n"


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    raise TypeError(f"not serializable: {type(o).__name__}")
