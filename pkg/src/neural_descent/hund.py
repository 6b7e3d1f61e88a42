"""Neural descent: context encoder, recurrent refiner, meta-losses and training.

The refiner is an LSTM cell whose input is the previous state, the previous
unit loss (as log(1 + L)) and the context code.  Its output head proposes a
residual state update, so a zero head leaves every stage at the encoder's
initial estimate.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .bodymodel import IDENTITY_6D, ModelState, Skeleton, default_skeleton
from .camera import BehindCameraError
from .renderloss import LossTerms, LossWeights, Observation, ObservationBatch, RasterConfig, evaluate

log = logging.getLogger(__name__)

META_KINDS = ("sum", "last", "min", "max", "oi")
REGIMES = ("ss", "fs", "fs+ss")
POOL = 8
CONTEXT_DIM = 128
ENCODER_HIDDEN = 256
HIDDEN = 256


# ---------------------------------------------------------------- features


def adaptive_avg_pool(maps: np.ndarray, out: int = POOL) -> np.ndarray:
    """Average-pool the two spatial axes of (..., H, W, C) to (..., out, out, C)."""
    H, W = maps.shape[-3], maps.shape[-2]
    rows = [(i * H // out, max(i * H // out + 1, -(-(i + 1) * H // out))) for i in range(out)]
    cols = [(j * W // out, max(j * W // out + 1, -(-(j + 1) * W // out))) for j in range(out)]
    if H % out == 0 and W % out == 0:
        shp = maps.shape[:-3] + (out, H // out, out, W // out, maps.shape[-1])
        return maps.reshape(shp).mean(axis=(-4, -2))
    res = np.empty(maps.shape[:-3] + (out, out, maps.shape[-1]))
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            res[..., i, j, :] = maps[..., r0:r1, c0:c1, :].mean(axis=(-3, -2))
    return res


def feature_length(num_keypoints: int, num_parts: int) -> int:
    return 3 * num_keypoints + POOL * POOL * (num_parts + 1) + 4


def featurize(obs) -> np.ndarray:
    """Fixed-length observation features; (F,) for one observation, (B, F) for a batch."""
    single = isinstance(obs, Observation)
    batch = ObservationBatch.stack([obs]) if single else obs
    size = batch.crop_size[:, None]
    kp = batch.keypoints2d / size[:, :, None] * 2.0 - 1.0
    pooled = adaptive_avg_pool(batch.part_maps)
    cam = batch.intrinsics / size
    B = len(batch)
    feats = np.concatenate([kp.reshape(B, -1), batch.confidences, pooled.reshape(B, -1), cam], axis=1)
    return feats[0] if single else feats


# ---------------------------------------------------------------- parameters


@dataclass
class RefinerShape:
    feature_dim: int
    state_dim: int
    context_dim: int = CONTEXT_DIM
    encoder_hidden: int = ENCODER_HIDDEN
    hidden: int = HIDDEN

    @property
    def cell_input(self) -> int:
        return self.state_dim + 1 + self.context_dim

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            "enc_w1": (self.feature_dim, self.encoder_hidden),
            "enc_b1": (self.encoder_hidden,),
            "enc_w2": (self.encoder_hidden, self.context_dim),
            "enc_b2": (self.context_dim,),
            "init_w": (self.context_dim, self.state_dim),
            "init_b": (self.state_dim,),
            "cell_wx": (self.cell_input, 4 * self.hidden),
            "cell_wh": (self.hidden, 4 * self.hidden),
            "cell_b": (4 * self.hidden,),
            "out_w": (self.hidden, self.state_dim),
            "out_b": (self.state_dim,),
        }


class RefinerParams:
    """Named trainable arrays of the encoder and the recurrent refiner."""

    def __init__(self, shape: RefinerShape, arrays: dict[str, np.ndarray]):
        expected = shape.param_shapes()
        if set(arrays) != set(expected):
            raise ValueError(f"parameter names differ: {sorted(set(arrays) ^ set(expected))}")
        for k, shp in expected.items():
            if arrays[k].shape != shp:
                raise ValueError(f"{k}: expected shape {shp}, got {arrays[k].shape}")
        self.shape = shape
        self.arrays = {k: np.asarray(arrays[k], dtype=np.float64) for k in expected}

    @classmethod
    def init(cls, shape: RefinerShape, seed: int = 0) -> "RefinerParams":
        rng = np.random.default_rng(seed)
        arrays = {}
        for name, shp in shape.param_shapes().items():
            if name.startswith("out_") or len(shp) == 1:
                arrays[name] = np.zeros(shp)
            else:
                bound = 1.0 / math.sqrt(shp[0])
                arrays[name] = rng.uniform(-bound, bound, size=shp)
        # forget-gate bias 1
        arrays["cell_b"][shape.hidden : 2 * shape.hidden] = 1.0
        return cls(shape, arrays)

    @classmethod
    def zeros(cls, shape: RefinerShape) -> "RefinerParams":
        return cls(shape, {k: np.zeros(s) for k, s in shape.param_shapes().items()})

    def copy(self) -> "RefinerParams":
        return RefinerParams(self.shape, {k: v.copy() for k, v in self.arrays.items()})

    def values(self, requires_grad: bool = False) -> dict[str, dc.Value]:
        return {k: dc.Value(v, requires_grad) for k, v in self.arrays.items()}

    def num_parameters(self) -> int:
        return sum(v.size for v in self.arrays.values())

    def allclose(self, other: "RefinerParams", atol: float = 0.0) -> bool:
        return all(np.allclose(self.arrays[k], other.arrays[k], rtol=0, atol=atol) for k in self.arrays)


@dataclass
class Memory:
    hidden: dc.Value
    cell: dc.Value


# ---------------------------------------------------------------- forward pieces


def encode_context(obs, params: RefinerParams | dict, skeleton: Skeleton | None = None):
    """(s^c, s_0).  numpy/ModelState out for plain params, Values for a Value dict."""
    skeleton = skeleton or default_skeleton()
    track = isinstance(params, dict)
    P = params if track else params.values()
    single = isinstance(obs, Observation)
    batch = ObservationBatch.stack([obs]) if single else obs
    feats = featurize(batch)
    sc, s0 = _encode(feats, P, skeleton)
    if track:
        return sc, s0
    if single:
        return sc.data[0], ModelState.from_vector(s0.data[0], skeleton)
    return sc.data, s0.data


def _encode(feats: np.ndarray, P: dict[str, dc.Value], skeleton: Skeleton):
    h = dc.tanh(feats @ P["enc_w1"] + P["enc_b1"])
    sc = dc.tanh(h @ P["enc_w2"] + P["enc_b2"])
    raw = sc @ P["init_w"] + P["init_b"]
    D = skeleton.state_dim
    offset = np.zeros(D)
    offset[D - 9 : D - 3] = IDENTITY_6D
    offset[D - 1] = 1.0
    head = raw[:, : D - 1] + offset[: D - 1]
    tz = dc.softplus(raw[:, D - 1 :]) + offset[D - 1]
    return sc, dc.concat([head, tz], axis=1)


def _loss_feature(L: dc.Value) -> dc.Value:
    return dc.log1p(dc.maximum(L, 0.0))


def refine_step(s_prev, m_prev: Memory, L_prev, sc, params):
    """One recurrent update: returns (s_next, m_next).  Batched (B, .) Values."""
    P = params if isinstance(params, dict) else params.values()
    s_prev, sc, L_prev = dc.as_value(s_prev), dc.as_value(sc), dc.as_value(L_prev)
    B = s_prev.shape[0]
    x = dc.concat([s_prev, dc.reshape(_loss_feature(L_prev), (B, 1)), sc], axis=1)
    gates = x @ P["cell_wx"] + m_prev.hidden @ P["cell_wh"] + P["cell_b"]
    Hn = m_prev.hidden.shape[1]
    i = dc.sigmoid(gates[:, 0:Hn])
    f = dc.sigmoid(gates[:, Hn : 2 * Hn])
    g = dc.tanh(gates[:, 2 * Hn : 3 * Hn])
    o = dc.sigmoid(gates[:, 3 * Hn : 4 * Hn])
    cell = f * m_prev.cell + i * g
    hidden = o * dc.tanh(cell)
    s_next = s_prev + (hidden @ P["out_w"] + P["out_b"])
    return s_next, Memory(hidden, cell)


def zero_memory(batch_size: int, hidden: int) -> Memory:
    return Memory(dc.Value(np.zeros((batch_size, hidden))), dc.Value(np.zeros((batch_size, hidden))))


# ---------------------------------------------------------------- unrolling


@dataclass
class Trajectory:
    """One sample's refinement: M + 1 states, M stage losses (on s_1..s_M)."""

    states: list[np.ndarray]
    initial_loss: dict[str, float]
    unit_losses: list[dict[str, float]]
    eval_count: int
    truncated: bool = False
    full_losses: list[float] | None = None

    @property
    def stage_losses(self) -> list[float]:
        return [b["total"] for b in self.unit_losses]

    @property
    def all_losses(self) -> list[dict[str, float]]:
        return [self.initial_loss] + self.unit_losses


@dataclass
class UnrollGraph:
    states: list[dc.Value]
    terms: list[LossTerms]


def unroll_graph(
    batch: ObservationBatch,
    P: dict[str, dc.Value],
    M: int,
    skeleton: Skeleton,
    weights: LossWeights,
    cfg: RasterConfig,
    with_full: bool = False,
) -> UnrollGraph:
    """Differentiable unroll over a batch; terms[i] are the losses at s_i."""
    if M < 1:
        raise ValueError("M must be at least 1")
    feats = featurize(batch)
    sc, s = _encode(feats, P, skeleton)
    mem = zero_memory(len(batch), P["cell_wh"].shape[0])
    states = [s]
    terms = [evaluate(s, batch, skeleton, weights, cfg, with_full=with_full)]
    for _ in range(M):
        s, mem = refine_step(s, mem, terms[-1].unit, sc, P)
        states.append(s)
        terms.append(evaluate(s, batch, skeleton, weights, cfg, with_full=with_full))
    return UnrollGraph(states, terms)


def unroll(
    obs,
    params: RefinerParams,
    M: int = 5,
    weights: LossWeights | None = None,
    cfg: RasterConfig | None = None,
    skeleton: Skeleton | None = None,
    with_full: bool = False,
) -> Trajectory | list[Trajectory]:
    """Run the refiner without gradients.  One Trajectory per observation."""
    weights = weights or LossWeights()
    cfg = cfg or RasterConfig()
    skeleton = skeleton or default_skeleton()
    single = isinstance(obs, Observation)
    batch = ObservationBatch.stack([obs]) if single else obs
    try:
        g = unroll_graph(batch, params.values(), M, skeleton, weights, cfg, with_full)
        out = [_trajectory(g, b, weights, with_full) for b in range(len(batch))]
    except BehindCameraError:
        if len(batch) > 1:
            out = [unroll(_slice_batch(batch, b), params, M, weights, cfg, skeleton, with_full)[0] for b in range(len(batch))]
        else:
            out = [_truncated_unroll(batch, params, M, skeleton, weights, cfg, with_full)]
    return out[0] if single else out


def _trajectory(g: UnrollGraph, b: int, weights: LossWeights, with_full: bool) -> Trajectory:
    bds = [t.breakdown(weights, b) for t in g.terms]
    return Trajectory(
        states=[s.data[b].copy() for s in g.states],
        initial_loss=bds[0],
        unit_losses=bds[1:],
        eval_count=len(g.terms),
        full_losses=[float(t.full.data[b]) for t in g.terms] if with_full else None,
    )


def _truncated_unroll(batch, params, M, skeleton, weights, cfg, with_full) -> Trajectory:
    P = params.values()
    sc, s = _encode(featurize(batch), P, skeleton)
    mem = zero_memory(1, P["cell_wh"].shape[0])
    states, terms = [s], []
    try:
        terms.append(evaluate(s, batch, skeleton, weights, cfg, with_full=with_full))
        for _ in range(M):
            s, mem = refine_step(s, mem, terms[-1].unit, sc, P)
            states.append(s)
            terms.append(evaluate(s, batch, skeleton, weights, cfg, with_full=with_full))
    except BehindCameraError:
        pass
    bds = [t.breakdown(weights, 0) for t in terms]
    nan = {"total": math.nan, "keypoint": math.nan, "part": math.nan, "prior": math.nan}
    return Trajectory(
        states=[x.data[0].copy() for x in states[: len(terms)]],
        initial_loss=bds[0] if bds else nan,
        unit_losses=bds[1:],
        eval_count=len(states),
        truncated=True,
        full_losses=[float(t.full.data[0]) for t in terms] if with_full else None,
    )


def _slice_batch(batch: ObservationBatch, b: int) -> ObservationBatch:
    sl = slice(b, b + 1)
    return ObservationBatch(
        batch.keypoints2d[sl], batch.confidences[sl], batch.part_maps[sl], batch.intrinsics[sl], batch.crop_size[sl],
        None if batch.gt_joints is None else batch.gt_joints[sl],
        None if batch.gt_vertices is None else batch.gt_vertices[sl],
    )


# ---------------------------------------------------------------- meta-losses


def meta_loss(stage_losses, kind: str):
    """Aggregate stage losses L^1..L^M (last axis) into one value per sample.

    ``oi`` sums min(L^i - min_{j<i} L^j, 0) for i >= 2; the first stage has no
    earlier stage to improve on and contributes 0.
    """
    if kind not in META_KINDS:
        raise ValueError(f"unknown meta-loss {kind!r}; expected one of {META_KINDS}")
    track = isinstance(stage_losses, dc.Value)
    L = dc.as_value(stage_losses)
    if L.ndim == 0 or L.shape[-1] == 0:
        raise ValueError("meta_loss: empty stage-loss sequence")
    M = L.shape[-1]
    if kind == "sum":
        out = dc.sum_(L, axis=-1)
    elif kind == "last":
        out = L[..., M - 1]
    elif kind == "min":
        out = dc.amin(L, axis=-1)
    elif kind == "max":
        out = dc.amax(L, axis=-1)
    else:
        out = dc.Value(np.zeros(L.shape[:-1]))
        best = L[..., 0]
        for i in range(1, M):
            cur = L[..., i]
            out = out + dc.minimum(cur - best, 0.0)
            best = dc.minimum(best, cur)
    if track:
        return out
    return float(out.data) if out.ndim == 0 else out.data


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    meta_loss_kind: str = "last"
    M: int = 5
    batch_size: int = 32
    learning_rate: float = 1e-4
    epochs: int = 50
    regime: str = "ss"
    seed: int = 0
    max_steps: int | None = None
    fs_with_unit: bool = False
    grad_clip: float | None = None
    context_dim: int = CONTEXT_DIM
    encoder_hidden: int = ENCODER_HIDDEN
    hidden: int = HIDDEN
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("M must be at least 1")
        if self.meta_loss_kind not in META_KINDS:
            raise ValueError(f"meta_loss_kind must be one of {META_KINDS}")
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    @property
    def meta_losses(self) -> list[float]:
        return [r["meta_loss"] for r in self.rows]

    def to_csv(self) -> str:
        lines = ["step,epoch,regime,meta_loss,status"]
        for r in self.rows:
            lines.append(f"{r['step']},{r['epoch']},{r['regime']},{r['meta_loss']!r},{r['status']}")
        return "\n".join(lines) + "\n"


class Adam:
    def __init__(self, params: RefinerParams, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.t = 0

    def step(self, params: RefinerParams, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            params.arrays[k] = params.arrays[k] - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def batch_objective(
    batch: ObservationBatch,
    P: dict[str, dc.Value],
    config: TrainConfig,
    skeleton: Skeleton,
    weights: LossWeights,
    cfg: RasterConfig,
    supervised: bool,
) -> dc.Value:
    """Mean meta-loss over the batch for one regime."""
    g = unroll_graph(batch, P, config.M, skeleton, weights, cfg, with_full=supervised)
    if supervised:
        stage = [t.full + t.unit if config.fs_with_unit else t.full for t in g.terms[1:]]
    else:
        stage = [t.unit for t in g.terms[1:]]
    L = dc.stack(stage, axis=1)  # (B, M)
    return dc.mean(meta_loss(L, config.meta_loss_kind))


def refiner_shape_for(skeleton: Skeleton, config: TrainConfig, num_keypoints: int | None = None) -> RefinerShape:
    nk = skeleton.num_joints if num_keypoints is None else num_keypoints
    return RefinerShape(
        feature_dim=feature_length(nk, skeleton.num_parts),
        state_dim=skeleton.state_dim,
        context_dim=config.context_dim,
        encoder_hidden=config.encoder_hidden,
        hidden=config.hidden,
    )


def train(
    observations: list[Observation],
    config: TrainConfig,
    weights: LossWeights | None = None,
    cfg: RasterConfig | None = None,
    skeleton: Skeleton | None = None,
    init: RefinerParams | None = None,
    callback=None,
) -> tuple[RefinerParams, TrainLog]:
    """First-order meta-training of the encoder and refiner.

    SS batches minimize the meta-loss of unit losses, FS batches that of the
    3D losses; FS+SS alternates the two on consecutive steps.
    """
    weights = weights or LossWeights()
    cfg = cfg or RasterConfig()
    skeleton = skeleton or default_skeleton()
    if not observations:
        raise ValueError("train: empty dataset")
    if config.regime in ("fs", "fs+ss") and not all(o.has_ground_truth for o in observations):
        raise ValueError(f"regime {config.regime!r} needs 3D ground truth on every sample")
    rng = np.random.default_rng(config.seed)
    params = init.copy() if init is not None else RefinerParams.init(
        refiner_shape_for(skeleton, config, len(observations[0].keypoints2d)), int(rng.integers(2**31))
    )
    opt = Adam(params, config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    trainlog = TrainLog()
    n = len(observations)
    bs = min(config.batch_size, n)
    steps_per_epoch = max(1, n // bs)
    step = 0
    bad = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for k in range(steps_per_epoch):
            if config.max_steps is not None and step >= config.max_steps:
                return params, trainlog
            idx = np.sort(order[k * bs : (k + 1) * bs])
            batch = ObservationBatch.stack([observations[i] for i in idx])
            if config.regime == "fs+ss":
                supervised = step % 2 == 1
            else:
                supervised = config.regime == "fs"
            P = params.values(requires_grad=True)
            status = "ok"
            try:
                obj = batch_objective(batch, P, config, skeleton, weights, cfg, supervised)
                value = float(obj.data)
                if not math.isfinite(value):
                    raise FloatingPointError
                grads = dict(zip(P, dc.gradient(obj, list(P.values()))))
                if not all(np.all(np.isfinite(g)) for g in grads.values()):
                    raise FloatingPointError
            except (FloatingPointError, BehindCameraError, ValueError) as exc:
                if isinstance(exc, ValueError) and not isinstance(exc, BehindCameraError):
                    if "rot6d" not in str(exc) and "non-finite" not in str(exc):
                        raise
                value, status = math.nan, "skipped"
                bad += 1
                log.warning("step %d skipped: non-finite or degenerate loss", step)
                if bad >= 3:
                    trainlog.rows.append(dict(step=step, epoch=epoch, regime="fs" if supervised else "ss", meta_loss=value, status=status))
                    raise TrainingDiverged(f"three consecutive non-finite steps ending at step {step}")
            else:
                bad = 0
                if config.grad_clip is not None:
                    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
                    if total > config.grad_clip:
                        grads = {k2: g * (config.grad_clip / total) for k2, g in grads.items()}
                opt.step(params, grads)
            row = dict(step=step, epoch=epoch, regime="fs" if supervised else "ss", meta_loss=value, status=status)
            trainlog.rows.append(row)
            if callback is not None:
                callback(row)
            step += 1
    return params, trainlog


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"NDCKPT01"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(
    path, params: RefinerParams, skeleton: Skeleton, M: int, num_keypoints: int, extra: dict | None = None
) -> None:
    """Magic, u64 header length, JSON header, then little-endian float64 arrays."""
    names = list(params.arrays)
    header = {
        "format_version": CKPT_VERSION,
        "N_p": skeleton.pose_dim,
        "N_s": skeleton.shape_dim,
        "N_j": num_keypoints,
        "P": skeleton.num_parts,
        "d_c": params.shape.context_dim,
        "hidden": params.shape.hidden,
        "encoder_hidden": params.shape.encoder_hidden,
        "feature_dim": params.shape.feature_dim,
        "M": M,
        "skeleton": skeleton.to_dict(),
        "shape_basis_seed": int(skeleton.shape_seed),
        "arrays": [{"name": k, "shape": list(params.arrays[k].shape)} for k in names],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for k in names:
            fh.write(np.ascontiguousarray(params.arrays[k], dtype="<f8").tobytes())


def load_checkpoint(path, expect: dict | None = None) -> tuple[RefinerParams, dict]:
    """Read a checkpoint; ``expect`` maps header keys to required values."""
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + n].decode("utf-8"))
    if header.get("format_version") != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")
    for k, v in (expect or {}).items():
        if header.get(k) != v:
            raise CheckpointError(f"checkpoint {k}={header.get(k)} does not match expected {v}")
    shape = RefinerShape(
        feature_dim=header["feature_dim"],
        state_dim=header["N_p"] + header["N_s"] + 9,
        context_dim=header["d_c"],
        encoder_hidden=header["encoder_hidden"],
        hidden=header["hidden"],
    )
    off = 16 + n
    arrays = {}
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if off + 8 * count > len(raw):
            raise CheckpointError(f"{path}: truncated array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(entry["shape"]).astype(np.float64)
        off += 8 * count
    if off != len(raw):
        raise CheckpointError("trailing or missing array bytes")
    return RefinerParams(shape, arrays), header


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
