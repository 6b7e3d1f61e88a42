"""Observation losses: keypoint reprojection, soft-rasterized part alignment,
the self-supervised unit loss and the 3D fully-supervised loss.

All batched functions take a state Value of shape (B, D) and an
:class:`ObservationBatch` and return per-sample Values of shape (B,).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _raster
from . import diffcore as dc
from .bodymodel import Mesh, ModelState, Skeleton, as_state_value, mesh_topology, pose_vertices
from .camera import Intrinsics, project

# culling distance in units of sqrt(sigma): skipped coverage < exp(-36)
CULL_FACTOR = math.sqrt(36.0)


@dataclass(frozen=True)
class RasterConfig:
    sigma: float = 1.0
    gamma: float = 1e-2
    H: int = 64
    W: int = 64

    def __post_init__(self):
        if not (self.sigma > 0 and self.gamma > 0):
            raise ValueError("sigma and gamma must be positive")
        if self.H <= 0 or self.W <= 0:
            raise ValueError("raster extent must be positive")


@dataclass(frozen=True)
class LossWeights:
    lambda_k: float = 1.0
    lambda_b: float = 1.0
    lambda_m: float = 1.0
    lambda_3d: float = 1.0

    def __post_init__(self):
        for name in ("lambda_k", "lambda_b", "lambda_m", "lambda_3d"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and nonnegative, got {v}")


@dataclass
class Observation:
    keypoints2d: np.ndarray
    confidences: np.ndarray
    part_map: np.ndarray
    crop_intrinsics: Intrinsics
    crop_size: int = 480
    gt_joints: np.ndarray | None = None
    gt_vertices: np.ndarray | None = None

    def __post_init__(self):
        self.keypoints2d = np.asarray(self.keypoints2d, dtype=np.float64)
        self.confidences = np.asarray(self.confidences, dtype=np.float64)
        self.part_map = np.asarray(self.part_map, dtype=np.float64)
        if self.gt_joints is not None:
            self.gt_joints = np.asarray(self.gt_joints, dtype=np.float64)
        if self.gt_vertices is not None:
            self.gt_vertices = np.asarray(self.gt_vertices, dtype=np.float64)

    @property
    def has_ground_truth(self) -> bool:
        return self.gt_joints is not None or self.gt_vertices is not None


@dataclass
class ObservationBatch:
    keypoints2d: np.ndarray  # (B, N_j, 2)
    confidences: np.ndarray  # (B, N_j)
    part_maps: np.ndarray  # (B, H, W, P + 1)
    intrinsics: np.ndarray  # (B, 4) crop intrinsics
    crop_size: np.ndarray  # (B,)
    gt_joints: np.ndarray | None = None
    gt_vertices: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.keypoints2d)

    @classmethod
    def stack(cls, observations) -> "ObservationBatch":
        obs = list(observations)
        if not obs:
            raise ValueError("cannot batch zero observations")
        gj = [o.gt_joints for o in obs]
        gv = [o.gt_vertices for o in obs]
        return cls(
            keypoints2d=np.stack([o.keypoints2d for o in obs]),
            confidences=np.stack([o.confidences for o in obs]),
            part_maps=np.stack([o.part_map for o in obs]),
            intrinsics=np.stack([o.crop_intrinsics.as_array() for o in obs]),
            crop_size=np.array([o.crop_size for o in obs], dtype=np.float64),
            gt_joints=np.stack(gj) if all(g is not None for g in gj) else None,
            gt_vertices=np.stack(gv) if all(g is not None for g in gv) else None,
        )

    def raster_intrinsics(self, H: int, W: int) -> np.ndarray:
        sx = W / self.crop_size
        sy = H / self.crop_size
        return self.intrinsics * np.stack([sx, sy, sx, sy], axis=1)


def _as_batch(obs) -> ObservationBatch:
    return obs if isinstance(obs, ObservationBatch) else ObservationBatch.stack([obs])


# ---------------------------------------------------------------- rasterization


def _triangle_inputs(vertices: dc.Value, triangles: np.ndarray, C_raster: np.ndarray):
    """Projected triangle corners (B, T, 3, 2) and inverse mean depth (B, T)."""
    B, Nv = vertices.shape[0], vertices.shape[1]
    if not np.all(np.isfinite(vertices.data)):
        raise ValueError("soft_rasterize: non-finite vertex")
    uv = project(vertices, C_raster)  # (B, N_v, 2)
    tri = dc.reshape(uv[:, triangles.reshape(-1)], (B, len(triangles), 3, 2))
    z = vertices[:, :, 2]
    zt = dc.reshape(z[:, triangles.reshape(-1)], (B, len(triangles), 3))
    invz = 1.0 / dc.mean(zt, axis=-1)
    return tri, invz


def raster_triangles(tri: dc.Value, invz: dc.Value, labels: np.ndarray, cfg: RasterConfig, num_parts: int) -> dc.Value:
    """Fused soft rasterization primitive over projected triangles."""
    tri_d = np.ascontiguousarray(tri.data)
    invz_d = np.ascontiguousarray(invz.data)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    margin = CULL_FACTOR * math.sqrt(cfg.sigma)
    img, S, Z, N, zmax = _raster.soft_forward(
        tri_d, invz_d, labels, cfg.H, cfg.W, num_parts, cfg.sigma, cfg.gamma, margin
    )

    def vjp(g):
        g_tri, g_invz = _raster.soft_backward(
            np.ascontiguousarray(g), tri_d, invz_d, labels, S, Z, N, zmax, cfg.sigma, cfg.gamma, margin
        )
        return g_tri, g_invz

    return dc.custom(img, (tri, invz), vjp, "soft_raster")


def raster_triangles_dense(tri: dc.Value, invz: dc.Value, labels: np.ndarray, cfg: RasterConfig, num_parts: int) -> dc.Value:
    """The same aggregation composed from elementary primitives, without culling.

    Memory grows as B*T*H*W; meant for cross-checking on small problems.
    """
    B, T = invz.shape
    ys, xs = np.meshgrid(np.arange(cfg.H) + 0.5, np.arange(cfg.W) + 0.5, indexing="ij")
    pix = np.stack([xs.ravel(), ys.ravel()], axis=-1)  # (HW, 2)
    if T == 0:
        return dc.Value(np.zeros((B, cfg.H, cfg.W, num_parts + 1)))
    d2_edges = []
    for k in range(3):
        a = dc.reshape(tri[:, :, k], (B, T, 1, 2))
        b = dc.reshape(tri[:, :, (k + 1) % 3], (B, T, 1, 2))
        e = b - a
        w = pix - a  # (B, T, HW, 2)
        ee = dc.sum_(e * e, axis=-1, keepdims=True)
        safe = dc.Value(np.where(ee.data > 0, 0.0, 1.0))
        t = dc.clip(dc.sum_(w * e, axis=-1, keepdims=True) / (ee + safe), 0.0, 1.0)
        r = w - t * e
        d2_edges.append(dc.sum_(r * r, axis=-1))
    d2 = dc.amin(dc.stack(d2_edges, axis=-1), axis=-1)  # (B, T, HW)
    sign = np.where(_inside_dense(tri.data, pix), 1.0, -1.0)
    x = d2 * (sign / cfg.sigma)
    D = dc.sigmoid(x)
    S = -dc.sum_(dc.softplus(x), axis=1)  # (B, HW)
    alpha = 1.0 - dc.exp(S)
    zmax = np.max(invz.data, axis=1, keepdims=True)
    wgt = dc.exp((invz - zmax) * (1.0 / cfg.gamma))  # (B, T)
    e = D * dc.reshape(wgt, (B, T, 1))
    onehot = np.eye(num_parts)[labels]  # (T, P)
    N = dc.swapaxes(e, 1, 2) @ onehot  # (B, HW, P)
    Z = dc.sum_(e, axis=1) + _raster.EPS_Z  # (B, HW)
    parts = N * dc.reshape(alpha / Z, (B, -1, 1))
    img = dc.concat([parts, dc.reshape(alpha, (B, -1, 1))], axis=-1)
    return dc.reshape(img, (B, cfg.H, cfg.W, num_parts + 1))


def _inside_dense(tri: np.ndarray, pix: np.ndarray) -> np.ndarray:
    v = tri[:, :, None]  # (B, T, 1, 3, 2)
    p = pix[None, None]
    cs = []
    for k in range(3):
        a, b = v[..., k, :], v[..., (k + 1) % 3, :]
        cs.append((b[..., 0] - a[..., 0]) * (p[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (p[..., 0] - a[..., 0]))
    c = np.stack(cs)
    return np.all(c >= 0, axis=0) | np.all(c <= 0, axis=0)


def soft_rasterize(mesh: Mesh, C_c, cfg: RasterConfig, crop_size: float = 480, dense: bool = False):
    """Render a (possibly batched) mesh to H x W x (P + 1) part probabilities.

    ``C_c`` are crop intrinsics for a ``crop_size`` square crop; the raster
    samples the same view at ``cfg.H x cfg.W``.  Returns a Value when the mesh
    vertices are a Value, else a numpy array.
    """
    track = isinstance(mesh.vertices, dc.Value)
    verts = dc.as_value(mesh.vertices)
    squeeze = verts.ndim == 2
    if squeeze:
        verts = dc.reshape(verts, (1,) + verts.shape)
    num_parts = mesh.vertex_semantics.shape[1] - 1
    C = np.asarray(C_c.as_array() if isinstance(C_c, Intrinsics) else C_c, dtype=np.float64)
    C = C * np.array([cfg.W, cfg.H, cfg.W, cfg.H]) / crop_size
    if len(mesh.triangles) == 0:
        img = dc.Value(np.zeros((verts.shape[0], cfg.H, cfg.W, num_parts + 1)))
    else:
        tri, invz = _triangle_inputs(verts, mesh.triangles, C)
        fn = raster_triangles_dense if dense else raster_triangles
        img = fn(tri, invz, mesh.triangle_labels, cfg, num_parts)
    if squeeze:
        img = dc.reshape(img, img.shape[1:])
    return img if track else img.data


def hard_rasterize(mesh: Mesh, C_c, cfg: RasterConfig, crop_size: float = 480) -> np.ndarray:
    """Binary z-buffered part map (nearest triangle by inverse mean depth)."""
    verts = np.asarray(mesh.vertices.data if isinstance(mesh.vertices, dc.Value) else mesh.vertices)
    squeeze = verts.ndim == 2
    if squeeze:
        verts = verts[None]
    num_parts = mesh.vertex_semantics.shape[1] - 1
    C = np.asarray(C_c.as_array() if isinstance(C_c, Intrinsics) else C_c, dtype=np.float64)
    C = C * np.array([cfg.W, cfg.H, cfg.W, cfg.H]) / crop_size
    if len(mesh.triangles) == 0:
        img = np.zeros((verts.shape[0], cfg.H, cfg.W, num_parts + 1))
    else:
        tri, invz = _triangle_inputs(dc.Value(verts), mesh.triangles, C)
        img = _raster.hard_raster(
            np.ascontiguousarray(tri.data), np.ascontiguousarray(invz.data), mesh.triangle_labels, cfg.H, cfg.W, num_parts
        )
    return img[0] if squeeze else img


def edge_band_distance(mesh: Mesh, C_c, cfg: RasterConfig, crop_size: float = 480) -> np.ndarray:
    """Distance in raster pixels from each pixel centre to the nearest projected edge."""
    verts = np.asarray(mesh.vertices.data if isinstance(mesh.vertices, dc.Value) else mesh.vertices)
    squeeze = verts.ndim == 2
    if squeeze:
        verts = verts[None]
    C = np.asarray(C_c.as_array() if isinstance(C_c, Intrinsics) else C_c, dtype=np.float64)
    C = C * np.array([cfg.W, cfg.H, cfg.W, cfg.H]) / crop_size
    tri, _ = _triangle_inputs(dc.Value(verts), mesh.triangles, C)
    out = _raster.edge_distance(np.ascontiguousarray(tri.data), cfg.H, cfg.W)
    return out[0] if squeeze else out


# ---------------------------------------------------------------- losses


@dataclass
class LossTerms:
    """Per-sample loss Values (shape (B,)); unweighted unless noted."""

    keypoint: dc.Value
    part: dc.Value | None
    prior: dc.Value
    unit: dc.Value
    joints: dc.Value
    vertices: dc.Value
    full: dc.Value | None = None

    def breakdown(self, weights: LossWeights, index: int = 0) -> dict[str, float]:
        k = weights.lambda_k * float(self.keypoint.data[index])
        b = weights.lambda_b * float(self.part.data[index]) if self.part is not None else 0.0
        p = float(self.prior.data[index])
        return {"total": float(self.unit.data[index]), "keypoint": k, "part": b, "prior": p}


def _keypoint_terms(joints: dc.Value, batch: ObservationBatch) -> dc.Value:
    uv = project(joints, batch.intrinsics)
    resid = dc.norm(uv - batch.keypoints2d, axis=-1)  # (B, N_j)
    return dc.mean(resid * batch.confidences, axis=-1)


def _part_terms(vertices: dc.Value, batch: ObservationBatch, skeleton: Skeleton, cfg: RasterConfig) -> dc.Value:
    H, W = batch.part_maps.shape[1:3]
    if (H, W) != (cfg.H, cfg.W):
        raise dc.ShapeError("part_loss", f"part map extent {(H, W)} differs from raster extent {(cfg.H, cfg.W)}")
    tris, sem = mesh_topology(skeleton)
    labels = _labels_for(skeleton, tris, sem)
    tri, invz = _triangle_inputs(vertices, tris, batch.raster_intrinsics(cfg.H, cfg.W))
    img = raster_triangles(tri, invz, labels, cfg, skeleton.num_parts)
    diff = dc.abs_(img - batch.part_maps)
    return dc.sum_(dc.reshape(diff, (len(batch), -1)), axis=-1) * (1.0 / (H * W))


_LABEL_CACHE: dict[bytes, np.ndarray] = {}


def _labels_for(skeleton, tris, sem) -> np.ndarray:
    key = skeleton.part_of_joint.tobytes()
    if key not in _LABEL_CACHE:
        _LABEL_CACHE[key] = Mesh(np.zeros((len(sem), 3)), tris, sem).triangle_labels
    return _LABEL_CACHE[key]


def evaluate(
    s: dc.Value,
    batch: ObservationBatch,
    skeleton: Skeleton,
    weights: LossWeights,
    cfg: RasterConfig,
    with_full: bool = False,
    with_part: bool | None = None,
) -> LossTerms:
    """All losses for a batch of states with one kinematics pass.

    The part term is skipped (reported as None) when ``lambda_b`` is 0,
    unless ``with_part`` forces it.
    """
    verts, joints = pose_vertices(skeleton, s)
    Lk = _keypoint_terms(joints, batch)
    n = skeleton.pose_dim + skeleton.shape_dim
    prior = dc.sum_(dc.square(s[:, :n]), axis=-1)
    do_part = weights.lambda_b > 0 if with_part is None else with_part
    Lb = _part_terms(verts, batch, skeleton, cfg) if do_part else None
    unit = Lk * weights.lambda_k + prior
    if Lb is not None:
        unit = unit + Lb * weights.lambda_b
    terms = LossTerms(Lk, Lb, prior, unit, joints, verts)
    if with_full:
        terms.full = _full_terms(joints, verts, batch, weights)
    return terms


def _full_terms(joints: dc.Value, verts: dc.Value, batch: ObservationBatch, weights: LossWeights) -> dc.Value:
    out = dc.Value(np.zeros(len(batch)))
    if batch.gt_vertices is not None and weights.lambda_m > 0:
        out = out + dc.mean(dc.norm(verts - batch.gt_vertices, axis=-1), axis=-1) * weights.lambda_m
    if batch.gt_joints is not None and weights.lambda_3d > 0:
        out = out + dc.mean(dc.norm(joints - batch.gt_joints, axis=-1), axis=-1) * weights.lambda_3d
    return out


# ---------------------------------------------------------------- single-sample API


def _scalar_or_batch(v: dc.Value, squeeze: bool, track: bool):
    if squeeze:
        v = dc.reshape(v, ())
    if track:
        return v
    return float(v.data) if squeeze else v.data


def keypoint_loss(state, obs, skeleton: Skeleton):
    track = isinstance(state, dc.Value)
    s, squeeze = as_state_value(state, skeleton)
    _, joints = pose_vertices(skeleton, s)
    return _scalar_or_batch(_keypoint_terms(joints, _as_batch(obs)), squeeze, track)


def part_loss(state, obs, skeleton: Skeleton, cfg: RasterConfig):
    track = isinstance(state, dc.Value)
    s, squeeze = as_state_value(state, skeleton)
    verts, _ = pose_vertices(skeleton, s)
    return _scalar_or_batch(_part_terms(verts, _as_batch(obs), skeleton, cfg), squeeze, track)


def part_map_loss(rendered, target) -> float:
    """Mean over pixels of the per-pixel L1 distance across all channels."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise dc.ShapeError("part_loss", f"extent mismatch {rendered.shape} vs {target.shape}")
    return float(np.abs(rendered - target).sum() / (rendered.shape[0] * rendered.shape[1]))


def unit_loss(state, obs, skeleton: Skeleton, weights: LossWeights, cfg: RasterConfig):
    """(L_u, breakdown) where breakdown holds the weighted terms and the total."""
    track = isinstance(state, dc.Value)
    s, squeeze = as_state_value(state, skeleton)
    terms = evaluate(s, _as_batch(obs), skeleton, weights, cfg)
    return _scalar_or_batch(terms.unit, squeeze, track), terms.breakdown(weights)


def fs_loss(state, obs, skeleton: Skeleton, weights: LossWeights):
    track = isinstance(state, dc.Value)
    s, squeeze = as_state_value(state, skeleton)
    verts, joints = pose_vertices(skeleton, s)
    out = _full_terms(joints, verts, _as_batch(obs), weights)
    return _scalar_or_batch(out, squeeze, track)


__all__ = [
    "RasterConfig", "LossWeights", "Observation", "ObservationBatch", "LossTerms",
    "soft_rasterize", "hard_rasterize", "keypoint_loss", "part_loss", "unit_loss", "fs_loss",
    "evaluate", "ModelState",
]
