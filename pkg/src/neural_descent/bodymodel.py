"""Articulated prism body: kinematic tree, linear bone-length shape space,
6D global rotation, rigid per-bone prism mesh and Gaussian priors.

State vectors are laid out as ``[theta (3(J-1)), beta (N_s), r (6), t (3)]``.
The differentiable entry points accept a :class:`ModelState`, a numpy vector,
or a :class:`~neural_descent.diffcore.Value` of shape (D,) or (B, D).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc

JOINT_NAMES = (
    "pelvis", "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle",
    "spine", "thorax", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow", "r_wrist",
)
PARENTS = (0, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15)

# camera-aligned body frame: +x to the image right (subject's left), +y down,
# +z away from the camera; arms hang 45 degrees below horizontal
REST_OFFSETS = (
    (0.0, 0.0, 0.0),
    (-0.10, 0.05, 0.0),
    (0.0, 0.42, 0.02),
    (0.0, 0.42, -0.02),
    (0.10, 0.05, 0.0),
    (0.0, 0.42, 0.02),
    (0.0, 0.42, -0.02),
    (0.0, -0.24, 0.0),
    (0.0, -0.24, -0.02),
    (0.0, -0.10, 0.0),
    (0.0, -0.14, 0.0),
    (0.17, 0.0, 0.0),
    (0.20, 0.20, 0.0),
    (0.18, 0.18, 0.0),
    (-0.17, 0.0, 0.0),
    (-0.20, 0.20, 0.0),
    (-0.18, 0.18, 0.0),
)

PART_NAMES = (
    "torso", "neck", "head",
    "l_shoulder", "l_upper_arm", "l_forearm",
    "r_shoulder", "r_upper_arm", "r_forearm",
    "l_hip", "l_thigh", "l_calf",
    "r_hip", "r_thigh", "r_calf",
)
# part label of the bone ending at each joint; the root carries no bone
PART_OF_JOINT = (0, 12, 13, 14, 9, 10, 11, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8)
# prism side length as a fraction of bone length
GIRTH = (0.0, 0.8, 0.28, 0.22, 0.8, 0.28, 0.22, 1.0, 1.0, 0.8, 1.0, 0.5, 0.35, 0.28, 0.5, 0.35, 0.28)

NUM_PARTS = 15
SHAPE_DIM = 4
SHAPE_SEED = 20201221
IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
DEGENERATE_TOL = 1e-9

# 8 corners of a unit prism along +a with square cross-section in the (u, v) plane
_CORNER_AXIAL = np.array([0, 0, 0, 0, 1, 1, 1, 1], dtype=np.float64)
_CORNER_U = np.array([-1, 1, 1, -1, -1, 1, 1, -1], dtype=np.float64) * 0.5
_CORNER_V = np.array([-1, -1, 1, 1, -1, -1, 1, 1], dtype=np.float64) * 0.5
PRISM_TRIANGLES = np.array(
    [
        [0, 2, 1], [0, 3, 2],  # near cap
        [4, 5, 6], [4, 6, 7],  # far cap
        [0, 1, 5], [0, 5, 4],
        [1, 2, 6], [1, 6, 5],
        [2, 3, 7], [2, 7, 6],
        [3, 0, 4], [3, 4, 7],
    ],
    dtype=np.int64,
)


def make_shape_basis(num_joints: int, dim: int, seed: int) -> np.ndarray:
    """Random J x N_s matrix with orthonormal columns; deterministic in seed."""
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((num_joints, dim)))
    return q * np.sign(np.diag(r))


@dataclass(frozen=True, eq=False)
class Skeleton:
    parents: np.ndarray
    rest_offsets: np.ndarray
    part_of_joint: np.ndarray
    girth: np.ndarray
    shape_basis: np.ndarray
    shape_seed: int = SHAPE_SEED
    num_parts: int = NUM_PARTS

    def __post_init__(self):
        J = len(self.parents)
        if self.parents[0] != 0 or any(not (0 <= p < j) for j, p in enumerate(self.parents) if j > 0):
            raise ValueError("parents must form a tree rooted at joint 0 with parents preceding children")
        if self.rest_offsets.shape != (J, 3):
            raise ValueError("rest_offsets must be J x 3")
        if np.any(np.linalg.norm(self.rest_offsets[1:], axis=1) <= 0):
            raise ValueError("non-root rest offsets must be nonzero")
        if self.shape_basis.shape[0] != J:
            raise ValueError("shape basis must have one row per joint")

    @property
    def num_joints(self) -> int:
        return len(self.parents)

    @property
    def pose_dim(self) -> int:
        return 3 * (self.num_joints - 1)

    @property
    def shape_dim(self) -> int:
        return self.shape_basis.shape[1]

    @property
    def state_dim(self) -> int:
        return self.pose_dim + self.shape_dim + 9

    @property
    def num_vertices(self) -> int:
        return 8 * (self.num_joints - 1)

    def rest_joints(self) -> np.ndarray:
        """Accumulated rest offsets (the A-pose at the origin)."""
        out = np.zeros((self.num_joints, 3))
        for j in range(self.num_joints):
            out[j] = self.rest_offsets[j] + (out[self.parents[j]] if j else 0.0)
        return out

    def to_dict(self) -> dict:
        return {
            "parents": [int(p) for p in self.parents],
            "rest_offsets": self.rest_offsets.tolist(),
            "part_of_joint": [int(p) for p in self.part_of_joint],
            "girth": self.girth.tolist(),
            "shape_dim": self.shape_dim,
            "shape_seed": int(self.shape_seed),
            "num_parts": int(self.num_parts),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Skeleton":
        parents = np.array(d["parents"], dtype=np.int64)
        return cls(
            parents=parents,
            rest_offsets=np.array(d["rest_offsets"], dtype=np.float64),
            part_of_joint=np.array(d["part_of_joint"], dtype=np.int64),
            girth=np.array(d["girth"], dtype=np.float64),
            shape_basis=make_shape_basis(len(parents), int(d["shape_dim"]), int(d["shape_seed"])),
            shape_seed=int(d["shape_seed"]),
            num_parts=int(d["num_parts"]),
        )


def default_skeleton(shape_dim: int = SHAPE_DIM, shape_seed: int = SHAPE_SEED) -> Skeleton:
    J = len(PARENTS)
    return Skeleton(
        parents=np.array(PARENTS, dtype=np.int64),
        rest_offsets=np.array(REST_OFFSETS, dtype=np.float64),
        part_of_joint=np.array(PART_OF_JOINT, dtype=np.int64),
        girth=np.array(GIRTH, dtype=np.float64),
        shape_basis=make_shape_basis(J, shape_dim, shape_seed),
        shape_seed=shape_seed,
    )


@dataclass
class ModelState:
    theta: np.ndarray
    beta: np.ndarray
    r: np.ndarray = field(default_factory=lambda: IDENTITY_6D.copy())
    t: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 3.0]))

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(-1)
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        self.r = np.asarray(self.r, dtype=np.float64).reshape(6)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.theta, self.beta, self.r, self.t])

    @classmethod
    def from_vector(cls, v, skeleton: Skeleton) -> "ModelState":
        v = np.asarray(v, dtype=np.float64)
        p, s = skeleton.pose_dim, skeleton.shape_dim
        return cls(v[:p].copy(), v[p : p + s].copy(), v[p + s : p + s + 6].copy(), v[p + s + 6 : p + s + 9].copy())

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.to_vector())))


def a_pose(skeleton: Skeleton, t=(0.0, 0.0, 3.0)) -> ModelState:
    return ModelState(np.zeros(skeleton.pose_dim), np.zeros(skeleton.shape_dim), IDENTITY_6D.copy(), np.array(t, float))


def as_state_value(state, skeleton: Skeleton) -> tuple[dc.Value, bool]:
    """Coerce to a (B, D) Value; the flag says whether a batch axis was added."""
    if isinstance(state, ModelState):
        state = state.to_vector()
    v = dc.as_value(state)
    if v.shape[-1] != skeleton.state_dim:
        raise dc.ShapeError("state", f"expected trailing dimension {skeleton.state_dim}, got {v.shape}")
    if v.ndim == 1:
        return dc.reshape(v, (1, -1)), True
    return v, False


def split_state(s: dc.Value, skeleton: Skeleton):
    """(B, D) -> theta (B, J-1, 3), beta (B, N_s), r (B, 6), t (B, 3)."""
    p, n = skeleton.pose_dim, skeleton.shape_dim
    theta = dc.reshape(s[:, :p], (s.shape[0], skeleton.num_joints - 1, 3))
    return theta, s[:, p : p + n], s[:, p + n : p + n + 6], s[:, p + n + 6 : p + n + 9]


# ---------------------------------------------------------------- rotations


def rot6d_to_matrix(r):
    """Gram-Schmidt on the two 3-vectors of ``r`` (..., 6) -> (..., 3, 3).

    Columns are the orthonormalized first vector, the orthonormalized second
    vector and their cross product.  numpy in, numpy out.
    """
    track = isinstance(r, dc.Value)
    rv = dc.as_value(r)
    if rv.shape[-1] != 6:
        raise dc.ShapeError("rot6d_to_matrix", f"expected trailing dimension 6, got {rv.shape}")
    a1, a2 = rv[..., 0:3], rv[..., 3:6]
    n1 = np.linalg.norm(a1.data, axis=-1)
    if np.any(n1 <= DEGENERATE_TOL):
        raise ValueError("rot6d_to_matrix: first vector is zero")
    b1 = dc.normalize(a1)
    proj = dc.sum_(b1 * a2, axis=-1, keepdims=True)
    u2 = a2 - proj * b1
    if np.any(np.linalg.norm(u2.data, axis=-1) <= DEGENERATE_TOL):
        raise ValueError("rot6d_to_matrix: vectors are parallel")
    b2 = dc.normalize(u2)
    b3 = dc.cross(b1, b2)
    R = dc.stack([b1, b2, b3], axis=-1)
    return R if track else R.data


def matrix_to_rot6d(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def axis_angle_to_matrix(w: dc.Value) -> dc.Value:
    """Rodrigues formula (..., 3) -> (..., 3, 3), smooth through zero."""
    x, y, z = w[..., 0], w[..., 1], w[..., 2]
    zero = dc.Value(np.zeros(x.shape))
    K = dc.stack(
        [
            dc.stack([zero, -z, y], axis=-1),
            dc.stack([z, zero, -x], axis=-1),
            dc.stack([-y, x, zero], axis=-1),
        ],
        axis=-2,
    )
    a, b = dc.rodrigues_coefficients(dc.sum_(dc.square(w), axis=-1))
    eye = np.eye(3)
    a = dc.reshape(a, a.shape + (1, 1))
    b = dc.reshape(b, b.shape + (1, 1))
    return eye + a * K + b * (K @ K)


def random_rotation(rng: np.random.Generator, max_angle: float | None = None) -> np.ndarray:
    """Uniform rotation, or uniform axis with angle uniform in [0, max_angle]."""
    if max_angle is None:
        q = rng.standard_normal(4)
        q /= np.linalg.norm(q)
        w, x, y, z = q
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
                [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
                [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
            ]
        )
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    return axis_angle_to_matrix(dc.Value(axis * angle)).data


# ---------------------------------------------------------------- posing


def bone_scales(skeleton: Skeleton, beta):
    """exp(S beta) per joint; positive for every finite beta."""
    track = isinstance(beta, dc.Value)
    b = dc.as_value(beta)
    out = dc.exp(b @ skeleton.shape_basis.T)
    return out if track else out.data


def _forward_kinematics(skeleton: Skeleton, s: dc.Value):
    """Batched FK. Returns joints (B, J, 3), global rotations list, scales (B, J)."""
    theta, beta, r, t = split_state(s, skeleton)
    B = s.shape[0]
    R_root = rot6d_to_matrix(r)
    R_local = axis_angle_to_matrix(theta)  # (B, J-1, 3, 3)
    scales = bone_scales(skeleton, beta)  # (B, J)
    offsets = skeleton.rest_offsets
    G = [R_root]
    P = [dc.reshape(R_root @ offsets[0], (B, 3)) + t]
    for j in range(1, skeleton.num_joints):
        p = skeleton.parents[j]
        Gj = G[p] @ R_local[:, j - 1]
        bone = dc.reshape(scales[:, j : j + 1], (B, 1)) * offsets[j]  # (B, 3)
        step = dc.reshape(Gj @ dc.reshape(bone, (B, 3, 1)), (B, 3))
        G.append(Gj)
        P.append(P[p] + step)
    return dc.stack(P, axis=1), G, scales


def _maybe_unbatch(v: dc.Value, squeeze: bool, track: bool):
    if squeeze:
        v = dc.reshape(v, v.shape[1:])
    return v if track else v.data


def pose_joints(skeleton: Skeleton, state):
    """Camera-space joint positions, (J, 3) or (B, J, 3)."""
    track = isinstance(state, dc.Value)
    s, squeeze = as_state_value(state, skeleton)
    joints, _, _ = _forward_kinematics(skeleton, s)
    return _maybe_unbatch(joints, squeeze, track)


def _prism_frames(skeleton: Skeleton) -> np.ndarray:
    """Per-bone rest corners (J-1, 3, 8) relative to the parent joint."""
    corners = []
    for j in range(1, skeleton.num_joints):
        o = skeleton.rest_offsets[j]
        length = np.linalg.norm(o)
        a = o / length
        helper = np.array([0.0, 0.0, 1.0]) if abs(a[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        u = np.cross(a, helper)
        u /= np.linalg.norm(u)
        v = np.cross(a, u)
        g = skeleton.girth[j] * length
        c = np.outer(o, _CORNER_AXIAL) + g * (np.outer(u, _CORNER_U) + np.outer(v, _CORNER_V))
        corners.append(c)
    return np.stack(corners)


_PRISM_CACHE: dict[bytes, np.ndarray] = {}


def prism_rest_corners(skeleton: Skeleton) -> np.ndarray:
    key = skeleton.rest_offsets.tobytes() + skeleton.girth.tobytes()
    if key not in _PRISM_CACHE:
        _PRISM_CACHE[key] = _prism_frames(skeleton)
    return _PRISM_CACHE[key]


@dataclass
class Mesh:
    vertices: np.ndarray | dc.Value
    triangles: np.ndarray
    vertex_semantics: np.ndarray

    @property
    def triangle_labels(self) -> np.ndarray:
        """Majority vertex part label per triangle."""
        parts = np.argmax(self.vertex_semantics[:, :-1], axis=1)[self.triangles]
        out = np.empty(len(self.triangles), dtype=np.int64)
        for i, row in enumerate(parts):
            vals, counts = np.unique(row, return_counts=True)
            out[i] = vals[np.argmax(counts)]
        return out


def mesh_topology(skeleton: Skeleton) -> tuple[np.ndarray, np.ndarray]:
    """(triangles T x 3, vertex_semantics N_v x (P + 1)); one prism per bone."""
    nb = skeleton.num_joints - 1
    tris = np.concatenate([PRISM_TRIANGLES + 8 * b for b in range(nb)])
    sem = np.zeros((8 * nb, skeleton.num_parts + 1))
    for b in range(nb):
        sem[8 * b : 8 * b + 8, skeleton.part_of_joint[b + 1]] = 1.0
    sem[:, -1] = 1.0
    return tris, sem


def pose_vertices(skeleton: Skeleton, s: dc.Value) -> tuple[dc.Value, dc.Value]:
    """Batched (B, D) -> (vertices (B, N_v, 3), joints (B, J, 3))."""
    joints, G, scales = _forward_kinematics(skeleton, s)
    B = s.shape[0]
    corners = prism_rest_corners(skeleton)  # (J-1, 3, 8)
    G_bones = dc.stack(G[1:], axis=1)  # (B, J-1, 3, 3)
    scale = dc.reshape(scales[:, 1:], (B, skeleton.num_joints - 1, 1, 1))
    local = G_bones @ corners  # (B, J-1, 3, 8)
    parent_pos = joints[:, skeleton.parents[1:]]  # (B, J-1, 3)
    verts = dc.reshape(parent_pos, parent_pos.shape + (1,)) + scale * local
    verts = dc.reshape(dc.swapaxes(verts, -1, -2), (B, skeleton.num_vertices, 3))
    return verts, joints


def pose_mesh(skeleton: Skeleton, state) -> Mesh:
    track = isinstance(state, dc.Value)
    s, squeeze = as_state_value(state, skeleton)
    verts, _ = pose_vertices(skeleton, s)
    tris, sem = mesh_topology(skeleton)
    return Mesh(_maybe_unbatch(verts, squeeze, track), tris, sem)


# ---------------------------------------------------------------- priors and sampling


def prior_loss(state, skeleton: Skeleton | None = None):
    """||theta||^2 + ||beta||^2 per state; scalar for one state, (B,) for a batch."""
    if isinstance(state, ModelState):
        return float(state.theta @ state.theta + state.beta @ state.beta)
    skeleton = skeleton or default_skeleton()
    track = isinstance(state, dc.Value)
    s, squeeze = as_state_value(state, skeleton)
    n = skeleton.pose_dim + skeleton.shape_dim
    out = dc.sum_(dc.square(s[:, :n]), axis=-1)
    if squeeze:
        out = dc.reshape(out, ())
    return out if track else out.data


def sample_state(
    seed,
    pose_scale: float,
    shape_scale: float,
    t_range=((-0.5, 0.5), (-0.5, 0.5), (2.0, 6.0)),
    skeleton: Skeleton | None = None,
    rot_max_angle: float | None = 0.6,
) -> ModelState:
    """Draw a state from the Gaussian priors with a random rigid placement.

    ``rot_max_angle=None`` samples the global rotation uniformly on SO(3);
    the default keeps bodies roughly upright and facing the camera.
    """
    if pose_scale < 0 or shape_scale < 0:
        raise ValueError("prior scales must be nonnegative")
    skeleton = skeleton or default_skeleton()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    theta = rng.standard_normal(skeleton.pose_dim) * pose_scale
    beta = rng.standard_normal(skeleton.shape_dim) * shape_scale
    R = random_rotation(rng, rot_max_angle)
    lo = np.array([r[0] for r in t_range])
    hi = np.array([r[1] for r in t_range])
    t = lo + (hi - lo) * rng.random(3)
    return ModelState(theta, beta, matrix_to_rot6d(R), t)
