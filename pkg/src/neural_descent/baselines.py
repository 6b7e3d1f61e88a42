"""Classical state optimizers over the unit loss, and pose-error metrics.

Costs are measured in loss/gradient evaluations: every call of the objective
(including line-search probes) counts once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .bodymodel import ModelState, Skeleton, a_pose, default_skeleton, pose_vertices
from .camera import BehindCameraError
from .renderloss import LossWeights, Observation, ObservationBatch, RasterConfig, evaluate

C1 = 1e-4
C2 = 0.9
MAX_BACKTRACKS = 30
CURVATURE_EPS = 1e-10
ROUNDING_ULPS = 8
EPS = float(np.finfo(np.float64).eps)
A_POSE_T = (0.0, 0.0, 3.0)


@dataclass
class OptimizerTrace:
    """Accepted iterates with their losses and cumulative evaluation counts."""

    iterates: list[np.ndarray] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    evals: list[int] = field(default_factory=list)
    breakdowns: list[dict | None] = field(default_factory=list)
    reason: str = ""

    def __len__(self) -> int:
        return len(self.iterates)

    def append(self, x, f, evals, info=None) -> None:
        self.iterates.append(np.array(x, dtype=np.float64))
        self.losses.append(float(f))
        self.evals.append(int(evals))
        self.breakdowns.append(info)

    @property
    def final_loss(self) -> float:
        return self.losses[-1]

    @property
    def final_state(self) -> np.ndarray:
        return self.iterates[-1]

    def evals_to_reach(self, target: float) -> int | None:
        """Evaluations spent when the loss first drops to ``target`` (None if never)."""
        for f, n in zip(self.losses, self.evals):
            if f <= target:
                return n
        return None


class CountingObjective:
    """Wraps ``fun(x) -> (f, g)`` and counts calls.

    Failures of the wrapped function (a state behind the camera, a degenerate
    rotation) and non-finite values are reported as f = inf.
    """

    def __init__(self, fun):
        self.fun = fun
        self.count = 0
        self.last_info = None

    def __call__(self, x: np.ndarray):
        self.count += 1
        self.last_info = None
        try:
            out = self.fun(x)
        except (BehindCameraError, FloatingPointError):
            return math.inf, np.full_like(x, np.nan)
        except ValueError as exc:
            if "rot6d" not in str(exc) and "non-finite" not in str(exc):
                raise
            return math.inf, np.full_like(x, np.nan)
        f, g = out[0], np.asarray(out[1], dtype=np.float64)
        if len(out) > 2:
            self.last_info = out[2]
        if not (math.isfinite(f) and np.all(np.isfinite(g))):
            return math.inf, g
        return float(f), g


def _counting(fun) -> CountingObjective:
    return fun if isinstance(fun, CountingObjective) else CountingObjective(fun)


def gd(fun, x0, steps: int, step_size: float) -> OptimizerTrace:
    """Fixed-step gradient descent; records every iterate."""
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    obj = _counting(fun)
    x = np.array(x0, dtype=np.float64)
    trace = OptimizerTrace()
    f, g = obj(x)
    if not math.isfinite(f):
        trace.append(x, f, obj.count, obj.last_info)
        trace.reason = "non-finite loss"
        return trace
    trace.append(x, f, obj.count, obj.last_info)
    for _ in range(steps):
        x_new = x - step_size * g
        f_new, g_new = obj(x_new)
        if not math.isfinite(f_new):
            trace.reason = "non-finite loss"
            return trace
        x, f, g = x_new, f_new, g_new
        trace.append(x, f, obj.count, obj.last_info)
    trace.reason = "max iterations"
    return trace


def _approx_wolfe(f, f_new, slope, g_new, p) -> bool:
    """Sufficient decrease read off the slope once f differences drown in rounding.

    f may rise by at most a few ulps here.
    """
    scale = max(abs(f), 1e-300)
    if not (abs(f - f_new) <= 1e-12 * scale and f_new <= f + ROUNDING_ULPS * EPS * scale):
        return False
    return C2 * slope <= float(g_new @ p) <= (2.0 * C1 - 1.0) * slope


def _wolfe_search(obj, x, f, g, p, alpha):
    """Bisection search for a step meeting the weak Wolfe conditions.

    Returns (alpha, f_new, g_new, info) or None after MAX_BACKTRACKS trials.
    """
    slope = float(g @ p)
    lo, hi = 0.0, math.inf
    for _ in range(MAX_BACKTRACKS):
        f_new, g_new = obj(x + alpha * p)
        if not (f_new <= f + C1 * alpha * slope or _approx_wolfe(f, f_new, slope, g_new, p)):
            hi = alpha
        elif float(g_new @ p) < C2 * slope:
            lo = alpha
        else:
            return alpha, f_new, g_new, obj.last_info
        alpha = 0.5 * (lo + hi) if math.isfinite(hi) else 2.0 * lo
    return None


def bfgs_minimize(fun, x0, max_iters: int = 100, grad_tol: float = 1e-6) -> OptimizerTrace:
    """Dense-inverse-Hessian BFGS with a weak Wolfe line search.

    The first trial step has unit length in x; later trials start at 1.  The
    inverse Hessian starts at the identity and updates with s'y <= CURVATURE_EPS
    are skipped.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be at least 1")
    obj = _counting(fun)
    x = np.array(x0, dtype=np.float64)
    n = x.size
    trace = OptimizerTrace()
    f, g = obj(x)
    trace.append(x, f, obj.count, obj.last_info)
    if not math.isfinite(f):
        trace.reason = "non-finite loss"
        return trace
    Hinv = np.eye(n)
    first = True
    for _ in range(max_iters):
        if np.max(np.abs(g)) < grad_tol:
            trace.reason = "gradient tolerance"
            return trace
        p = -Hinv @ g
        if not float(g @ p) < 0:
            Hinv = np.eye(n)
            p = -g
        alpha = min(1.0, 1.0 / np.linalg.norm(p)) if first else 1.0
        found = _wolfe_search(obj, x, f, g, p, alpha)
        if found is None:
            trace.reason = "line search failed"
            return trace
        alpha, f_new, g_new, info = found
        s = alpha * p
        y = g_new - g
        sy = float(s @ y)
        if sy > CURVATURE_EPS:
            rho = 1.0 / sy
            Hy = Hinv @ y
            Hinv = Hinv + (rho * rho * float(y @ Hy) + rho) * np.outer(s, s) - rho * (np.outer(Hy, s) + np.outer(s, Hy))
        first = False
        x, f, g = x + s, f_new, g_new
        trace.append(x, f, obj.count, info)
    trace.reason = "gradient tolerance" if np.max(np.abs(g)) < grad_tol else "max iterations"
    return trace


# ---------------------------------------------------------------- fitting the body model


def unit_objective(
    obs: Observation,
    skeleton: Skeleton | None = None,
    weights: LossWeights | None = None,
    cfg: RasterConfig | None = None,
) -> CountingObjective:
    """Counting objective for L_u on one observation, with the loss breakdown as info."""
    skeleton = skeleton or default_skeleton()
    weights = weights or LossWeights()
    cfg = cfg or RasterConfig()
    batch = ObservationBatch.stack([obs])

    def fun(x):
        s = dc.Value(np.asarray(x, dtype=np.float64)[None], requires_grad=True)
        terms = evaluate(s, batch, skeleton, weights, cfg)
        total = dc.sum_(terms.unit)
        (g,) = dc.gradient(total, [s])
        return float(total.data), g[0], terms.breakdown(weights)

    return CountingObjective(fun)


def a_pose_init(skeleton: Skeleton | None = None) -> np.ndarray:
    skeleton = skeleton or default_skeleton()
    return a_pose(skeleton, t=A_POSE_T).to_vector()


def _state_vector(s_init, skeleton: Skeleton) -> np.ndarray:
    if s_init is None:
        return a_pose_init(skeleton)
    if isinstance(s_init, ModelState):
        return s_init.to_vector()
    return np.asarray(s_init, dtype=np.float64)


def fit_gd(obs, s_init=None, weights=None, steps: int = 100, step_size: float = 1e-4, skeleton=None, cfg=None) -> OptimizerTrace:
    skeleton = skeleton or default_skeleton()
    return gd(unit_objective(obs, skeleton, weights, cfg), _state_vector(s_init, skeleton), steps, step_size)


def fit_bfgs(obs, s_init=None, weights=None, max_iters: int = 100, grad_tol: float = 1e-6, skeleton=None, cfg=None) -> OptimizerTrace:
    skeleton = skeleton or default_skeleton()
    return bfgs_minimize(unit_objective(obs, skeleton, weights, cfg), _state_vector(s_init, skeleton), max_iters, grad_tol)


def hund_trace(obs, params, M: int = 5, weights=None, skeleton=None, cfg=None) -> OptimizerTrace:
    """The refiner's trajectory as a trace: state s_k costs k + 1 evaluations."""
    from .hund import unroll

    traj = unroll(obs, params, M, weights, cfg, skeleton)
    trace = OptimizerTrace(reason="truncated" if traj.truncated else "stages")
    for k, (x, info) in enumerate(zip(traj.states, traj.all_losses)):
        trace.append(x, info["total"], k + 1, info)
    return trace


def fit_hybrid(
    obs,
    params,
    i: int,
    weights=None,
    max_iters: int = 100,
    grad_tol: float = 1e-6,
    M: int = 5,
    skeleton=None,
    cfg=None,
) -> OptimizerTrace:
    """``i`` refiner stages, then BFGS from s_i.  max_iters = 0 skips BFGS."""
    if not 0 <= i <= M:
        raise ValueError(f"stage count must lie in [0, {M}], got {i}")
    skeleton = skeleton or default_skeleton()
    head = hund_trace(obs, params, M, weights, skeleton, cfg)
    n = min(i + 1, len(head))
    trace = OptimizerTrace(head.iterates[:n], head.losses[:n], head.evals[:n], head.breakdowns[:n])
    if max_iters == 0:
        trace.reason = "stages"
        return trace
    tail = fit_bfgs(obs, trace.iterates[-1], weights, max_iters, grad_tol, skeleton, cfg)
    base = trace.evals[-1]
    for x, f, e, info in zip(tail.iterates[1:], tail.losses[1:], tail.evals[1:], tail.breakdowns[1:]):
        trace.append(x, f, base + e, info)
    trace.reason = tail.reason
    return trace


# ---------------------------------------------------------------- metrics


def procrustes_align(X, Y, weights=None) -> tuple[float, np.ndarray, np.ndarray]:
    """Similarity (scale, R, t) minimizing sum_i w_i ||scale * R @ x_i + t - y_i||^2.

    R is a proper rotation (det +1).  Unit weights by default.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape != Y.shape or X.ndim != 2 or X.shape[1] != 3:
        raise ValueError(f"expected matching (N, 3) point sets, got {X.shape} and {Y.shape}")
    if len(X) < 3:
        raise ValueError("need at least 3 points")
    w = np.ones(len(X)) if weights is None else np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    mx, my = w @ X, w @ Y
    Xc, Yc = X - mx, Y - my
    sv = np.linalg.svd(Xc * np.sqrt(w)[:, None], compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-12 * sv[0]:
        raise ValueError("degenerate source points: rank < 2 after centering")
    var_x = float(np.sum(w[:, None] * Xc * Xc))
    U, D, Vt = np.linalg.svd((Yc * w[:, None]).T @ Xc)
    S = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2] = -1.0
    R = (U * S) @ Vt
    scale = float(np.sum(D * S) / var_x)
    t = my - scale * R @ mx
    return scale, R, t


def _apply(T, X):
    scale, R, t = T
    return scale * X @ R.T + t


def _mean_dist(A, B) -> float:
    return float(np.mean(np.linalg.norm(A - B, axis=1)))


def aligned_error(X, Y, iters: int = 10) -> float:
    """Mean point distance after the similarity transform that minimizes it.

    Iteratively reweighted Procrustes (weights 1 / residual), run from the
    identity and from the least-squares fit; the best iterate is returned, so
    the result never exceeds the unaligned error.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    ls = procrustes_align(X, Y)
    best = _mean_dist(X, Y)
    for start in (X, _apply(ls, X)):
        cur = start
        prev = math.inf
        for _ in range(iters):
            e = _mean_dist(cur, Y)
            best = min(best, e)
            if e == 0.0 or e > prev - 1e-10 * prev:
                break
            prev = e
            r = np.linalg.norm(cur - Y, axis=1) / e
            w = 1.0 / np.maximum(r, 1e-12)
            cur = _apply(procrustes_align(X, Y, w), X)
    return best


def metrics(pred_joints, gt_joints, root: int = 0) -> tuple[float, float, float]:
    """(mpjpe, mpjpe_pa, mpjpe_trans) in the input units."""
    P = np.asarray(pred_joints, dtype=np.float64)
    G = np.asarray(gt_joints, dtype=np.float64)
    if P.shape != G.shape:
        raise ValueError(f"joint sets differ in shape: {P.shape} vs {G.shape}")
    mpjpe = _mean_dist(P, G)
    mpjpe_pa = aligned_error(P, G)
    trans = float(np.linalg.norm(P[root] - G[root]))
    return mpjpe, mpjpe_pa, trans


def state_joints(x, skeleton: Skeleton | None = None) -> np.ndarray:
    skeleton = skeleton or default_skeleton()
    _, joints = pose_vertices(skeleton, dc.Value(np.asarray(x, dtype=np.float64)[None]))
    return joints.data[0]
