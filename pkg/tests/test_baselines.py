import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from neural_descent.baselines import (
    CountingObjective, a_pose_init, aligned_error, bfgs_minimize, fit_bfgs, fit_gd, fit_hybrid, gd, hund_trace,
    metrics, procrustes_align, state_joints, unit_objective,
)
from neural_descent.bodymodel import random_rotation
from neural_descent.camera import BehindCameraError
from neural_descent.dataset import generate_dataset
from neural_descent.hund import RefinerParams, TrainConfig, refiner_shape_for
from neural_descent.renderloss import LossWeights, RasterConfig

RZ90 = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


def quadratic(A, b):
    return lambda x: (0.5 * x @ A @ x - b @ x, A @ x - b)


def _nonincreasing(losses):
    """No accepted step raises the loss beyond floating-point rounding."""
    L = np.asarray(losses)
    return bool(np.all(np.diff(L) <= 8 * np.finfo(float).eps * np.abs(L[:-1])))


def rosenbrock(x):
    a, b = x
    f = (1 - a) ** 2 + 100 * (b - a * a) ** 2
    g = np.array([-2 * (1 - a) - 400 * a * (b - a * a), 200 * (b - a * a)])
    return f, g


def test_bfgs_convex_quadratic(rng):
    iters = []
    for _ in range(20):
        Q = rng.standard_normal((8, 8))
        A = Q @ Q.T + 0.5 * np.eye(8)
        b = rng.standard_normal(8)
        tr = bfgs_minimize(quadratic(A, b), np.zeros(8), max_iters=50, grad_tol=1e-8)
        assert tr.reason == "gradient tolerance"
        assert np.max(np.abs(A @ tr.final_state - b)) < 1e-8
        iters.append(len(tr) - 1)
    assert max(iters) <= 20


def test_bfgs_rosenbrock():
    tr = bfgs_minimize(rosenbrock, np.array([-1.2, 1.0]), max_iters=200, grad_tol=1e-9)
    np.testing.assert_allclose(tr.final_state, [1.0, 1.0], atol=1e-6)


def test_bfgs_never_increases_and_counts_exactly(rng):
    calls = []

    def f(x):
        calls.append(1)
        return rosenbrock(x)

    tr = bfgs_minimize(f, np.array([-1.2, 1.0]), max_iters=50)
    assert _nonincreasing(tr.losses)
    assert tr.evals[-1] == len(calls)
    assert np.all(np.diff(tr.evals) > 0)


def test_bfgs_rejects_no_iterations():
    with pytest.raises(ValueError):
        bfgs_minimize(rosenbrock, np.zeros(2), max_iters=0)


def test_line_search_failure_reported():
    # a gradient that points the wrong way: no step can satisfy Armijo
    tr = bfgs_minimize(lambda x: (float(x @ x), -2 * x), np.ones(3), max_iters=5)
    assert tr.reason == "line search failed"
    assert len(tr) == 1


def test_failures_count_as_infinite_loss():
    def f(x):
        if x[0] > 0.5:
            raise BehindCameraError("behind")
        return float((x[0] - 1) ** 2), np.array([2 * (x[0] - 1)])

    obj = CountingObjective(f)
    assert obj(np.array([1.0]))[0] == math.inf
    tr = bfgs_minimize(obj, np.array([0.0]), max_iters=20)
    assert all(x[0] <= 0.5 for x in tr.iterates)
    assert _nonincreasing(tr.losses)


def test_gd_examples(rng):
    target = rng.standard_normal(4)
    fun = lambda x: (float(np.sum((x - target) ** 2)), 2 * (x - target))
    x0 = np.zeros(4)
    assert len(gd(fun, x0, 0, 0.1)) == 1
    for step in (0.1, 0.3, 0.7):
        tr = gd(fun, x0, 10, step)
        err = [np.linalg.norm(x - target) for x in tr.iterates]
        np.testing.assert_allclose(np.array(err[1:]) / err[:-1], abs(1 - 2 * step), rtol=1e-9)
    with pytest.raises(ValueError):
        gd(fun, x0, -1, 0.1)


def test_fit_gd_descends(small_dataset, raster16):
    obs = small_dataset.observations[0]
    assert len(fit_gd(obs, steps=0, cfg=raster16)) == 1
    for lb in (0.0, 1.0):
        tr = fit_gd(obs, steps=20, step_size=1e-4, weights=LossWeights(lambda_b=lb), cfg=raster16)
        assert np.all(np.diff(tr.losses) <= 0)
        assert tr.evals == list(range(1, 22))


def test_fit_bfgs_eval_counting(small_dataset, raster16):
    obs = small_dataset.observations[1]
    obj = unit_objective(obs, cfg=raster16)
    tr = bfgs_minimize(obj, a_pose_init(), max_iters=10)
    assert tr.evals[-1] == obj.count
    assert _nonincreasing(tr.losses)
    assert tr.breakdowns[-1]["total"] == tr.final_loss


def test_bfgs_from_ground_truth_stays():
    data = generate_dataset(3, seed=5, pose_scale=0.0, raster_size=16, shape_scale=0.0)
    for smp in data.samples:
        tr = fit_bfgs(smp.observation, smp.state, LossWeights(lambda_b=0.0), cfg=RasterConfig(H=16, W=16))
        assert tr.reason == "gradient tolerance" and len(tr) == 1
        assert metrics(state_joints(tr.final_state), smp.observation.gt_joints)[0] < 1e-6


def _params(skeleton, seed=0):
    params = RefinerParams.init(refiner_shape_for(skeleton, TrainConfig()), seed)
    rng = np.random.default_rng(seed)
    params.arrays["out_w"] = rng.uniform(-0.01, 0.01, params.arrays["out_w"].shape)
    return params


def test_hybrid_examples(small_dataset, skeleton, raster16):
    params = _params(skeleton)
    obs = small_dataset.observations[2]
    hund = hund_trace(obs, params, 5, cfg=raster16)
    assert hund.evals == [1, 2, 3, 4, 5, 6]
    same = fit_hybrid(obs, params, 5, max_iters=0, cfg=raster16)
    assert same.losses == hund.losses and same.evals == hund.evals
    zero = fit_hybrid(obs, params, 0, max_iters=5, cfg=raster16)
    direct = fit_bfgs(obs, hund.iterates[0], max_iters=5, cfg=raster16)
    assert zero.losses == direct.losses
    # the refiner's forward-only evaluation of s_0 is charged on top of BFGS's own
    assert zero.evals == [1] + [e + 1 for e in direct.evals[1:]]
    with pytest.raises(ValueError):
        fit_hybrid(obs, params, 6, cfg=raster16)


def test_hybrid_never_worse_than_refiner(small_dataset, skeleton, raster16):
    params = _params(skeleton, 3)
    for obs in small_dataset.observations[:4]:
        hund = hund_trace(obs, params, 5, cfg=raster16)
        hyb = fit_hybrid(obs, params, 5, max_iters=5, cfg=raster16)
        assert hyb.final_loss <= hund.final_loss + 1e-12
        assert hyb.evals[5] == 6 and hyb.evals[-1] > 6


def test_procrustes_examples(rng):
    X = rng.standard_normal((17, 3))
    s, R, t = procrustes_align(X, X)
    assert s == pytest.approx(1.0) and np.allclose(R, np.eye(3)) and np.allclose(t, 0, atol=1e-12)
    t0 = np.array([0.3, -1.0, 2.0])
    s, R, t = procrustes_align(X, 2 * X @ RZ90.T + t0)
    assert abs(s - 2) < 1e-9 and np.max(np.abs(R - RZ90)) < 1e-9 and np.max(np.abs(t - t0)) < 1e-9
    M = X * [-1, 1, 1]
    s, R, t = procrustes_align(X, M)
    assert np.linalg.det(R) == pytest.approx(1.0)
    assert np.sum((s * X @ R.T + t - M) ** 2) > 1e-3


def test_procrustes_degenerate_rejected():
    line = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        procrustes_align(line, line)
    with pytest.raises(ValueError):
        procrustes_align(np.ones((4, 3)), np.zeros((4, 3)))


def test_procrustes_residual_similarity_invariant(rng):
    for _ in range(20):
        X, Y = rng.standard_normal((2, 17, 3))
        Q, c, d = random_rotation(rng), rng.uniform(0.2, 5), rng.standard_normal(3)
        def resid(A):
            s, R, t = procrustes_align(A, Y)
            return np.sum((s * A @ R.T + t - Y) ** 2)
        assert resid(c * X @ Q.T + d) == pytest.approx(resid(X), rel=1e-9)


def test_metric_examples(rng):
    G = rng.standard_normal((17, 3))
    assert metrics(G, G) == (0.0, 0.0, 0.0)
    mp, pa, tr = metrics(G + [10.0, 0, 0], G)
    assert mp == pytest.approx(10.0) and tr == pytest.approx(10.0) and pa < 1e-9
    with pytest.raises(ValueError):
        metrics(G, G[:5])


def test_aligned_error_beats_least_squares(rng):
    for _ in range(50):
        X, Y = rng.standard_normal((2, 17, 3))
        s, R, t = procrustes_align(X, Y)
        ls = np.mean(np.linalg.norm(s * X @ R.T + t - Y, axis=1))
        assert aligned_error(X, Y) <= ls + 1e-12


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 2.0))
def test_pa_never_exceeds_mpjpe(seed, noise):
    r = np.random.default_rng(seed)
    G = r.standard_normal((17, 3))
    P = G + noise * r.standard_normal((17, 3))
    mp, pa, _ = metrics(P, G)
    assert pa <= mp
