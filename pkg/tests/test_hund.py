import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from neural_descent import diffcore as dc
from neural_descent.bodymodel import ModelState
from neural_descent.dataset import generate_dataset
from neural_descent.hund import (
    CheckpointError, Memory, RefinerParams, TrainConfig, adaptive_avg_pool, batch_objective, encode_context,
    feature_length, featurize, load_checkpoint, meta_loss, refine_step, refiner_shape_for, save_checkpoint, train,
    unroll, zero_memory,
)
from neural_descent.renderloss import LossWeights, Observation, ObservationBatch, RasterConfig

from helpers import CROP_C

TINY = dict(context_dim=4, encoder_hidden=8, hidden=8)


@pytest.fixture(scope="module")
def tiny_set():
    return generate_dataset(4, seed=3, pose_scale=0.2, raster_size=4)


def _perturbed(params, seed, scale=0.05):
    rng = np.random.default_rng(seed)
    out = params.copy()
    for k, v in out.arrays.items():
        out.arrays[k] = v + rng.uniform(-scale, scale, v.shape)
    return out


def test_feature_examples():
    assert feature_length(17, 15) == 1079
    obs = Observation(np.zeros((17, 2)), np.zeros(17), np.zeros((16, 16, 16)), CROP_C, 480)
    f = featurize(obs)
    assert f.shape == (1079,)
    assert np.all(f[:34] == -1.0) and np.all(f[34:1075] == 0.0)
    np.testing.assert_allclose(f[-4:], CROP_C.as_array() / 480)
    np.testing.assert_array_equal(adaptive_avg_pool(np.ones((12, 20, 3))), np.ones((8, 8, 3)))


def test_adaptive_pool_means(rng):
    x = rng.random((16, 16, 2))
    np.testing.assert_allclose(adaptive_avg_pool(x), x.reshape(8, 2, 8, 2, 2).mean(axis=(1, 3)))


def test_zero_weights_initial_state(small_dataset, skeleton):
    shape = refiner_shape_for(skeleton, TrainConfig())
    sc, s0 = encode_context(small_dataset.observations[0], RefinerParams.zeros(shape))
    assert np.all(sc == 0)
    assert np.all(s0.theta == 0) and np.all(s0.beta == 0)
    assert s0.t[2] == pytest.approx(np.log(2.0) + 1.0, abs=1e-15)
    assert s0.t[2] == pytest.approx(1.693, abs=1e-3)


def test_encoder_deterministic_and_differentiable(tiny_set, skeleton):
    params = _perturbed(RefinerParams.init(refiner_shape_for(skeleton, TrainConfig(**TINY), 17), 0), 1)
    obs = tiny_set.observations[0]
    a, b = encode_context(obs, params), encode_context(obs, params)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1].to_vector(), b[1].to_vector())
    for name in ("init_w", "enc_w2"):
        def f(w):
            P = params.values()
            P[name] = w
            return dc.sum_(encode_context(ObservationBatch.stack([obs]), P)[1][:, [0, 5, 60]])
        assert dc.check_gradient(f, params.arrays[name]) < 1e-4


def test_refine_step_examples(skeleton, rng):
    params = RefinerParams.init(refiner_shape_for(skeleton, TrainConfig()), 0)
    s = rng.standard_normal((2, 61))
    sc = rng.standard_normal((2, 128))
    m = Memory(dc.Value(rng.standard_normal((2, 256))), dc.Value(rng.standard_normal((2, 256))))
    s1, m1 = refine_step(s, m, np.array([3.0, 7.0]), sc, params)
    np.testing.assert_array_equal(s1.data, s)
    assert not np.allclose(m1.hidden.data, m.hidden.data)
    s2, m2 = refine_step(s, m, np.array([3.0, 7.0]), sc, params)
    assert np.array_equal(s1.data, s2.data) and np.array_equal(m1.cell.data, m2.cell.data)


def test_unroll_examples(small_dataset, skeleton, raster16):
    params = RefinerParams.init(refiner_shape_for(skeleton, TrainConfig()), 0)
    tr = unroll(small_dataset.observations[0], params, 5, cfg=raster16)
    assert len(tr.states) == 6 and len(tr.stage_losses) == 5 and tr.eval_count == 6
    assert all(np.array_equal(s, tr.states[0]) for s in tr.states)
    assert len(set(tr.stage_losses + [tr.initial_loss["total"]])) == 1
    before = small_dataset.observations[0].part_map.copy()
    unroll(ObservationBatch.stack(small_dataset.observations), _perturbed(params, 2, 0.01), 3, cfg=raster16)
    assert np.array_equal(before, small_dataset.observations[0].part_map)


def test_batched_unroll_matches_single(small_dataset, skeleton, raster16):
    params = _perturbed(RefinerParams.init(refiner_shape_for(skeleton, TrainConfig()), 0), 4, 0.01)
    many = unroll(ObservationBatch.stack(small_dataset.observations[:3]), params, 3, cfg=raster16)
    for obs, tr in zip(small_dataset.observations[:3], many):
        one = unroll(obs, params, 3, cfg=raster16)
        np.testing.assert_allclose(one.states[-1], tr.states[-1], rtol=1e-12, atol=1e-12)


def test_unroll_truncates_behind_camera(small_dataset, skeleton, raster16):
    params = RefinerParams.init(refiner_shape_for(skeleton, TrainConfig()), 0)
    params.arrays["out_b"][-1] = -1.5  # every step moves the body 1.5 m towards the camera
    tr = unroll(small_dataset.observations[0], params, 5, cfg=raster16)
    assert tr.truncated and len(tr.states) < 6


def test_meta_loss_table():
    L = [5.0, 4.0, 6.0, 3.0]
    assert [meta_loss(L, k) for k in ("sum", "last", "min", "max", "oi")] == [18.0, 3.0, 3.0, 6.0, -2.0]
    assert meta_loss([7.0], "oi") == 0.0
    with pytest.raises(ValueError):
        meta_loss([], "sum")
    with pytest.raises(ValueError):
        meta_loss(L, "median")


seqs = st.lists(st.floats(0, 1e3, allow_nan=False), min_size=1, max_size=8)


@settings(max_examples=300, deadline=None)
@given(seqs)
def test_meta_loss_properties(L):
    oi = meta_loss(L, "oi")
    assert oi <= 0
    running = np.minimum.accumulate(L)
    assert (oi == 0) == bool(np.all(np.asarray(L[1:]) >= running[:-1]))
    assert meta_loss(L, "min") <= meta_loss(L, "last") <= meta_loss(L, "max")
    dec = sorted(L, reverse=True)
    assert meta_loss(dec, "oi") == pytest.approx(dec[-1] - dec[0], abs=1e-9)


def test_meta_loss_gradients(rng):
    for kind in ("sum", "last", "min", "max", "oi"):
        for _ in range(5):
            L = rng.uniform(0, 10, (3, 5))
            assert dc.check_gradient(lambda x: dc.sum_(meta_loss(x, kind)), L) < 1e-4


def test_gradient_flow_tiny(tiny_set, skeleton):
    """Meta-loss gradient w.r.t. all parameters against finite differences along random directions."""
    cfg = RasterConfig(H=4, W=4, sigma=1.0)
    config = TrainConfig(M=2, **TINY)
    params = _perturbed(RefinerParams.init(refiner_shape_for(skeleton, config, 17), 0), 5, 0.02)
    batch = ObservationBatch.stack(tiny_set.observations)
    rng = np.random.default_rng(0)
    dirs = {k: rng.standard_normal((12,) + v.shape) * 0.01 for k, v in params.arrays.items()}

    for kind in ("last", "sum"):
        cfg_k = TrainConfig(M=2, meta_loss_kind=kind, **TINY)

        def f(alpha):
            P = {k: v + dc.sum_(dc.reshape(alpha, (12,) + (1,) * v.ndim) * dirs[k], axis=0) for k, v in params.values().items()}
            return batch_objective(batch, P, cfg_k, skeleton, LossWeights(), cfg, supervised=False)

        assert dc.check_gradient(f, np.zeros(12)) < 1e-3


def test_lr_zero_leaves_params(tiny_set, skeleton):
    cfg = RasterConfig(H=4, W=4)
    config = TrainConfig(learning_rate=0.0, max_steps=3, batch_size=4, **TINY)
    init = RefinerParams.init(refiner_shape_for(skeleton, config, 17), 9)
    params, log = train(tiny_set.observations, config, cfg=cfg, init=init)
    assert params.allclose(init)
    assert len(log.rows) == 3 and len(set(log.meta_losses)) == 1


def test_constant_objective_has_zero_gradient(tiny_set, skeleton):
    cfg = RasterConfig(H=4, W=4)
    config = TrainConfig(learning_rate=1e-2, max_steps=2, batch_size=2, **TINY)
    init = RefinerParams.init(refiner_shape_for(skeleton, config, 17), 9)
    init.arrays["init_w"][:, :52] = 0.0  # zero pose/shape outputs keep the prior at 0
    P = init.values(requires_grad=True)
    obj = batch_objective(ObservationBatch.stack(tiny_set.observations), P, config, skeleton, LossWeights(0.0, 0.0), cfg, False)
    grads = dc.gradient(obj, list(P.values()))
    assert all(np.all(g == 0) for g in grads)
    params, _ = train(tiny_set.observations, config, LossWeights(0.0, 0.0), cfg, init=init)
    assert params.allclose(init)


def test_training_deterministic(tiny_set, skeleton):
    cfg = RasterConfig(H=4, W=4)
    config = TrainConfig(learning_rate=1e-3, max_steps=4, batch_size=2, regime="fs+ss", **TINY)
    a, la = train(tiny_set.observations, config, cfg=cfg)
    b, lb = train(tiny_set.observations, config, cfg=cfg)
    assert la.to_csv() == lb.to_csv()
    assert a.allclose(b)
    assert [r["regime"] for r in la.rows] == ["ss", "fs", "ss", "fs"]


def test_fs_regime_needs_ground_truth(tiny_set):
    bare = [Observation(o.keypoints2d, o.confidences, o.part_map, o.crop_intrinsics, o.crop_size) for o in tiny_set.observations]
    with pytest.raises(ValueError, match="ground truth"):
        train(bare, TrainConfig(regime="fs", max_steps=1, **TINY), cfg=RasterConfig(H=4, W=4))


def test_invalid_train_config():
    with pytest.raises(ValueError):
        TrainConfig(M=0)
    with pytest.raises(ValueError):
        TrainConfig(meta_loss_kind="median")
    with pytest.raises(ValueError):
        TrainConfig(regime="rl")


def test_checkpoint_round_trip(tmp_path, skeleton):
    params = _perturbed(RefinerParams.init(refiner_shape_for(skeleton, TrainConfig(**TINY)), 0), 3)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params, skeleton, 5, 17, extra={"note": 1})
    back, header = load_checkpoint(path, expect={"M": 5, "N_j": 17})
    assert all(np.array_equal(back.arrays[k], params.arrays[k]) for k in params.arrays)
    assert header["N_p"] == 48 and header["N_s"] == 4 and header["P"] == 15 and header["d_c"] == 4
    with pytest.raises(CheckpointError):
        load_checkpoint(path, expect={"N_j": 14})
    raw = path.read_bytes()
    (tmp_path / "short.ckpt").write_bytes(raw[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "short.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"hello world")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.ckpt")


@pytest.mark.slow
def test_toy_training_halves_meta_loss(skeleton):
    data = generate_dataset(64, seed=21, pose_scale=0.2, raster_size=16)
    config = TrainConfig(learning_rate=1e-3, max_steps=500, seed=0)
    _, log = train(data.observations, config, cfg=RasterConfig(H=16, W=16))
    first = log.meta_losses[0]
    final = float(np.mean(log.meta_losses[-20:]))
    assert final <= 0.5 * first
