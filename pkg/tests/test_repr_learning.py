"""Metric learning: loss, analytic gradients, EMA, training, checkpoints."""

import numpy as np
import pytest

import oracles
from patchbank import repr_learning as rl
from patchbank.errors import (ConfigError, CorruptPayload, DimMismatch,
                              EmptyDataset, GammaOutOfRange, KOutOfRange,
                              ShapeMismatch, VersionMismatch)
from patchbank.kernels import pairwise_sqdist
from patchbank.similarity import SimilarityConfig


def _model(seed=0, in_dim=4, d_f=3, d_g=3):
    return rl.init_model(in_dim, d_f, d_g, np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def test_forward_shapes_and_chain():
    m = _model()
    p = np.random.default_rng(1).normal(size=(6, 4))
    z_f = rl.forward_f(m, p)
    z = rl.forward_g(m, z_f)
    assert z_f.shape == (6, 3)
    assert z.shape == (6, 3)
    assert np.allclose(z_f, p @ m.W_f + m.b_f)
    assert np.allclose(z, z_f @ m.W_g + m.b_g)


def test_embed_is_float32_live_f():
    m = _model()
    p = np.random.default_rng(2).normal(size=(5, 4)).astype(np.float32)
    z = rl.embed(m, p)
    assert z.dtype == np.float32
    assert np.array_equal(z, rl.forward_f(m, p).astype(np.float32))


def test_forward_rejects_dim_mismatch():
    m = _model()
    with pytest.raises(DimMismatch):
        rl.forward_f(m, np.ones((3, 5)))


def test_init_ema_equals_live():
    m = _model(seed=3)
    for key, arr in m.live().items():
        assert np.array_equal(arr, m.ema()[key])


def test_init_weight_bounds():
    m = _model(seed=4, in_dim=9, d_f=4, d_g=2)
    assert np.abs(m.W_f).max() <= 1.0 / np.sqrt(9)
    assert np.abs(m.W_g).max() <= 1.0 / np.sqrt(4)
    assert np.array_equal(m.b_f, np.zeros(4))
    assert np.array_equal(m.b_g, np.zeros(2))


# ---------------------------------------------------------------------------
# relative distances and loss
# ---------------------------------------------------------------------------

def test_relative_distances_two_points():
    delta = rl.relative_distances(np.array([[0.0], [3.0]]))
    assert np.array_equal(delta, np.array([[0.0, 2.0], [2.0, 0.0]]))


def test_relative_distances_scale_invariant():
    rng = np.random.default_rng(5)
    z = rng.normal(size=(7, 3))
    assert np.allclose(rl.relative_distances(z),
                       rl.relative_distances(17.0 * z), rtol=1e-12)


def test_relative_distances_identical_points():
    delta = rl.relative_distances(np.zeros((4, 2)))
    assert np.array_equal(delta, np.zeros((4, 4)))


def test_relative_distances_rejects_single_row():
    with pytest.raises(ShapeMismatch):
        rl.relative_distances(np.ones((1, 3)))


def test_loss_identical_points_full_similarity():
    z = np.ones((5, 3))
    assert rl.relaxed_contrastive_loss(z, np.ones((5, 5)), 1.0) == 0.0


def test_loss_two_point_hand_values():
    z = np.array([[0.0], [2.0]])  # delta is exactly 2 both ways
    assert rl.relaxed_contrastive_loss(z, np.ones((2, 2)), 1.0) == 4.0
    # with zero weights only the diagonal hinge terms (delta = 0) remain
    assert rl.relaxed_contrastive_loss(z, np.zeros((2, 2)), 1.0) == 1.0


def test_loss_nonnegative():
    rng = np.random.default_rng(6)
    for _ in range(10):
        z = rng.normal(size=(6, 3))
        w = rng.random((6, 6))
        assert rl.relaxed_contrastive_loss(z, w, 1.0) >= 0.0


def test_loss_scale_invariant():
    rng = np.random.default_rng(7)
    z = rng.normal(size=(8, 4))
    w = rng.random((8, 8))
    a = rl.relaxed_contrastive_loss(z, w, 1.0)
    b = rl.relaxed_contrastive_loss(0.01 * z, w, 1.0)
    assert a == pytest.approx(b, rel=1e-9)


def test_loss_rejects_bad_shapes_and_margin():
    z = np.ones((3, 2))
    with pytest.raises(ShapeMismatch):
        rl.relaxed_contrastive_loss(z, np.ones((2, 2)), 1.0)
    with pytest.raises(ConfigError):
        rl.relaxed_contrastive_loss(z, np.ones((3, 3)), 0.0)


# ---------------------------------------------------------------------------
# analytic gradients
# ---------------------------------------------------------------------------

def _kink_safe_margin(delta, n):
    """Margin placed mid-gap between observed deltas, away from any kink."""
    vals = np.unique(delta[~np.eye(n, dtype=bool)])
    gaps = np.diff(vals)
    gi = int(np.argmax(gaps[:max(1, len(gaps) // 2)]))
    return float((vals[gi] + vals[gi + 1]) / 2)


def _fd_worst_error(seed, h=1e-4):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 17))
    in_dim = int(rng.integers(2, 9))
    d_f = int(rng.integers(2, 9))
    d_g = int(rng.integers(2, 9))
    p = rng.normal(size=(n, in_dim))
    model = rl.init_model(in_dim, d_f, d_g, rng)
    w = rng.random((n, n))
    w = (w + w.T) / 2
    np.fill_diagonal(w, 1.0)

    z = rl.forward_g(model, rl.forward_f(model, p))
    m = _kink_safe_margin(rl.relative_distances(z), n)

    analytic = rl.loss_gradients(model, p, w, m)
    params = model.live()
    fd = oracles.finite_difference_grads(
        lambda: rl.relaxed_contrastive_loss(
            rl.forward_g(model, rl.forward_f(model, p)), w, m),
        params, h=h)
    worst = 0.0
    for key in params:
        scale = np.maximum(np.maximum(np.abs(fd[key]),
                                      np.abs(analytic[key])), 1e-6)
        worst = max(worst, float(np.max(np.abs(fd[key] - analytic[key])
                                        / scale)))
    return worst


def test_gradients_match_finite_differences():
    for seed in range(5):
        assert _fd_worst_error(seed) <= 1e-4


def test_gradients_zero_for_identical_points_full_similarity():
    m = _model(seed=8)
    p = np.tile(np.array([0.5, -1.0, 2.0, 0.25]), (6, 1))
    grads = rl.loss_gradients(m, p, np.ones((6, 6)), 1.0)
    for g in grads.values():
        assert np.array_equal(g, np.zeros_like(g))


def test_gradients_zero_beyond_margin_with_zero_similarity():
    m = _model(seed=9)
    rng = np.random.default_rng(10)
    p = rng.normal(size=(5, 4))
    z = rl.forward_g(m, rl.forward_f(m, p))
    delta = rl.relative_distances(z)
    off = delta[~np.eye(5, dtype=bool)]
    margin = 0.5 * float(off.min())  # every off-diagonal delta > margin
    grads = rl.loss_gradients(m, p, np.zeros((5, 5)), margin)
    for g in grads.values():
        assert np.array_equal(g, np.zeros_like(g))


def test_gradients_reject_mismatched_inputs():
    m = _model()
    with pytest.raises(DimMismatch):
        rl.loss_gradients(m, np.ones((4, 9)), np.ones((4, 4)), 1.0)
    with pytest.raises(ShapeMismatch):
        rl.loss_gradients(m, np.ones((4, 4)), np.ones((3, 3)), 1.0)


# ---------------------------------------------------------------------------
# EMA
# ---------------------------------------------------------------------------

def test_ema_gamma_one_freezes():
    m = _model(seed=11)
    before = {k: v.copy() for k, v in m.ema().items()}
    m.W_f += 1.0
    rl.ema_update(m, 1.0)
    for key, arr in m.ema().items():
        assert np.array_equal(arr, before[key])


def test_ema_gamma_zero_copies_live():
    m = _model(seed=12)
    m.W_f += 0.5
    m.b_g -= 2.0
    rl.ema_update(m, 0.0)
    for key, arr in m.ema().items():
        assert np.array_equal(arr, m.live()[key])


def test_ema_blend_arithmetic():
    m = _model(seed=13)
    start = {k: v.copy() for k, v in m.ema().items()}
    m.W_f[:] = start["W_f"] + 1.0
    rl.ema_update(m, 0.9)
    want = 0.9 * start["W_f"] + 0.1 * m.W_f
    assert np.allclose(m.ema_W_f, want, rtol=1e-15)


def test_ema_rejects_bad_gamma():
    m = _model()
    for bad in (-0.1, 1.5):
        with pytest.raises(GammaOutOfRange):
            rl.ema_update(m, bad)


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------

def test_adamw_first_step_closed_form():
    rng = np.random.default_rng(14)
    params = {"w": rng.normal(size=(3, 2))}
    start = params["w"].copy()
    grads = {"w": rng.normal(size=(3, 2))}
    opt = rl.AdamW(params)
    opt.step(params, grads, lr=0.1, weight_decay=0.01)
    g = grads["w"]
    want = start - 0.1 * (g / (np.abs(g) + 1e-8) + 0.01 * start)
    assert np.allclose(params["w"], want, rtol=1e-12)


def test_adamw_decoupled_decay_shrinks_without_gradient():
    params = {"w": np.full((2, 2), 10.0)}
    opt = rl.AdamW(params)
    opt.step(params, {"w": np.zeros((2, 2))}, lr=0.1, weight_decay=0.5)
    assert np.allclose(params["w"], 10.0 - 0.1 * 0.5 * 10.0)


def test_cosine_schedule_endpoints():
    assert rl.cosine_lr(2.0, 0, 100) == 2.0
    assert rl.cosine_lr(2.0, 50, 100) == pytest.approx(1.0, rel=1e-12)
    assert rl.cosine_lr(2.0, 100, 100) == pytest.approx(0.0, abs=1e-12)
    assert rl.cosine_lr(2.0, 0, 0) == 2.0


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def test_train_zero_epochs_returns_init():
    rng_data = np.random.default_rng(15)
    x = rng_data.normal(size=(20, 4)).astype(np.float32)
    cfg = rl.TrainConfig(epochs=0, batch_size=8, d_f=3, d_g=3, seed=7,
                         sim=SimilarityConfig(k=4))
    model = rl.train([x], cfg)
    want = rl.init_model(4, 3, 3, np.random.default_rng(7))
    for key, arr in model.live().items():
        assert np.array_equal(arr, want.live()[key])


def test_train_same_seed_is_bit_reproducible():
    rng_data = np.random.default_rng(16)
    data = [rng_data.normal(size=(30, 5)).astype(np.float32)]
    cfg = rl.TrainConfig(epochs=3, batch_size=16, lr=1e-3, d_f=4, d_g=4,
                         seed=3, sim=SimilarityConfig(sigma=0.5, k=5))
    m1 = rl.train(data, cfg)
    m2 = rl.train(data, cfg)
    for key, arr in m1.live().items():
        assert np.array_equal(arr, m2.live()[key])
    for key, arr in m1.ema().items():
        assert np.array_equal(arr, m2.ema()[key])


def test_train_lr_zero_gamma_one_changes_nothing():
    rng_data = np.random.default_rng(17)
    x = rng_data.normal(size=(25, 4)).astype(np.float32)
    cfg = rl.TrainConfig(epochs=2, batch_size=10, lr=0.0, weight_decay=0.0,
                         gamma=1.0, d_f=3, d_g=3, seed=1,
                         sim=SimilarityConfig(k=4))
    model = rl.train([x], cfg)
    want = rl.init_model(4, 3, 3, np.random.default_rng(1))
    for key, arr in model.live().items():
        assert np.array_equal(arr, want.live()[key])
    for key, arr in model.ema().items():
        assert np.array_equal(arr, want.ema()[key])


def test_train_counts_optimizer_steps():
    calls = []

    class Recorder:
        def step(self, params, grads, lr, weight_decay):
            calls.append(lr)

    x = np.zeros((25, 3), dtype=np.float32)
    x[::2] += 1.0
    cfg = rl.TrainConfig(epochs=4, batch_size=10, d_f=2, d_g=2, seed=0,
                         sim=SimilarityConfig(k=3))
    rl.train([x], cfg, optimizer=Recorder())
    assert len(calls) == 4 * 3  # epochs * ceil(25 / 10)
    assert calls[0] == cfg.lr  # cosine schedule starts at base lr


def test_train_pools_multiple_samples():
    rng_data = np.random.default_rng(18)
    sets = [rng_data.normal(size=(8, 4)).astype(np.float32)
            for _ in range(3)]
    cfg = rl.TrainConfig(epochs=1, batch_size=6, d_f=3, d_g=3, seed=0,
                         sim=SimilarityConfig(k=3))
    model = rl.train(sets, cfg)
    assert model.in_dim == 4


def test_train_validates_inputs():
    cfg = rl.TrainConfig(epochs=1, batch_size=8, d_f=3, d_g=3,
                         sim=SimilarityConfig(k=4))
    with pytest.raises(EmptyDataset):
        rl.train([], cfg)
    bad_k = rl.TrainConfig(epochs=1, batch_size=4, d_f=3, d_g=3,
                           sim=SimilarityConfig(k=8))
    with pytest.raises(KOutOfRange):  # k exceeds the batch size
        rl.train([np.ones((10, 3), dtype=np.float32)], bad_k)
    mixed = [np.ones((4, 3), dtype=np.float32),
             np.ones((4, 5), dtype=np.float32)]
    with pytest.raises(DimMismatch):
        rl.train(mixed, cfg)


def test_train_tightens_clusters():
    # two gaussian modes; the intra/inter distance ratio must drop
    rng = np.random.default_rng(5)
    d = 8
    a = rng.normal(size=(100, d), scale=0.45)
    a[:, 0] += 1.0
    b = rng.normal(size=(100, d), scale=0.45)
    b[:, 0] -= 1.0
    x = np.vstack([a, b]).astype(np.float32)
    lab = np.r_[np.zeros(100), np.ones(100)]

    def ratio(z):
        e = np.sqrt(pairwise_sqdist(z.astype(np.float64),
                                    z.astype(np.float64)))
        same = lab[:, None] == lab[None, :]
        offdiag = ~np.eye(len(z), dtype=bool)
        return e[same & offdiag].mean() / e[~same].mean()

    cfg = rl.TrainConfig(epochs=60, batch_size=128, lr=1e-3,
                         weight_decay=1e-2, margin=1.0, gamma=0.9,
                         d_f=8, d_g=8, seed=0,
                         sim=SimilarityConfig(sigma=0.2, k=50, alpha=0.5))
    init = rl.init_model(d, cfg.d_f, cfg.resolved_d_g,
                         np.random.default_rng(cfg.seed))
    model = rl.train([x], cfg)
    assert ratio(rl.embed(model, x)) < ratio(rl.embed(init, x))


# ---------------------------------------------------------------------------
# config container
# ---------------------------------------------------------------------------

def test_train_config_roundtrip():
    cfg = rl.TrainConfig(epochs=7, batch_size=32, lr=2e-4, weight_decay=0.05,
                         margin=0.8, gamma=0.95, d_f=64, d_g=32, seed=9,
                         sim=SimilarityConfig(sigma=2.0, k=6, alpha=0.25))
    assert rl.TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_train_config_d_g_defaults_to_d_f():
    cfg = rl.TrainConfig(d_f=48, d_g=0)
    assert cfg.resolved_d_g == 48


def test_train_config_validation_errors():
    with pytest.raises(ConfigError):
        rl.TrainConfig(epochs=-1).validate()
    with pytest.raises(ConfigError):
        rl.TrainConfig(batch_size=1).validate()
    with pytest.raises(ConfigError):
        rl.TrainConfig(margin=0.0).validate()
    with pytest.raises(ConfigError):
        rl.TrainConfig(gamma=1.2).validate()
    with pytest.raises(KOutOfRange):
        rl.TrainConfig(batch_size=4,
                       sim=SimilarityConfig(k=10)).validate()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    m = _model(seed=19, in_dim=6, d_f=4, d_g=3)
    m.ema_W_f += 0.25  # make EMA distinct from live
    cfg = rl.TrainConfig(epochs=2, batch_size=8, d_f=4, d_g=3,
                         sim=SimilarityConfig(k=4))
    p = tmp_path / "model.rcpm"
    rl.save_model(p, m, cfg)
    loaded, loaded_cfg = rl.load_model(p)
    assert loaded_cfg == cfg
    for key, arr in m.live().items():
        assert np.array_equal(loaded.live()[key],
                              arr.astype(np.float32).astype(np.float64))
    for key, arr in m.ema().items():
        assert np.array_equal(loaded.ema()[key],
                              arr.astype(np.float32).astype(np.float64))


def test_checkpoint_save_is_deterministic(tmp_path):
    m = _model(seed=20)
    cfg = rl.TrainConfig(d_f=3, d_g=3)
    rl.save_model(tmp_path / "a.rcpm", m, cfg)
    rl.save_model(tmp_path / "b.rcpm", m, cfg)
    assert (tmp_path / "a.rcpm").read_bytes() == \
        (tmp_path / "b.rcpm").read_bytes()


def test_checkpoint_rejects_bad_magic(tmp_path):
    p = tmp_path / "model.rcpm"
    rl.save_model(p, _model(), rl.TrainConfig(d_f=3, d_g=3))
    blob = bytearray(p.read_bytes())
    blob[0] ^= 0xFF
    p.write_bytes(bytes(blob))
    with pytest.raises(VersionMismatch):
        rl.load_model(p)


def test_checkpoint_rejects_future_version(tmp_path):
    p = tmp_path / "model.rcpm"
    rl.save_model(p, _model(), rl.TrainConfig(d_f=3, d_g=3))
    blob = bytearray(p.read_bytes())
    blob[4] = 99  # little-endian version field follows the magic
    p.write_bytes(bytes(blob))
    with pytest.raises(VersionMismatch):
        rl.load_model(p)


def test_checkpoint_rejects_truncation(tmp_path):
    p = tmp_path / "model.rcpm"
    rl.save_model(p, _model(), rl.TrainConfig(d_f=3, d_g=3))
    blob = p.read_bytes()
    p.write_bytes(blob[:len(blob) // 2])
    with pytest.raises(CorruptPayload):
        rl.load_model(p)
