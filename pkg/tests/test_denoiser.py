import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from motionctl import denoiser as dn
from motionctl import numcore as nc
from motionctl.diffusion import build_schedule
from motionctl.errors import ConfigError, InvalidShapeError, NumericError


def small_model(fusion="token_concat", seed=0, **kw):
    cfg = dn.DenoiserConfig(height=8, width=8, frames=4, fusion=fusion, init_seed=seed, **kw)
    model = dn.Denoiser(cfg)
    rng = np.random.default_rng(seed + 100)
    # perturb everything (including the zero-initialised parts) so every path is exercised
    for k, v in model.params.items():
        model.params[k] = (v + 0.3 * rng.standard_normal(v.shape)).astype(np.float32)
    return model


def random_cond(model, batch=1, n_text=4, seed=0, level=3):
    rng = np.random.default_rng(seed)
    text = rng.standard_normal((batch, n_text, model.config.token_dim))
    return model.condition(text, level, (1, 2))


def test_output_shape_and_records():
    m = small_model()
    z = np.random.default_rng(0).standard_normal((4, 3, 8, 8))
    eps, recs = m.predict_noise(z, 7, random_cond(m))
    assert eps.shape == z.shape
    assert set(recs) == {"down", "mid", "up"}
    assert recs["down"].maps.shape == (1, 4, 64, 6)
    assert recs["up"].grid == (4, 4) and recs["mid"].grid == (2, 2)
    batch = np.stack([z, z])
    assert m.predict_noise(batch, 7, random_cond(m))[0].shape == batch.shape


@pytest.mark.parametrize("layers", [("mid",), ("mid", "up"), ("down",)])
def test_records_only_stops_early_with_identical_maps(layers):
    m = small_model()
    z = np.random.default_rng(1).standard_normal((2, 4, 3, 8, 8))
    cond = random_cond(m)
    _, full = m.predict_noise(z, 9, cond)
    eps, part = m.predict_noise(z, 9, cond, records_only=layers)
    assert eps is None and set(layers) <= set(part)
    assert all(part[k].maps.data.tobytes() == full[k].maps.data.tobytes() for k in part)


def test_untrained_model_predicts_zero():
    m = dn.Denoiser(dn.DenoiserConfig(height=8, width=8, frames=4, output="eps"))
    eps, _ = m.predict_noise(np.ones((4, 3, 8, 8)), 3, random_cond(m))
    assert not eps.data.any()


@pytest.mark.parametrize("t", [1, 25, 50])
def test_untrained_v_output_is_scaled_input(t):
    m = dn.Denoiser(dn.DenoiserConfig(height=8, width=8, frames=4))
    z = np.random.default_rng(t).standard_normal((4, 3, 8, 8))
    eps, _ = m.predict_noise(z, t, random_cond(m))
    ab = np.prod(1 - np.linspace(2e-3, 0.2, 50)[:t])
    np.testing.assert_allclose(eps.data, np.sqrt(1 - ab) * z, rtol=1e-5)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 50), st.sampled_from(dn.ATTN_LAYERS))
def test_attention_rows_stochastic(seed, t, layer):
    m = small_model(seed=seed % 3)
    z = 3 * np.random.default_rng(seed).standard_normal((4, 3, 8, 8))
    _, recs = m.predict_noise(z, t, random_cond(m, seed=seed))
    rows = recs[layer].maps.data.sum(axis=-1)
    assert np.abs(rows - 1).max() <= 1e-6


def test_deterministic():
    m = small_model()
    z = np.random.default_rng(1).standard_normal((4, 3, 8, 8))
    a = m.predict_noise(z, 5, random_cond(m))[0].data
    b = m.predict_noise(z, 5, random_cond(m))[0].data
    assert a.tobytes() == b.tobytes()


def test_token_dim_mismatch_is_config_error():
    m = small_model()
    with pytest.raises(ConfigError):
        m.condition(np.zeros((1, 3, 16)), 2)
    with pytest.raises(InvalidShapeError):
        m.predict_noise(np.zeros((4, 3, 6, 6)), 1, random_cond(m))
    with pytest.raises(ConfigError):
        dn.DenoiserConfig(fusion="concat").validate()
    with pytest.raises(ConfigError):
        dn.DenoiserConfig(guidance_layers=("side",)).validate()


def test_attention_mass_gradient_matches_finite_differences():
    with nc.precision(np.float64):
        m = small_model(seed=1)
        cond = random_cond(m, seed=1)
        cells = np.zeros(16, bool)
        cells[[0, 5, 6, 9]] = True

        def mass(z):
            _, recs = m.predict_noise(z, 10, cond)
            return nc.sum_(nc.take(recs["up"].maps, np.array([1]), axis=-1) * cells[:, None].astype(float))

        z = np.random.default_rng(2).standard_normal((4, 3, 8, 8))
        assert nc.finite_diff_check(mass, z, step=1e-5) <= 1e-4


# -- attention blocks -----------------------------------------------------

def _feats(seed, shape):
    return nc.Tensor(np.random.default_rng(seed).standard_normal(shape))


def test_single_token_attention():
    m = small_model()
    p = m._wrap(False)
    h = _feats(0, (2, 4, 4, 32))
    tok = _feats(1, (1, 1, 32))
    out, rec = m.spatial_cross_attention(p, "up", h, tok, 1)
    assert np.array_equal(rec.maps.data, np.ones((1, 2, 16, 1), dtype=np.float32))
    v = tok.data[0] @ p["up.attn.v"].data
    expect = h.data + (v @ p["up.attn.o.w"].data + p["up.attn.o.b"].data)
    np.testing.assert_allclose(out.data, expect, rtol=1e-5, atol=1e-5)


def test_identical_tokens_split_attention():
    m = small_model()
    p = m._wrap(False)
    tok = np.repeat(np.random.default_rng(3).standard_normal((1, 1, 32)), 2, axis=1)
    _, rec = m.spatial_cross_attention(p, "mid", _feats(2, (1, 2, 2, 32)), nc.Tensor(tok), 1)
    np.testing.assert_allclose(rec.maps.data, 0.5, atol=1e-7)


@given(st.permutations(range(5)))
@settings(max_examples=10, deadline=None)
def test_token_permutation_permutes_columns(perm):
    m = small_model()
    p = m._wrap(False)
    h = _feats(4, (2, 4, 4, 32))
    tok = np.random.default_rng(5).standard_normal((1, 5, 32))
    _, a = m.spatial_cross_attention(p, "down", h, nc.Tensor(tok), 1)
    _, b = m.spatial_cross_attention(p, "down", h, nc.Tensor(tok[:, list(perm)]), 1)
    np.testing.assert_allclose(b.maps.data, a.maps.data[..., list(perm)], atol=1e-6)


def test_temporal_single_frame_is_value_output_projection():
    m = small_model()
    p = m._wrap(False)
    x = _feats(6, (1, 2, 2, 32))
    out = m.temporal_attention(p, x, 1)
    xn = nc.group_norm(x, p["mid.temporal.norm.g"], p["mid.temporal.norm.b"]).data
    expect = x.data + (xn @ p["mid.temporal.v"].data) @ p["mid.temporal.o.w"].data + p["mid.temporal.o.b"].data
    np.testing.assert_allclose(out.data, expect, rtol=1e-5, atol=1e-5)


def test_temporal_identical_frames_give_identical_outputs():
    m = small_model()
    m.params["mid.temporal.rel_bias"][:] = 0
    p = m._wrap(False)
    frame = np.random.default_rng(7).standard_normal((1, 2, 2, 32))
    out = m.temporal_attention(p, nc.Tensor(np.repeat(frame, 4, axis=0)), 1).data
    for i in range(1, 4):
        np.testing.assert_allclose(out[i], out[0], atol=1e-6)


def test_causal_mask_isolates_future_frames():
    m = small_model(causal=True)
    z = np.random.default_rng(8).standard_normal((4, 3, 8, 8))
    cond = random_cond(m)
    a, ra = m.predict_noise(z, 9, cond)
    z2 = z.copy()
    z2[-1] += 5.0
    b, rb = m.predict_noise(z2, 9, cond)
    assert a.data[:-1].tobytes() == b.data[:-1].tobytes()
    assert not np.array_equal(a.data[-1], b.data[-1])
    p = m._wrap(False)
    x = _feats(9, (4, 2, 2, 32)).data
    x2 = x.copy()
    x2[-1] -= 2.0
    ta = m.temporal_attention(p, nc.Tensor(x), 1).data
    tb = m.temporal_attention(p, nc.Tensor(x2), 1).data
    assert ta[:-1].tobytes() == tb[:-1].tobytes()


def test_global_add_and_text_word_paths():
    g = small_model("global_add")
    cond = random_cond(g)
    assert cond.global_vec is not None and cond.token_count == 4
    z = np.random.default_rng(0).standard_normal((4, 3, 8, 8))
    e3 = g.predict_noise(z, 4, cond)[0].data
    e7 = g.predict_noise(z, 4, random_cond(g, level=7))[0].data
    assert not np.array_equal(e3, e7)
    w = small_model("text_word")
    assert w.condition(np.zeros((1, 5, 32)), None).token_count == 5
    with pytest.raises(ConfigError):
        small_model("token_concat").condition(np.zeros((1, 5, 32)), None)


# -- training -------------------------------------------------------------

def _batch(seed=0):
    rng = np.random.default_rng(seed)
    return dn.Batch(rng.uniform(-1, 1, (4, 8, 3, 16, 16)).astype(np.float32),
                    rng.standard_normal((4, 4, 32)).astype(np.float32), np.array([1, 4, 7, 10]))


def test_initial_loss_is_unit_noise_energy():
    model = dn.Denoiser(dn.DenoiserConfig(output="eps", loss="eps"))
    loss = dn.train_step(model, _batch(), build_schedule(50, 2e-3, 0.2),
                         dn.Optimizer(dn.OptimizerConfig(lr=0.0)), seed=0)
    assert loss == pytest.approx(1.0, rel=0.10)


def test_initial_v_loss_is_target_energy():
    # zero-init network output F = 0, so the weighted loss is the mean square of the v target
    model = dn.Denoiser(dn.DenoiserConfig())
    sched = build_schedule(50, 2e-3, 0.2)
    batch = _batch()
    loss = dn.train_step(model, batch, sched, dn.Optimizer(dn.OptimizerConfig(lr=0.0)), seed=4)
    rng = np.random.default_rng(4)
    t = rng.integers(1, 51, size=4)
    eps = rng.standard_normal(batch.z0.shape)
    ab = sched.alpha_bar[t - 1].reshape(4, 1, 1, 1, 1)
    v = np.sqrt(ab) * eps - np.sqrt(1 - ab) * batch.z0
    assert loss == pytest.approx(np.mean(v ** 2), rel=1e-4)


def test_zero_learning_rate_leaves_params_bit_identical():
    model = dn.Denoiser(dn.DenoiserConfig())
    before = {k: v.copy() for k, v in model.params.items()}
    dn.train_step(model, _batch(), build_schedule(50, 2e-3, 0.2), dn.Optimizer(dn.OptimizerConfig(lr=0.0)), 1)
    assert all(before[k].tobytes() == model.params[k].tobytes() for k in before)


@pytest.mark.parametrize("kind", ["sgd", "adam"])
def test_two_steps_descend(kind):
    model = dn.Denoiser(dn.DenoiserConfig())
    opt = dn.Optimizer(dn.OptimizerConfig(kind=kind, lr=1e-3 if kind == "adam" else 0.05))
    sched = build_schedule(50, 2e-3, 0.2)
    first = dn.train_step(model, _batch(), sched, opt, seed=3)
    second = dn.train_step(model, _batch(), sched, opt, seed=3)
    assert second < first


def test_nonfinite_training_aborts_with_diagnostics():
    model = dn.Denoiser(dn.DenoiserConfig())
    model.params["conv_in.w"] = np.full_like(model.params["conv_in.w"], 1e30)
    with pytest.raises(NumericError, match="parameter norms"):
        dn.train_step(model, _batch(), build_schedule(50, 2e-3, 0.2), dn.Optimizer(dn.OptimizerConfig()), 0)


def test_fit_resume_matches_uninterrupted():
    sched = build_schedule(50, 2e-3, 0.2)
    rng = np.random.default_rng(0)
    data = dn.TrainingSet(rng.uniform(-1, 1, (6, 4, 3, 8, 8)).astype(np.float32),
                          rng.standard_normal((6, 4, 32)).astype(np.float32), rng.integers(1, 11, 6))
    cfg = dn.DenoiserConfig(height=8, width=8, frames=4)
    a = dn.Denoiser(cfg)
    la = dn.fit(a, data, sched, dn.Optimizer(dn.OptimizerConfig()), 4, batch_size=2)
    b = dn.Denoiser(cfg)
    opt = dn.Optimizer(dn.OptimizerConfig())
    lb = dn.fit(b, data, sched, opt, 2, batch_size=2)
    lb += dn.fit(b, data, sched, opt, 2, batch_size=2, start=2)
    assert la == lb
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)


def test_params_validated():
    cfg = dn.DenoiserConfig()
    params = dn.init_params(cfg)
    assert params["intensity.table"].shape == (10, cfg.token_dim)
    assert len({r.tobytes() for r in params["intensity.table"]}) == 10
    del params["conv_in.b"]
    with pytest.raises(ConfigError):
        dn.Denoiser(cfg, params)
