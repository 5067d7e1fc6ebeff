import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eeg3d.toydiffusion import (
    PARAM_NAMES,
    DiffusionConfig,
    DiffusionError,
    SamplerDiverged,
    denoiser_loss_and_grads,
    forward_noise,
    guided_noise_prediction,
    init_denoiser,
    linear_betas,
    load_denoiser,
    predict_noise,
    sample,
    sample_many,
    save_denoiser,
    train_denoiser,
)

from oracles import central_diff, rel_err, two_class_image_set


def _rand_params(config, seed=0):
    """Initialized params with the (normally zero) conditioning columns filled in."""
    params = init_denoiser(config)
    rng = np.random.default_rng(seed)
    for arr in params.arrays.values():
        arr += 0.1 * rng.standard_normal(arr.shape)
    return params


def test_forward_noise_endpoints():
    cfg = DiffusionConfig()
    rng = np.random.default_rng(0)
    x0 = rng.uniform(-1, 1, (8, 8, 3))
    eps = rng.standard_normal(x0.shape)
    assert np.array_equal(forward_noise(x0, 0, eps, cfg).x_t, x0)

    ab = cfg.schedule().alpha_bar
    for t in (1, 17, 50):
        out = forward_noise(np.zeros_like(eps), t, eps, cfg)
        np.testing.assert_allclose(out.x_t, math.sqrt(1 - ab[t]) * eps, rtol=0, atol=1e-15)

    x_T = forward_noise(x0, cfg.timesteps, eps, cfg).x_t
    assert np.linalg.norm(x_T - eps) <= 0.05 * np.linalg.norm(eps)


def test_forward_noise_errors():
    cfg = DiffusionConfig()
    with pytest.raises(DiffusionError, match="shape"):
        forward_noise(np.zeros(4), 1, np.zeros(5), cfg)
    with pytest.raises(DiffusionError, match="outside"):
        forward_noise(np.zeros(4), 51, np.zeros(4), cfg)
    with pytest.raises(DiffusionError, match="outside"):
        forward_noise(np.zeros(4), -1, np.zeros(4), cfg)


def test_marginal_variance_identity():
    # x0 = 0 and unit eps: x_t = sqrt(1 - ab) * eps, so Var = 1 - ab analytically
    cfg = DiffusionConfig()
    ab = cfg.schedule().alpha_bar
    for t in range(1, cfg.timesteps + 1):
        coef = forward_noise(np.zeros(1), t, np.ones(1), cfg).x_t[0]
        assert abs(coef * coef - (1 - ab[t])) <= 1e-9


def test_schedule_invariants():
    cfg = DiffusionConfig()
    ab = cfg.schedule().alpha_bar
    assert np.all(np.diff(ab) < 0)
    assert np.all(np.diff(cfg.betas) >= 0) and min(cfg.betas) > 0 and max(cfg.betas) < 1
    with pytest.raises(DiffusionError):
        DiffusionConfig(timesteps=3, betas=(0.1, 0.05, 0.2))
    with pytest.raises(DiffusionError):
        DiffusionConfig(timesteps=2, betas=(0.0, 0.1))
    with pytest.raises(DiffusionError):
        DiffusionConfig(drop_prob=1.5)
    with pytest.raises(DiffusionError):
        DiffusionConfig(guidance_scale=-1)
    assert len(linear_betas(50)) == 50


def test_guidance_endpoints_exact():
    cfg = DiffusionConfig()
    params = _rand_params(cfg)
    rng = np.random.default_rng(1)
    x = rng.standard_normal(cfg.dim)
    z = rng.standard_normal(cfg.cond_dim)
    eps_u = predict_noise(params, x, 20, None)[0]
    eps_c = predict_noise(params, x, 20, z[None])[0]
    assert not np.allclose(eps_u, eps_c)
    assert np.array_equal(guided_noise_prediction(x, 20, z, 0.0, params), eps_u)
    assert np.array_equal(guided_noise_prediction(x, 20, z, 1.0, params), eps_c)
    assert np.array_equal(guided_noise_prediction(x, 20, None, 3.0, params), eps_u)


def test_guidance_scalar_oracle_at_4_5():
    cfg = DiffusionConfig()
    params = _rand_params(cfg, seed=2)
    rng = np.random.default_rng(3)
    x = rng.standard_normal(cfg.dim)
    z = rng.standard_normal(cfg.cond_dim)
    eps_u = predict_noise(params, x, 33, None)[0]
    eps_c = predict_noise(params, x, 33, z[None])[0]
    got = guided_noise_prediction(x, 33, z, 4.5, params)
    for i in range(cfg.dim):
        u, c = float(eps_u[i]), float(eps_c[i])
        assert abs(got[i] - (u + 4.5 * (c - u))) <= 1e-12


@settings(max_examples=25, deadline=None)
@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 10), st.integers(1, 50))
def test_guidance_affine_in_w(w1, w2, w3, t):
    cfg = DiffusionConfig()
    params = _rand_params(cfg, seed=4)
    rng = np.random.default_rng(t)
    x = rng.standard_normal(cfg.dim)
    z = rng.standard_normal(cfg.cond_dim)
    p1, p2, p3 = (guided_noise_prediction(x, t, z, w, params) for w in (w1, w2, w3))
    # collinear points: (p3 - p1) * (w2 - w1) == (p2 - p1) * (w3 - w1)
    lhs = (p3 - p1) * (w2 - w1)
    rhs = (p2 - p1) * (w3 - w1)
    assert np.max(np.abs(lhs - rhs)) <= 1e-10


def test_shape_checks():
    cfg = DiffusionConfig()
    params = init_denoiser(cfg)
    with pytest.raises(DiffusionError):
        guided_noise_prediction(np.zeros(10), 1, None, 1.0, params)
    with pytest.raises(DiffusionError):
        guided_noise_prediction(np.zeros(cfg.dim), 1, np.zeros(3), 1.0, params)
    with pytest.raises(DiffusionError):
        guided_noise_prediction(np.zeros(cfg.dim), 0, None, 1.0, params)


def test_sample_deterministic_and_clamped():
    cfg = DiffusionConfig()
    params = _rand_params(cfg)
    z = np.random.default_rng(5).standard_normal(cfg.cond_dim)
    a = sample(z, cfg, params, rng_seed=7)
    b = sample(z, cfg, params, rng_seed=7)
    assert a.shape == (8, 8, 3)
    assert np.array_equal(a, b)
    assert a.min() >= -1 and a.max() <= 1
    assert not np.array_equal(a, sample(z, cfg, params, rng_seed=8))
    # batching only changes matmul rounding, not the per-(conditioning, seed) draw
    batch = sample_many([z, z], cfg, params, [8, 7])
    np.testing.assert_allclose(batch[1], a, rtol=0, atol=1e-12)


def test_single_step_sampler_hand_computation():
    cfg = DiffusionConfig(timesteps=1, betas=(0.3,), image_side=2, cond_dim=3, hidden=5, time_features=4,
                          guidance_scale=1.5)
    params = _rand_params(cfg, seed=6)
    z = np.array([0.2, -0.4, 0.9])
    got = sample(z, cfg, params, rng_seed=11)

    x1 = np.random.default_rng(11).standard_normal(cfg.dim)
    eps_u = predict_noise(params, x1, 1, None)[0]
    eps_c = predict_noise(params, x1, 1, z[None])[0]
    eps = eps_u + 1.5 * (eps_c - eps_u)
    ab = 1 - 0.3
    x0 = (x1 - math.sqrt(1 - ab) * eps) / math.sqrt(ab)
    expected = np.clip(x0, -1, 1).reshape(2, 2, 3)
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-12)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_sampler_divergence_names_timestep():
    cfg = DiffusionConfig()
    params = init_denoiser(cfg)
    params.arrays["b3"][:] = np.inf
    with pytest.raises(SamplerDiverged) as info:
        sample(np.zeros(cfg.cond_dim), cfg, params, 0)
    assert info.value.timestep == cfg.timesteps
    assert str(cfg.timesteps) in str(info.value)


def test_sampler_rejects_schedule_mismatch():
    params = init_denoiser(DiffusionConfig(timesteps=10))
    with pytest.raises(DiffusionError, match="schedule"):
        sample(np.zeros(16), DiffusionConfig(), params, 0)


@pytest.mark.parametrize("seed", [0, 1])
def test_denoiser_gradients_match_finite_differences(seed):
    cfg = DiffusionConfig(timesteps=10, image_side=2, channels=2, cond_dim=3, hidden=6, time_features=4)
    params = _rand_params(cfg, seed=seed)
    rng = np.random.default_rng(seed + 10)
    b = 5
    x_t = rng.standard_normal((b, cfg.dim))
    t = rng.integers(1, 11, size=b)
    conds = rng.standard_normal((b, cfg.cond_dim))
    use = np.array([True, False, True, True, False])
    eps = rng.standard_normal((b, cfg.dim))

    _, grads = denoiser_loss_and_grads(params, x_t, t, conds, use, eps)
    numeric = central_diff(lambda: denoiser_loss_and_grads(params, x_t, t, conds, use, eps)[0],
                           params.arrays, PARAM_NAMES)
    for name in PARAM_NAMES:
        assert rel_err(grads[name], numeric[name]) <= 1e-4, name


def test_training_reduces_validation_loss_and_is_reproducible():
    cfg = DiffusionConfig(train_steps=600)
    data, _, _ = two_class_image_set(cfg.cond_dim, per_class=32)
    a = train_denoiser(data, cfg)
    assert a.val_final <= 0.7 * a.val_initial
    b = train_denoiser(data, cfg)
    assert a.loss_curve == b.loss_curve
    assert np.array_equal(a.params.flat(), b.params.flat())


def test_zero_learning_rate_keeps_loss_constant():
    cfg = DiffusionConfig(learning_rate=0.0, train_steps=200)
    data, _, _ = two_class_image_set(cfg.cond_dim, per_class=8)
    out = train_denoiser(data, cfg)
    assert len(set(out.loss_curve)) == 1
    assert np.array_equal(out.params.flat(), init_denoiser(cfg).flat())


def test_full_dropout_makes_branches_coincide():
    cfg = DiffusionConfig(drop_prob=1.0, train_steps=300)
    data, codes, _ = two_class_image_set(cfg.cond_dim, per_class=16)
    params = train_denoiser(data, cfg).params
    rng = np.random.default_rng(0)
    x = rng.standard_normal((32, cfg.dim))
    t = rng.integers(1, cfg.timesteps + 1, size=32)
    eps_u = predict_noise(params, x, t, None)
    eps_c = predict_noise(params, x, t, codes[np.arange(32) % 2])
    assert np.linalg.norm(eps_c - eps_u) / np.linalg.norm(eps_u) <= 0.05


def test_training_errors():
    cfg = DiffusionConfig()
    with pytest.raises(DiffusionError, match="empty"):
        train_denoiser([], cfg)
    with pytest.raises(DiffusionError, match="shapes"):
        train_denoiser([(np.zeros(10), np.zeros(cfg.cond_dim))], cfg)


def test_checkpoint_roundtrip(tmp_path):
    cfg = DiffusionConfig(timesteps=12, image_side=4, cond_dim=5, hidden=7)
    params = _rand_params(cfg)
    save_denoiser(params, tmp_path / "d.dif")
    back = load_denoiser(tmp_path / "d.dif")
    assert back.betas == params.betas
    assert (back.image_side, back.channels, back.time_features, back.cond_dim) == (4, 3, 16, 5)
    np.testing.assert_array_equal(back.flat(), params.flat().astype(np.float32).astype(np.float64))

    raw = (tmp_path / "d.dif").read_bytes()
    (tmp_path / "bad.dif").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(DiffusionError, match="magic"):
        load_denoiser(tmp_path / "bad.dif")
    (tmp_path / "short.dif").write_bytes(raw[:-4])
    with pytest.raises(DiffusionError, match="size"):
        load_denoiser(tmp_path / "short.dif")


@pytest.mark.slow
def test_class_conditional_samples_follow_condition():
    cfg = DiffusionConfig()
    data, codes, means = two_class_image_set(cfg.cond_dim)
    params = train_denoiser(data, cfg).params
    labels = np.arange(100) % 2
    out = sample_many([codes[c] for c in labels], cfg, params, list(range(100)))
    flat = out.reshape(100, -1)
    pred = np.argmin(((flat[:, None, :] - means[None]) ** 2).sum(axis=2), axis=1)
    assert np.mean(pred == labels) >= 0.8
