import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hetdiff import autodiff as ad
from hetdiff.autodiff import Tape, Tensor
from hetdiff.diffusion import (
    DenoiserParams,
    build_schedule,
    combine_weights,
    diffusion_loss,
    forward_diffuse,
    generate_negatives,
    predict_noise,
    reverse_step,
    sample_indices,
    time_embedding,
)
from hetdiff.errors import ConfigError
from hetdiff.training import AdamState, adam_step

PAPER_W = (0.9, 0.8, 0.7, 0.6)


def oracle_noise(e_g0):
    """Noise model that knows the clean embedding and returns the exact noise of the current state."""

    def predict(x, _cond, t, schedule):
        ab = schedule.alpha_bar[t - 1]
        return (x - np.sqrt(ab) * e_g0) / np.sqrt(1.0 - ab)

    return predict


# --- schedule --------------------------------------------------------------


def test_t4_alpha_values():
    s = build_schedule(4)
    np.testing.assert_allclose(s.alpha, [0.9999, 0.9999 - 0.0199 / 3, 0.9999 - 2 * 0.0199 / 3, 0.98], rtol=0, atol=1e-15)
    assert s.alpha_bar[0] == s.alpha[0]
    assert s.alpha_bar[3] == pytest.approx(0.96029, abs=5e-6)
    assert s.alpha_bar[3] == pytest.approx(np.prod(s.alpha), rel=1e-15)


def test_paper_schedule_properties():
    s = build_schedule(100, 0.9999, 0.98)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert s.sigma2[0] == 0.0
    prod = 1.0
    bars = []
    for a in s.alpha:
        prod *= a
        bars.append(prod)
    bars = np.array(bars)
    prev = np.r_[1.0, bars[:-1]]
    np.testing.assert_allclose(s.sigma2, (1 - prev) / (1 - bars), rtol=0, atol=1e-15)
    assert all(np.isfinite(x).all() for x in (s.alpha, s.alpha_bar, s.sigma2))


def test_schedule_errors():
    with pytest.raises(ConfigError):
        build_schedule(3)
    with pytest.raises(ConfigError):
        build_schedule(10, 0.9, 0.95)
    with pytest.raises(ad.ContractError):
        build_schedule(10).alpha_at(11)


def test_sample_indices():
    assert sample_indices(100) == (100, 50, 33, 25)
    assert sample_indices(4) == (4, 2, 1, 1)
    with pytest.raises(ConfigError):
        sample_indices(3)


# --- time embedding ---------------------------------------------------------


def test_pe_zero():
    np.testing.assert_array_equal(time_embedding(0, 8), [0, 1, 0, 1, 0, 1, 0, 1])


def test_pe_first_frequency_is_one():
    pe = time_embedding(1.3, 6)
    assert pe[0] == pytest.approx(np.sin(1.3)) and pe[1] == pytest.approx(np.cos(1.3))


@given(st.floats(0, 1e4), st.sampled_from([2, 4, 10, 128]))
def test_pe_pair_identity(t, d):
    pe = time_embedding(t, d)
    assert np.sum(pe**2) == pytest.approx(d / 2, rel=1e-12)


def test_pe_odd_dimension():
    with pytest.raises(ConfigError):
        time_embedding(1, 5)


def test_pe_array_matches_scalar():
    ts = np.array([1, 7, 50])
    np.testing.assert_array_equal(time_embedding(ts, 8), np.stack([time_embedding(int(t), 8) for t in ts]))


# --- forward process ---------------------------------------------------------


@pytest.mark.parametrize("t", [1, 50, 100])
def test_forward_statistics(t):
    s = build_schedule(100)
    e0 = np.linspace(-1, 1, 4)
    draws = forward_diffuse(np.tile(e0, (100_000, 1)), t, s, np.random.default_rng(t))[0]
    ab = s.alpha_bar[t - 1]
    se = np.sqrt((1 - ab) / len(draws))
    assert np.all(np.abs(draws.mean(0) - np.sqrt(ab) * e0) <= 3 * se)
    np.testing.assert_allclose(draws.var(0, ddof=1), 1 - ab, rtol=0.02)


def test_forward_near_identity_at_small_t():
    s = build_schedule(10, 0.999999999, 0.99)
    e0 = np.ones(3)
    out, _ = forward_diffuse(e0, 1, s, np.random.default_rng(0))
    np.testing.assert_allclose(out, e0, atol=1e-3)


def test_forward_returns_noise_used():
    s = build_schedule(10)
    e0 = np.arange(3.0)
    x, eps = forward_diffuse(e0, 4, s, np.random.default_rng(1))
    ab = s.alpha_bar[3]
    np.testing.assert_allclose(x, np.sqrt(ab) * e0 + np.sqrt(1 - ab) * eps)


def test_forward_step_range():
    with pytest.raises(ad.ContractError):
        forward_diffuse(np.ones(2), 0, build_schedule(10), np.random.default_rng(0))


# --- denoiser -----------------------------------------------------------------


def test_zero_weight_denoiser_outputs_zero():
    d = 4
    p = DenoiserParams(Tensor(np.zeros((3 * d, d))), Tensor(np.zeros(d)), Tensor(np.zeros((d, d))), Tensor(np.zeros(d)))
    out = predict_noise(p, np.ones((2, d)), np.ones((2, d)), 3)
    assert out.shape == (2, d) and not out.values.any()


def test_predictor_fast_path_matches_tape_path(rng):
    p = DenoiserParams.init(6, rng)
    x, c = rng.normal(size=(5, 6)), rng.normal(size=(5, 6))
    np.testing.assert_allclose(p.predictor(c)(x, c, 7), predict_noise(p, x, c, 7).values, atol=1e-12)


def test_denoiser_shape_error(rng):
    with pytest.raises(ad.DimensionError):
        predict_noise(DenoiserParams.init(4, rng), np.ones((2, 4)), np.ones((2, 3)), 1)


def test_denoiser_gradients(rng):
    p = DenoiserParams.init(4, rng)
    x, c = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    f = lambda: ad.sum(ad.square(predict_noise(p, x, c, np.array([1, 2, 3]))))
    assert ad.finite_difference_check(f, p.tensors()) <= 1e-4


# --- reverse process ----------------------------------------------------------


def test_reverse_t1_is_deterministic(rng):
    s = build_schedule(10)
    p = DenoiserParams.init(4, rng)
    x, c = rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
    a = reverse_step(x, 1, p, c, s, np.random.default_rng(0))
    b = reverse_step(x, 1, p, c, s, np.random.default_rng(1))
    np.testing.assert_array_equal(a, b)


def test_reverse_mean_formula(rng):
    s = build_schedule(10)
    x, eps = rng.normal(size=4), rng.normal(size=4)
    out = reverse_step(x, 6, None, x, s, None, predictor=lambda *_: eps, stochastic=False)
    a, ab = s.alpha[5], s.alpha_bar[5]
    np.testing.assert_allclose(out, (x - (1 - ab) / np.sqrt(1 - ab) * eps) / np.sqrt(a))
    ddpm = reverse_step(x, 6, None, x, s, None, predictor=lambda *_: eps, stochastic=False, mean="ddpm")
    np.testing.assert_allclose(ddpm, (x - (1 - a) / np.sqrt(1 - ab) * eps) / np.sqrt(a))


def test_reverse_stochastic_noise_scale():
    s = build_schedule(10)
    x = np.zeros((200_000, 1))
    out = reverse_step(x, 5, None, x, s, np.random.default_rng(0), predictor=lambda x, *_: np.zeros_like(x))
    assert out.var() == pytest.approx(s.sigma2[4], rel=0.02)


def test_round_trip_recovers_clean_embedding():
    T, d = 100, 32
    s = build_schedule(T)
    rng = np.random.default_rng(0)
    e0 = rng.normal(size=d)
    x, _ = forward_diffuse(e0, T, s, rng)
    oracle = oracle_noise(e0)
    for t in range(T, 0, -1):
        x = reverse_step(x, t, None, e0, s, None, predictor=lambda x, c, t: oracle(x, c, t, s), stochastic=False)
    assert np.max(np.abs(x - e0)) <= 1e-6


def test_reverse_step_range(rng):
    with pytest.raises(ad.ContractError):
        reverse_step(np.zeros(2), 11, None, np.zeros(2), build_schedule(10), rng, predictor=lambda x, *_: x)


def test_reverse_mean_validation(rng):
    with pytest.raises(ConfigError):
        reverse_step(np.zeros(2), 2, None, np.zeros(2), build_schedule(10), rng, predictor=lambda x, *_: x, mean="other")


# --- negative generation --------------------------------------------------------


def test_combined_is_weighted_sum_of_sampled(rng):
    s = build_schedule(20)
    p = DenoiserParams.init(4, rng)
    b = generate_negatives(p, rng.normal(size=(3, 4)), s, PAPER_W, np.random.default_rng(5))
    assert b.steps == (20, 10, 6, 5)
    np.testing.assert_allclose(b.combined, np.tensordot(PAPER_W, b.sampled, axes=1))
    for k, step in enumerate(b.steps):
        np.testing.assert_array_equal(b.sampled[k], b.trajectory[20 - step])


def test_identical_states_give_three_v():
    v = np.array([[1.0, -2.0]])
    sampled = np.stack([v] * 4)
    np.testing.assert_allclose(np.tensordot(combine_weights(PAPER_W), sampled, axes=1), 3.0 * v)


def test_generation_is_deterministic(rng):
    s = build_schedule(12)
    p = DenoiserParams.init(4, rng)
    c = rng.normal(size=(2, 4))
    a = generate_negatives(p, c, s, PAPER_W, np.random.default_rng(9))
    b = generate_negatives(p, c, s, PAPER_W, np.random.default_rng(9))
    np.testing.assert_array_equal(a.trajectory, b.trajectory)
    np.testing.assert_array_equal(a.combined, b.combined)


def test_full_trajectory_length(rng):
    s = build_schedule(12)
    p = DenoiserParams.init(2, rng)
    b = generate_negatives(p, np.zeros((1, 2)), s, PAPER_W, np.random.default_rng(0), full_trajectory=True)
    assert b.trajectory.shape == (12, 1, 2)
    short = generate_negatives(p, np.zeros((1, 2)), s, PAPER_W, np.random.default_rng(0))
    assert short.trajectory.shape[0] == 12 - 3 + 1


def test_combined_linear_in_weights(rng):
    s = build_schedule(12)
    p = DenoiserParams.init(2, rng)
    c = np.ones((1, 2))
    a = generate_negatives(p, c, s, (0.9, 0.8, 0.7, 0.6), np.random.default_rng(0))
    b = generate_negatives(p, c, s, (1.9, 0.8, 0.7, 0.6), np.random.default_rng(0))
    np.testing.assert_allclose(b.combined - a.combined, a.sampled[0])


def test_combine_modes():
    np.testing.assert_array_equal(combine_weights(PAPER_W, "sum"), np.ones(4))
    np.testing.assert_array_equal(combine_weights(PAPER_W, "average"), np.full(4, 0.25))
    np.testing.assert_allclose(combine_weights(PAPER_W, normalize=True).sum(), 1.0)
    with pytest.raises(ConfigError):
        combine_weights((0.6, 0.7, 0.8, 0.9))
    with pytest.raises(ConfigError):
        combine_weights((1.0, 0.5))
    with pytest.raises(ConfigError):
        combine_weights(PAPER_W, "max")


# --- diffusion loss ----------------------------------------------------------------


def test_zero_denoiser_loss_is_dimension():
    d = 8
    p = DenoiserParams(Tensor(np.zeros((3 * d, d))), Tensor(np.zeros(d)), Tensor(np.zeros((d, d))), Tensor(np.zeros(d)))
    b = 20_000
    loss = diffusion_loss(p, Tensor(np.zeros((b, d))), Tensor(np.zeros((b, d))), build_schedule(10), np.random.default_rng(0)).item()
    assert abs(loss - d) <= 4 * np.sqrt(2 * d / b)


def test_diffusion_loss_empty_batch(rng):
    with pytest.raises(ad.ContractError):
        diffusion_loss(DenoiserParams.init(2, rng), Tensor(np.zeros((0, 2))), Tensor(np.zeros((0, 2))), build_schedule(10), rng)


def test_diffusion_loss_decreases_on_fixed_batch():
    rng = np.random.default_rng(0)
    d = 4
    p = DenoiserParams.init(d, rng)
    e_g, e_d = Tensor(rng.normal(size=(16, d)) * 0.3), Tensor(rng.normal(size=(16, d)) * 0.3)
    s = build_schedule(10)
    state = AdamState()

    def loss():
        return diffusion_loss(p, e_g, e_d, s, np.random.default_rng(42))

    first = loss().item()
    for _ in range(200):
        with Tape() as tape:
            l = loss()
        adam_step(p.tensors(), tape.backward(l, p.tensors()), state, 0.01)
    assert loss().item() < 0.5 * first


def test_diffusion_loss_gradients():
    rng = np.random.default_rng(3)
    p = DenoiserParams.init(4, rng)
    e_g = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    e_d = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    s = build_schedule(10)
    f = lambda: diffusion_loss(p, e_g, e_d, s, np.random.default_rng(1))
    assert ad.finite_difference_check(f, [*p.tensors(), e_g, e_d]) <= 1e-4
