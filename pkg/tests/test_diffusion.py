import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fastcf import diffusion as dff
from fastcf.autodiff import Tensor
from fastcf.errors import ParameterError, ShapeError
from fastcf.models import GMMPrior, gmm_posterior_denoiser


@pytest.fixture(scope="module")
def sched1000():
    return dff.make_linear_schedule(1000)


def test_linear_schedule_endpoints(sched1000):
    assert sched1000.beta(1) == pytest.approx(1e-4, abs=0)
    assert sched1000.beta(1000) == pytest.approx(0.02, abs=0)


def test_alpha_bar_strictly_decreasing(sched1000):
    assert np.all(np.diff(sched1000.alpha_bars) < 0)


def test_alpha_bar_matches_direct_product(sched1000):
    # brute-force product oracle
    prod = 1.0
    for t in range(1, 1001):
        prod *= 1.0 - sched1000.beta(t)
    assert abs(sched1000.alpha_bar(1000) - prod) < 1e-9


def test_schedule_parameter_errors():
    with pytest.raises(ParameterError):
        dff.make_linear_schedule(1)
    # the 1000/T scaling pushes betas past 1 for very small T
    with pytest.raises(ParameterError):
        dff.make_linear_schedule(10)


def test_respace_identity(sched1000):
    again = dff.respace(sched1000, 1000)
    assert np.array_equal(again.alpha_bars, sched1000.alpha_bars)
    assert np.array_equal(again.timestep_map, sched1000.timestep_map)


def test_respace_medical_reference(sched1000):
    r = dff.respace(sched1000, 400)
    assert r.T == 400
    # tau = 160 of the 400 respaced steps is a valid guidance entry point
    assert 1 <= 160 <= r.T
    assert r.map_index(160) == 399
    assert r.map_index(400) == 1000


def test_respaced_alpha_bars_are_exact_subsequence(sched1000):
    parent = set(sched1000.alpha_bars.tolist())
    for n in (2, 3, 40, 399, 400, 777):
        r = dff.respace(sched1000, n)
        assert all(v in parent for v in r.alpha_bars.tolist())
        assert np.all(np.diff(r.timestep_map) > 0)
        assert r.timestep_map[-1] == 1000


def test_respace_range_errors(sched1000):
    for bad in (1, 1001, 0):
        with pytest.raises(ParameterError):
            dff.respace(sched1000, bad)


def test_forward_sample_zero_noise(sched1000):
    x0 = np.array([1.0, -2.0, 0.5], np.float32)
    out = dff.forward_sample(sched1000, x0, 700, np.zeros(3, np.float32))
    assert np.allclose(out, np.sqrt(sched1000.alpha_bar(700)) * x0, atol=1e-7)


def test_forward_sample_terminal_is_noise(sched1000):
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal(16).astype(np.float32)
    eps = rng.standard_normal(16).astype(np.float32)
    out = dff.forward_sample(sched1000, x0, 1000, eps)
    assert np.abs(out - eps).max() < 0.05


def test_forward_sample_moments():
    s = dff.make_linear_schedule(200)
    rng = np.random.default_rng(1)
    x0 = np.full(4, 0.7, np.float32)
    t = 60
    draws = np.stack([
        dff.forward_sample(s, x0, t, rng.standard_normal(4).astype(np.float32))
        for _ in range(10_000)
    ])
    abar = s.alpha_bar(t)
    se_mean = np.sqrt((1 - abar) / draws.shape[0])
    assert np.abs(draws.mean(0) - np.sqrt(abar) * x0).max() < 3 * se_mean
    var = draws.var(0)
    se_var = (1 - abar) * np.sqrt(2.0 / (draws.shape[0] - 1))
    assert np.abs(var - (1 - abar)).max() < 3 * se_var


def test_forward_shape_mismatch(sched1000):
    with pytest.raises(ShapeError):
        dff.forward_sample(sched1000, np.zeros(3, np.float32), 5, np.zeros(4, np.float32))


@settings(max_examples=80, deadline=None)
@given(
    t=st.integers(min_value=1, max_value=200),
    seed=st.integers(min_value=0, max_value=2**31),
)
def test_round_trip_property(t, seed):
    s = dff.make_linear_schedule(200)
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal(6).astype(np.float32)
    eps = rng.standard_normal(6).astype(np.float32)
    x_t = dff.forward_sample(s, x0.astype(np.float64), t, eps.astype(np.float64))
    back = dff.denoised_estimate(s, x_t, eps.astype(np.float64), t)
    assert np.abs(back - x0).max() < 1e-5


def test_denoised_estimate_zero_eps(sched1000):
    x = np.array([0.3, -0.4], np.float32)
    out = dff.denoised_estimate(sched1000, x, np.zeros(2, np.float32), 400)
    assert np.allclose(out, x / np.sqrt(sched1000.alpha_bar(400)), atol=1e-6)


def test_denoised_estimate_matches_gmm_posterior_mean():
    s = dff.make_linear_schedule(200)
    prior = GMMPrior(weights=[0.4, 0.6], means=[[-1.5, 0.0], [1.5, 0.5]], variances=[0.3, 0.2])
    den = gmm_posterior_denoiser(prior, s)
    rng = np.random.default_rng(3)
    for t in (5, 50, 120):
        x_t = rng.standard_normal(2).astype(np.float32)
        eps_bar = den.predict_noise(Tensor(x_t), t).data
        est = dff.denoised_estimate(s, x_t, eps_bar, t)
        assert np.abs(est - den.posterior_mean(x_t, t)).max() < 1e-6


class _ZeroDenoiser:
    n_timesteps = 10**9

    def predict_noise(self, x, t, counter=None):
        if counter is not None:
            counter.forward += 1
        return x * 0.0


def test_posterior_step_final_step_deterministic(sched1000):
    rng = np.random.default_rng(4)
    x = Tensor(rng.standard_normal(3).astype(np.float32))
    res = dff.posterior_step(sched1000, _ZeroDenoiser(), x, 1, rng)
    assert np.array_equal(res.sample.data, res.mean.data)
    assert res.variance == 0.0


def test_posterior_step_zero_eps_mean(sched1000):
    rng = np.random.default_rng(5)
    x = np.array([1.0, -1.0], np.float32)
    res = dff.posterior_step(sched1000, _ZeroDenoiser(), Tensor(x), 300, rng)
    assert np.allclose(res.mean.data, x / np.sqrt(sched1000.alpha(300)), atol=1e-6)


def test_unconditional_histogram_matches_mixture_weights():
    s = dff.make_linear_schedule(100)
    prior = GMMPrior(weights=[0.5, 0.5], means=[[-2.0, 0.0], [2.0, 0.0]], variances=[0.25, 0.25])
    den = gmm_posterior_denoiser(prior, s)
    rng = np.random.default_rng(6)
    out = dff.unconditional_sample(s, den, (2000, 2), rng).data
    frac_a = float((out[:, 0] < 0.0).mean())
    assert abs(frac_a - prior.weights[0]) < 0.05


def test_unconditional_from_t_zero_returns_input():
    s = dff.make_linear_schedule(100)
    x = np.array([0.1, 0.2], np.float32)
    rng = np.random.default_rng(7)
    out = dff.unconditional_sample(s, _ZeroDenoiser(), x.shape, rng, from_t=0, from_x=x)
    assert np.array_equal(out.data, x)
    with pytest.raises(ParameterError):
        dff.unconditional_sample(s, _ZeroDenoiser(), x.shape, rng, from_t=5)


def test_reconstruction_from_low_noise():
    s = dff.make_linear_schedule(200)
    prior = GMMPrior(weights=[0.5, 0.5], means=[[-2.0, 0.0], [2.0, 0.0]], variances=[0.25, 0.25])
    den = gmm_posterior_denoiser(prior, s)
    rng = np.random.default_rng(8)
    x0 = (prior.means[rng.integers(0, 2, 500)]
          + 0.5 * rng.standard_normal((500, 2))).astype(np.float32)
    eps = rng.standard_normal(x0.shape).astype(np.float32)
    x5 = dff.forward_sample(s, x0, 5, eps)
    back = dff.unconditional_sample(s, den, x0.shape, rng, from_t=5, from_x=x5)
    assert np.abs(back.data - x0).mean() < 0.1


def test_sampling_determinism():
    s = dff.make_linear_schedule(100)
    prior = GMMPrior(weights=[1.0], means=[[0.0, 0.0]], variances=[1.0])
    den = gmm_posterior_denoiser(prior, s)
    a = dff.unconditional_sample(s, den, (4, 2), np.random.default_rng(42)).data
    b = dff.unconditional_sample(s, den, (4, 2), np.random.default_rng(42)).data
    assert np.array_equal(a, b)


def test_out_of_range_timestep(sched1000):
    with pytest.raises(IndexError):
        sched1000.alpha_bar(1001)
    with pytest.raises(IndexError):
        sched1000.beta(0)
