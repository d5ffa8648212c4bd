import json

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from services.errors import AllParticlesFailed, DimensionMismatch, ModelFailure, ModelValidationError
from services.smc import (
    Marginal,
    NoiseModel,
    ParticleSet,
    Prior,
    SmcConfig,
    ess,
    ess_from_log,
    evaluate_batch,
    log_likelihood,
    map_estimate,
    resample,
    run_smc,
    select_temper_step,
    systematic_indices,
    write_posterior,
)


def identity(theta):
    return np.asarray(theta, dtype=float)


def standard_normal_prior():
    return Prior([Marginal(type="normal", mean=0.0, std=1.0)], ["theta"])


def test_ess_bounds():
    assert ess([1.0, 1.0, 1.0, 1.0]) == pytest.approx(4.0)
    assert ess([1.0, 0.0, 0.0]) == pytest.approx(1.0)
    assert ess_from_log([0.0, np.log(3.0)]) == pytest.approx(16.0 / 10.0)
    with pytest.raises(AllParticlesFailed):
        ess([0.0, 0.0])
    with pytest.raises(AllParticlesFailed):
        ess_from_log([-np.inf, -np.inf])


@settings(max_examples=50)
@given(seed=st.integers(0, 2 ** 32 - 1), k=st.integers(2, 200))
def test_ess_lies_between_one_and_particle_count(seed, k):
    w = np.random.default_rng(seed).exponential(size=k)
    assert 1.0 - 1e-9 <= ess(w) <= k + 1e-9


def test_log_likelihood():
    noise = NoiseModel(np.array([1.0, 2.0]), np.array([0.5, 2.0]))
    expected = -0.5 * (2 * np.log(2 * np.pi) + np.log(0.5) + np.log(2.0) + 0.25 / 0.5 + 1.0 / 2.0)
    assert log_likelihood(noise, np.array([1.5, 1.0])) == pytest.approx(expected)
    out = log_likelihood(noise, np.array([[1.0, 2.0], [np.nan, 2.0]]))
    assert np.isfinite(out[0]) and out[1] == -np.inf
    with pytest.raises(DimensionMismatch):
        log_likelihood(noise, np.zeros(3))


def test_noise_from_snr():
    noise = NoiseModel.from_snr([10.0, -20.0], 100.0)
    np.testing.assert_allclose(noise.variance, [1.0, 4.0])
    with pytest.raises(ModelValidationError):
        NoiseModel.from_snr([1.0], 0.0)
    with pytest.raises(ModelValidationError):
        NoiseModel(np.array([0.0]), np.array([0.0]))


def test_uniform_prior():
    prior = Prior.uniform(2, 2.0, 8.0)
    theta = prior.sample(np.random.default_rng(0), 1000)
    assert theta.shape == (1000, 2)
    assert theta.min() >= 2.0 and theta.max() <= 8.0
    log_density = prior.log_density([[5.0, 5.0], [9.0, 5.0]])
    assert log_density[0] == pytest.approx(2 * np.log(1.0 / 6.0))
    assert log_density[1] == -np.inf
    assert prior.names == ["theta_0", "theta_1"]


def test_prior_from_json():
    prior = Prior.from_json({"type": "normal", "mean": 1.0, "std": 2.0}, ["a"])
    assert prior.dim == 1
    with pytest.raises(ValueError):
        Marginal(type="uniform", lower=3.0, upper=1.0)
    with pytest.raises(ValueError):
        Marginal(type="gamma")
    with pytest.raises(ModelValidationError):
        Prior([])


def test_select_temper_step_meets_target():
    loglik = -0.5 * np.linspace(0.0, 50.0, 1000) ** 2
    log_w = np.zeros(1000)
    zeta = select_temper_step(loglik, log_w, 500.0, 1.0)
    assert 0.0 < zeta < 1.0
    assert ess_from_log(log_w + zeta * loglik) < 500.0
    assert ess_from_log(log_w + (zeta - 2e-8) * loglik) >= 500.0


def test_select_temper_step_takes_whole_budget_when_flat():
    assert select_temper_step(np.full(10, -3.0), np.zeros(10), 9.0, 0.4) == 0.4
    with pytest.raises(ModelValidationError):
        select_temper_step(np.zeros(3), np.zeros(3), 1.0, 0.0)


@settings(max_examples=100)
@given(seed=st.integers(0, 2 ** 32 - 1), k=st.integers(1, 300), u=st.floats(0.0, 0.999999))
def test_systematic_counts_stay_within_one_of_expectation(seed, k, u):
    w = np.random.default_rng(seed).dirichlet(np.ones(k))
    counts = np.bincount(systematic_indices(w, u), minlength=k)
    assert counts.sum() == k
    assert np.all(np.abs(counts - k * w) < 1.0 + 1e-9)


def test_resample_resets_weights():
    particles = ParticleSet(np.arange(4.0)[:, None], np.log([0.7, 0.1, 0.1, 0.1]), np.zeros((4, 1)),
                            np.zeros(4), gamma=0.3)
    out = resample(particles, np.random.default_rng(1))
    np.testing.assert_array_equal(out.log_weights, 0.0)
    assert out.gamma == 0.3
    assert np.sum(out.theta[:, 0] == 0.0) >= 2


def test_map_breaks_ties_by_posterior():
    particles = ParticleSet(np.array([[0.0], [1.0], [2.0]]), np.zeros(3), np.zeros((3, 1)),
                            np.array([-5.0, -1.0, -3.0]), gamma=1.0)
    assert map_estimate(particles, Prior.uniform(1, -10.0, 10.0))[0] == 1.0


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_conjugate_gaussian_posterior(seed):
    noise = NoiseModel(np.array([2.0]), np.array([1.0]))
    result = run_smc(identity, standard_normal_prior(), noise, SmcConfig(particles=10000, seed=seed))
    W = result.weights
    theta = result.particles.theta[:, 0]
    mean = W @ theta
    assert mean == pytest.approx(1.0, abs=0.05)
    assert W @ (theta - mean) ** 2 == pytest.approx(0.5, abs=0.05)
    assert result.particles.gamma == 1.0
    assert sum(result.zeta_schedule) == pytest.approx(1.0)
    assert len(result.acceptance_rates) == len(result.zeta_schedule)
    assert W.sum() == pytest.approx(1.0)


def test_same_seed_same_particles():
    noise = NoiseModel(np.array([2.0]), np.array([0.1]))
    cfg = SmcConfig(particles=500, seed=42)
    a = run_smc(identity, standard_normal_prior(), noise, cfg)
    b = run_smc(identity, standard_normal_prior(), noise, cfg)
    np.testing.assert_array_equal(a.particles.theta, b.particles.theta)
    np.testing.assert_array_equal(a.weights, b.weights)
    assert a.zeta_schedule == b.zeta_schedule
    c = run_smc(identity, standard_normal_prior(), noise, cfg.model_copy(update={"seed": 43}))
    assert not np.array_equal(a.particles.theta, c.particles.theta)


def test_ess_history_respects_particle_count():
    noise = NoiseModel(np.array([1.5]), np.array([0.01]))
    result = run_smc(identity, standard_normal_prior(), noise, SmcConfig(particles=400, seed=3))
    assert all(1.0 <= e <= 400.0 + 1e-9 for e in result.ess_history)
    assert len(result.ess_history) == len(result.zeta_schedule) > 1
    assert all(0.0 <= a <= 1.0 for a in result.acceptance_rates)


def test_every_iteration_rejuvenates():
    noise = NoiseModel(np.array([2.0]), np.array([4.0]))
    result = run_smc(identity, standard_normal_prior(), noise, SmcConfig(particles=2000, seed=5))
    # one tempering step takes the whole budget here and never resamples
    assert result.zeta_schedule == [1.0]
    assert min(result.ess_history) >= SmcConfig(particles=2000).ess_min
    assert len(result.acceptance_rates) == len(result.zeta_schedule)
    assert 0.0 < result.acceptance_rates[0] < 1.0
    assert result.evaluations > 2000

    still = run_smc(identity, standard_normal_prior(), noise,
                    SmcConfig(particles=2000, seed=5, rejuvenation_steps=0))
    assert still.acceptance_rates == []
    assert still.evaluations == 2000


def test_failed_particles_carry_no_weight():
    def half_fails(theta):
        out = identity(theta).copy()
        out[theta[:, 0] < 0.0] = np.nan
        return out

    noise = NoiseModel(np.array([0.5]), np.array([0.04]))
    result = run_smc(half_fails, Prior.uniform(1, -1.0, 1.0), noise, SmcConfig(particles=1000, seed=7))
    W = result.weights
    assert np.all(W[result.particles.theta[:, 0] < 0.0] == 0.0)
    assert W @ result.particles.theta[:, 0] == pytest.approx(0.5, abs=0.05)


def test_all_particles_failing_raises():
    noise = NoiseModel(np.array([0.5]), np.array([0.04]))
    with pytest.raises(AllParticlesFailed):
        run_smc(lambda theta: np.full(theta.shape, np.nan), Prior.uniform(1, -1.0, 1.0), noise,
                SmcConfig(particles=50))


def test_config_threshold():
    assert SmcConfig(particles=200).ess_min == pytest.approx(100.0)
    with pytest.raises(ValueError):
        SmcConfig(particles=10, ess_min=20.0)


def test_worker_pool_matches_serial_evaluation():
    theta = np.random.default_rng(0).normal(size=(101, 3))
    square = lambda t: t ** 2
    serial = evaluate_batch(square, theta)
    pooled = evaluate_batch(square, theta, workers=4)
    chunked = evaluate_batch(square, theta, chunk_size=7)
    np.testing.assert_array_equal(serial, pooled)
    np.testing.assert_array_equal(serial, chunked)


def test_raising_chunk_becomes_nan_rows():
    def picky(theta):
        if np.any(theta > 0.5):
            raise RuntimeError("solver blew up")
        return theta

    theta = np.array([[0.1], [0.2], [0.9], [0.3]])
    out = evaluate_batch(picky, theta, chunk_size=2)
    np.testing.assert_array_equal(out[:2], theta[:2])
    assert np.all(np.isnan(out[2:]))


def test_model_failure_becomes_nan_rows(caplog):
    def fails(theta):
        raise ModelFailure(theta[0], 0.25)

    out = evaluate_batch(fails, np.array([[0.1, 0.2], [0.3, 0.4]]))
    assert out.shape == (2, 1) and np.all(np.isnan(out))
    assert "Forward model failed" in caplog.text


def test_write_posterior(tmp_path):
    noise = NoiseModel(np.array([2.0]), np.array([1.0]))
    result = run_smc(identity, standard_normal_prior(), noise, SmcConfig(particles=200, seed=1))
    summary = write_posterior(result, tmp_path / "run" / "posterior.csv", tmp_path / "summary.json")

    frame = pd.read_csv(tmp_path / "run" / "posterior.csv")
    assert list(frame.columns) == ["theta", "weight"]
    assert len(frame) == 200
    assert frame["weight"].sum() == pytest.approx(1.0)
    saved = json.loads((tmp_path / "summary.json").read_text())
    assert saved["seed"] == 1
    assert saved["map"] == summary["map"]
    assert len(saved["covariance"]) == 1
