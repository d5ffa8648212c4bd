"""
Sequential Monte Carlo sampler with adaptive tempering.

The posterior p(theta | y_obs) ~ prior(theta) * likelihood(theta) is reached
through tempered targets prior * likelihood**gamma_s, gamma_s going from 0 to 1.
Each iteration picks the tempering increment by bisection on the effective
sample size, reweights, resamples (systematic) when the ESS drops below the
threshold and then moves the particles with random-walk Metropolis.

Forward models are passed as evaluators: callables mapping an (m, d) array of
parameters to an (m, n_y) array of outputs. Failed members return non-finite
rows and get zero weight.
"""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, model_validator
from scipy import stats
from scipy.special import logsumexp

from services import config
from services.errors import AllParticlesFailed, DimensionMismatch, ModelFailure, ModelValidationError

logger = logging.getLogger(__name__)

Evaluator = Callable[[np.ndarray], np.ndarray]

# random stream ids within one SMC iteration
STREAM_INIT = 0
STREAM_RESAMPLE = 1
STREAM_REJUVENATE = 2


# ---------------------------------------------------------------------------
# Likelihood and prior
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseModel:
    y_obs: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        y_obs = np.atleast_1d(np.asarray(self.y_obs, dtype=float))
        variance = np.broadcast_to(np.asarray(self.variance, dtype=float), y_obs.shape).copy()
        if np.any(~(variance > 0)):
            raise ModelValidationError("noise variances must be positive")
        object.__setattr__(self, "y_obs", y_obs)
        object.__setattr__(self, "variance", variance)

    @classmethod
    def from_snr(cls, y_obs, snr: float) -> "NoiseModel":
        """sigma_i^2 = y_obs_i^2 / SNR"""
        if snr <= 0:
            raise ModelValidationError(f"SNR must be positive, got {snr}")
        y_obs = np.atleast_1d(np.asarray(y_obs, dtype=float))
        return cls(y_obs, y_obs ** 2 / snr)


def log_likelihood(noise: NoiseModel, y) -> np.ndarray:
    """Gaussian log-likelihood over the last axis; non-finite outputs give -inf"""
    y = np.asarray(y, dtype=float)
    if y.shape[-1] != noise.y_obs.size:
        raise DimensionMismatch(f"model output has {y.shape[-1]} entries, observations have {noise.y_obs.size}")
    n = noise.y_obs.size
    misfit = np.sum((y - noise.y_obs) ** 2 / noise.variance, axis=-1)
    value = -0.5 * (n * math.log(2.0 * math.pi) + np.sum(np.log(noise.variance)) + misfit)
    return np.where(np.all(np.isfinite(y), axis=-1), value, -np.inf)


class Marginal(BaseModel):
    type: str = "uniform"
    lower: Optional[float] = None
    upper: Optional[float] = None
    mean: Optional[float] = None
    std: Optional[float] = None

    @model_validator(mode="after")
    def check(self):
        if self.type == "uniform":
            if self.lower is None or self.upper is None or not self.upper > self.lower:
                raise ValueError("uniform marginal needs finite lower < upper")
        elif self.type == "normal":
            if self.mean is None or self.std is None or self.std <= 0:
                raise ValueError("normal marginal needs mean and std > 0")
        else:
            raise ValueError(f"unknown marginal type '{self.type}'")
        return self

    def frozen(self):
        if self.type == "uniform":
            return stats.uniform(loc=self.lower, scale=self.upper - self.lower)
        return stats.norm(loc=self.mean, scale=self.std)


class Prior:
    """Independent per-parameter marginals"""

    def __init__(self, marginals: List[Marginal], names: Optional[List[str]] = None):
        if not marginals:
            raise ModelValidationError("prior needs at least one marginal")
        self.marginals = list(marginals)
        self.names = list(names) if names else [f"theta_{i}" for i in range(len(marginals))]
        self._dists = [m.frozen() for m in self.marginals]

    @classmethod
    def uniform(cls, dim: int, lower: float = 2.0, upper: float = 8.0, names=None) -> "Prior":
        return cls([Marginal(type="uniform", lower=lower, upper=upper) for _ in range(dim)], names)

    @classmethod
    def from_json(cls, data, names=None) -> "Prior":
        if isinstance(data, dict):
            data = [data]
        return cls([Marginal.model_validate(d) for d in data], names)

    @property
    def dim(self) -> int:
        return len(self.marginals)

    def sample(self, rng: np.random.Generator, k: int) -> np.ndarray:
        return np.column_stack([d.rvs(size=k, random_state=rng) for d in self._dists])

    def log_density(self, theta) -> np.ndarray:
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        if theta.shape[-1] != self.dim:
            raise DimensionMismatch(f"theta has {theta.shape[-1]} columns, prior has {self.dim}")
        return np.sum([d.logpdf(theta[:, i]) for i, d in enumerate(self._dists)], axis=0)


# ---------------------------------------------------------------------------
# Particles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParticleSet:
    theta: np.ndarray
    log_weights: np.ndarray
    outputs: np.ndarray
    loglik: np.ndarray
    gamma: float = 0.0

    @property
    def size(self) -> int:
        return self.theta.shape[0]

    def normalized_weights(self) -> np.ndarray:
        if not np.any(np.isfinite(self.log_weights)):
            raise AllParticlesFailed("every particle has zero weight")
        return np.exp(self.log_weights - logsumexp(self.log_weights))

    def ess(self) -> float:
        return ess_from_log(self.log_weights)


def ess(weights) -> float:
    """1 / sum(W_i^2) over normalized weights"""
    w = np.asarray(weights, dtype=float)
    total = w.sum()
    if not total > 0:
        raise AllParticlesFailed("ESS of an all-zero weight vector")
    W = w / total
    return float(1.0 / np.sum(W ** 2))


def ess_from_log(log_weights) -> float:
    log_weights = np.asarray(log_weights, dtype=float)
    if not np.any(np.isfinite(log_weights)):
        raise AllParticlesFailed("ESS of an all-zero weight vector")
    log_W = log_weights - logsumexp(log_weights)
    return float(np.exp(-logsumexp(2.0 * log_W)))


def _tempered(log_weights, loglik, zeta):
    if zeta == 0.0:
        return log_weights
    return np.where(np.isneginf(loglik), -np.inf, log_weights + zeta * loglik)


def select_temper_step(loglik, log_weights, ess_min: float, budget: float, tol: float = 1e-8) -> float:
    """
    Tempering increment in (0, budget] whose reweighted ESS meets ess_min.

    The returned value is the upper bisection bracket (ESS just at or below the
    target) unless the whole remaining budget keeps the ESS above target.
    """
    if not 0.0 < budget <= 1.0:
        raise ModelValidationError(f"remaining tempering budget must lie in (0, 1], got {budget}")
    loglik = np.asarray(loglik, dtype=float)
    log_weights = np.asarray(log_weights, dtype=float)

    if ess_from_log(_tempered(log_weights, loglik, budget)) >= ess_min:
        return budget
    lo, hi = 0.0, budget
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if ess_from_log(_tempered(log_weights, loglik, mid)) >= ess_min:
            lo = mid
        else:
            hi = mid
    return hi


def reweight(particles: ParticleSet, zeta: float) -> ParticleSet:
    """w_i <- w_i * exp(zeta * loglik_i), gamma <- gamma + zeta"""
    log_w = _tempered(particles.log_weights, particles.loglik, zeta)
    finite = np.isfinite(log_w)
    if finite.any():
        log_w = log_w - np.max(log_w[finite])
    return replace(particles, log_weights=log_w, gamma=particles.gamma + zeta)


def systematic_indices(weights: np.ndarray, u: float) -> np.ndarray:
    k = len(weights)
    positions = (u + np.arange(k)) / k
    cumulative = np.cumsum(weights)
    cumulative[-1] = 1.0
    return np.minimum(np.searchsorted(cumulative, positions, side="right"), k - 1)


def resample(particles: ParticleSet, rng: np.random.Generator) -> ParticleSet:
    """Systematic resampling; offspring all carry weight 1"""
    idx = systematic_indices(particles.normalized_weights(), rng.random())
    return ParticleSet(
        theta=particles.theta[idx],
        log_weights=np.zeros(particles.size),
        outputs=particles.outputs[idx],
        loglik=particles.loglik[idx],
        gamma=particles.gamma,
    )


# ---------------------------------------------------------------------------
# Model evaluation
# ---------------------------------------------------------------------------

def evaluate_batch(evaluator: Evaluator, theta: np.ndarray, workers: int = 1, chunk_size: Optional[int] = None) -> np.ndarray:
    """
    Evaluate the forward model for every row of theta, optionally split in
    chunks over a thread pool. A chunk that raises comes back as NaN rows.
    """
    m = theta.shape[0]
    if m == 0:
        return np.empty((0, 0))
    if chunk_size is None:
        chunk_size = m if workers <= 1 else int(math.ceil(m / workers))
    chunks = [theta[i:i + chunk_size] for i in range(0, m, chunk_size)]

    def run(chunk):
        try:
            out = np.asarray(evaluator(chunk), dtype=float)
            return out.reshape(chunk.shape[0], -1)
        except ModelFailure as e:
            logger.warning(f"⚠️ {e}; {chunk.shape[0]} particles get zero weight")
            return None
        except Exception as e:
            logger.warning(f"⚠️ Model evaluation failed for {chunk.shape[0]} particles: {e}")
            return None

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(c) for c in chunks]

    width = next((r.shape[1] for r in results if r is not None), 1)
    return np.vstack([r if r is not None else np.full((len(c), width), np.nan) for r, c in zip(results, chunks)])


def weighted_covariance(theta: np.ndarray, weights: np.ndarray) -> np.ndarray:
    cov = np.atleast_2d(np.cov(theta, rowvar=False, aweights=weights, bias=True))
    return cov


def _proposal_factor(theta, weights, scale) -> np.ndarray:
    cov = scale ** 2 * weighted_covariance(theta, weights)
    d = cov.shape[0]
    jitter = 0.0
    for _ in range(10):
        try:
            return np.linalg.cholesky(cov + jitter * np.eye(d))
        except np.linalg.LinAlgError:
            jitter = max(jitter * 10.0, 1e-10 * max(np.trace(cov) / d, 1e-12))
    raise ModelValidationError("proposal covariance is not positive definite")


def rejuvenate(particles: ParticleSet, evaluator: Evaluator, noise: NoiseModel, prior: Prior, steps: int,
               scale: float = config.SMC_PROPOSAL_SCALE, seed: Optional[int] = None, iteration: int = 0,
               workers: int = 1, chunk_size: Optional[int] = None):
    """
    Random-walk Metropolis moves targeting prior * likelihood**gamma_s. The
    proposal covariance is scale^2 times the weighted particle covariance.
    Weights are untouched. Returns (particles, acceptance rate, evaluations).
    """
    if steps <= 0:
        return particles, float("nan"), 0

    gamma = particles.gamma
    weights = particles.normalized_weights()
    factor = _proposal_factor(particles.theta, weights, scale)
    theta = particles.theta.copy()
    outputs = particles.outputs.copy()
    loglik = particles.loglik.copy()
    log_target = prior.log_density(theta) + _tempered(np.zeros(len(theta)), loglik, gamma)

    accepted = 0
    evaluations = 0
    k, d = theta.shape
    for s in range(steps):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(iteration, STREAM_REJUVENATE + s)))
        z = rng.standard_normal((k, d))
        log_u = np.log(rng.random(k))

        proposal = theta + z @ factor.T
        log_prior = prior.log_density(proposal)
        inside = np.isfinite(log_prior)

        prop_out = np.full_like(outputs, np.nan)
        if inside.any():
            prop_out[inside] = evaluate_batch(evaluator, proposal[inside], workers, chunk_size)
            evaluations += int(inside.sum())
        prop_loglik = np.where(inside, log_likelihood(noise, prop_out), -np.inf)
        prop_target = log_prior + _tempered(np.zeros(k), prop_loglik, gamma)

        with np.errstate(invalid="ignore"):
            accept = inside & (log_u < prop_target - log_target)
        theta[accept] = proposal[accept]
        outputs[accept] = prop_out[accept]
        loglik[accept] = prop_loglik[accept]
        log_target[accept] = prop_target[accept]
        accepted += int(accept.sum())

    moved = ParticleSet(theta, particles.log_weights, outputs, loglik, gamma)
    return moved, accepted / (k * steps), evaluations


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------

class SmcConfig(BaseModel):
    particles: int = Field(default=config.SMC_PARTICLES, ge=1)
    ess_min: Optional[float] = None  # defaults to the configured fraction of the particle count
    rejuvenation_steps: int = Field(default=config.SMC_REJUVENATION_STEPS, ge=0)
    seed: int = 0
    proposal_scale: float = Field(default=config.SMC_PROPOSAL_SCALE, gt=0.0)
    workers: int = Field(default=config.SMC_WORKERS, ge=1)
    chunk_size: Optional[int] = Field(default=None, ge=1)

    @model_validator(mode="after")
    def threshold(self):
        if self.ess_min is None:
            self.ess_min = config.SMC_ESS_MIN / config.SMC_PARTICLES * self.particles
        if not 0 < self.ess_min <= self.particles:
            raise ValueError(f"ess_min must lie in (0, particles], got {self.ess_min}")
        return self


@dataclass
class SmcResult:
    particles: ParticleSet
    theta_map: np.ndarray
    ess_history: List[float] = field(default_factory=list)
    zeta_schedule: List[float] = field(default_factory=list)
    acceptance_rates: List[float] = field(default_factory=list)
    evaluations: int = 0
    seed: int = 0
    names: List[str] = field(default_factory=list)

    @property
    def weights(self) -> np.ndarray:
        return self.particles.normalized_weights()


def map_estimate(particles: ParticleSet, prior: Prior) -> np.ndarray:
    """Highest-weight particle; equal weights are broken by the unnormalised log posterior"""
    W = particles.normalized_weights()
    tied = np.flatnonzero(W >= W.max() * (1.0 - 1e-12))
    if tied.size > 1:
        log_post = prior.log_density(particles.theta[tied]) + particles.loglik[tied]
        best = tied[int(np.argmax(log_post))]
    else:
        best = tied[0]
    return particles.theta[best].copy()


def run_smc(evaluator: Evaluator, prior: Prior, noise: NoiseModel, cfg: Optional[SmcConfig] = None) -> SmcResult:
    cfg = cfg or SmcConfig()
    k = cfg.particles

    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0, STREAM_INIT)))
    theta = prior.sample(rng, k)
    outputs = evaluate_batch(evaluator, theta, cfg.workers, cfg.chunk_size)
    loglik = log_likelihood(noise, outputs)
    failed = ~np.isfinite(loglik)
    if failed.all():
        raise AllParticlesFailed(f"all {k} initial particles failed to evaluate")
    if failed.any():
        logger.warning(f"⚠️ {int(failed.sum())} of {k} initial particles failed; their weight is zero")
    particles = ParticleSet(theta, np.where(failed, -np.inf, 0.0), outputs, loglik, 0.0)
    result = SmcResult(particles, theta[0], evaluations=k, seed=cfg.seed, names=list(prior.names))

    iteration = 0
    while particles.gamma < 1.0:
        iteration += 1
        budget = 1.0 - particles.gamma
        zeta = select_temper_step(particles.loglik, particles.log_weights, cfg.ess_min, budget)
        particles = reweight(particles, zeta)
        if zeta >= budget or particles.gamma > 1.0 - 1e-12:
            particles = replace(particles, gamma=1.0)
        if not np.any(np.isfinite(particles.log_weights)):
            raise AllParticlesFailed("every particle lost its weight during reweighting")

        current_ess = particles.ess()
        result.zeta_schedule.append(zeta)
        result.ess_history.append(current_ess)
        logger.info(f"🔍 SMC iter {iteration}: zeta={zeta:.4g} gamma={particles.gamma:.4g} ESS={current_ess:.1f}")

        if current_ess < cfg.ess_min:
            rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(iteration, STREAM_RESAMPLE)))
            particles = resample(particles, rng)
            logger.debug(f"🔍 resampled at ESS={current_ess:.1f}")
        if cfg.rejuvenation_steps > 0:
            particles, rate, evals = rejuvenate(particles, evaluator, noise, prior, cfg.rejuvenation_steps,
                                                cfg.proposal_scale, cfg.seed, iteration, cfg.workers, cfg.chunk_size)
            result.acceptance_rates.append(rate)
            result.evaluations += evals
            logger.debug(f"🔍 rejuvenated, acceptance {rate:.3f}")

    result.particles = particles
    result.theta_map = map_estimate(particles, prior)
    logger.info(f"✅ SMC finished after {iteration} iterations, {result.evaluations} evaluations")
    return result


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

def posterior_summary(result: SmcResult) -> dict:
    W = result.weights
    theta = result.particles.theta
    mean = W @ theta
    cov = weighted_covariance(theta, W)
    return {
        "names": result.names,
        "map": result.theta_map.tolist(),
        "mean": mean.tolist(),
        "covariance": cov.tolist(),
        "ess_history": result.ess_history,
        "zeta_schedule": result.zeta_schedule,
        "acceptance_rates": result.acceptance_rates,
        "evaluations": result.evaluations,
        "seed": result.seed,
    }


def write_posterior(result: SmcResult, csv_path, json_path=None) -> dict:
    names = result.names or [f"theta_{i}" for i in range(result.particles.theta.shape[1])]
    frame = pd.DataFrame(result.particles.theta, columns=names)
    frame["weight"] = result.weights
    Path(csv_path).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(csv_path, index=False, float_format="%.12g")
    summary = posterior_summary(result)
    if json_path is not None:
        with open(json_path, "w") as f:
            json.dump(summary, f, indent=2)
    return summary
