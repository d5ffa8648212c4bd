"""
Inverse 0D problem: fit every element parameter (branches and junctions) to an
observed trajectory with Levenberg-Marquardt on the stacked residual.

Boundary-condition rows (inlet flow, Windkessels) are left out of the stacked
system; the boundary conditions are known data here.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import scipy.linalg
from pydantic import BaseModel, Field
from scipy.interpolate import CubicSpline

from services import config
from services.errors import (
    DimensionMismatch,
    ModelValidationError,
    NewtonDivergence,
    NonConvergence,
    SingularNormalEquations,
)
from services.forward_solver import IntegratorConfig, build_system, run_cycles
from services.lpn_model import (
    ElementParams,
    LpnModel,
    Trajectory,
    close_cycle,
    save_model,
    spec_with_params,
)

logger = logging.getLogger(__name__)


class LmConfig(BaseModel):
    initial_damping: float = Field(default=config.LM_INITIAL_DAMPING, gt=0.0)
    tol_grad: float = Field(default=config.LM_TOL_GRAD, gt=0.0)
    tol_inc: float = Field(default=config.LM_TOL_INC, gt=0.0)
    max_iters: int = Field(default=config.LM_MAX_ITERS, ge=1)
    lower_bound: Optional[float] = None  # applied at export only
    freeze: List[str] = []  # field names ("S") or parameter names ("branch1.S")
    row_scaling: bool = True

    def freeze_mask(self, alpha: ElementParams) -> np.ndarray:
        names = alpha.names()
        mask = alpha.mask_for([f for f in self.freeze if "." not in f])
        for item in self.freeze:
            if "." in item:
                if item not in names:
                    raise ModelValidationError(f"cannot freeze unknown parameter '{item}'")
                mask[names.index(item)] = True
        return mask


@dataclass
class LmReport:
    alpha: ElementParams
    iterations: int
    grad_norm: float
    inc_norm: float
    residual_sum: float
    converged: bool
    grad_history: List[float] = field(default_factory=list)
    frozen: List[str] = field(default_factory=list)
    retried_with_frozen_stenosis: bool = False

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "grad_norm": self.grad_norm,
            "inc_norm": self.inc_norm,
            "residual_sum": self.residual_sum,
            "converged": self.converged,
            "grad_history": self.grad_history,
            "frozen": self.frozen,
            "retried_with_frozen_stenosis": self.retried_with_frozen_stenosis,
        }


# ---------------------------------------------------------------------------
# Observations
# ---------------------------------------------------------------------------

def spline_derivative(traj: Trajectory, n_resample: int = 100, period: Optional[float] = None) -> Trajectory:
    """
    Periodic cubic spline through each unknown, differentiated analytically and
    resampled at n_resample uniform points of the cycle (end point excluded).
    """
    t = np.asarray(traj.times, dtype=float)
    y = np.asarray(traj.y, dtype=float)
    if t.size < 4:
        raise ModelValidationError(f"need at least 4 samples per unknown, got {t.size}")

    span = t[-1] - t[0]
    if period is not None and span < period * (1.0 - 1e-9):
        t = np.append(t, t[0] + period)
        y = np.vstack([y, y[:1]])
    else:
        y = close_cycle(y, "trajectory")
        period = span

    spline = CubicSpline(t, y, axis=0, bc_type="periodic")
    t_new = t[0] + period * np.arange(n_resample) / n_resample
    return Trajectory(t_new, spline(t_new), spline(t_new, 1), traj.columns)


def row_weights(model: LpnModel, y: np.ndarray) -> np.ndarray:
    """1 / RMS of the observed inlet pressure or flow of each row's element"""
    rms = np.sqrt(np.mean(y[:, model.row_ref_unknown] ** 2, axis=0))
    return np.where(rms > 0, 1.0 / np.where(rms > 0, rms, 1.0), 1.0)


@dataclass(frozen=True)
class ObservationSet:
    times: np.ndarray
    y: np.ndarray
    ydot: np.ndarray
    weights: Optional[np.ndarray] = None

    @property
    def n_obs(self) -> int:
        return len(self.times)

    @classmethod
    def from_trajectory(cls, traj: Trajectory, model: Optional[LpnModel] = None, n_resample: Optional[int] = 100,
                        row_scaling: bool = True, period: Optional[float] = None) -> "ObservationSet":
        if model is not None and traj.columns and tuple(traj.columns) != tuple(model.unknown_names()):
            traj = traj.with_columns(model.unknown_names())
        if traj.ydot is None or n_resample is not None:
            if traj.ydot is not None:
                logger.info("🔍 Recomputing derivatives from the resampled spline")
            traj = spline_derivative(traj, n_resample or 100, period)
        weights = row_weights(model, traj.y) if (model is not None and row_scaling) else None
        return cls(traj.times, traj.y, traj.ydot, weights)


# ---------------------------------------------------------------------------
# Stacked system
# ---------------------------------------------------------------------------

def stack_system(model: LpnModel, alpha, obs: ObservationSet, free: Optional[np.ndarray] = None):
    """
    Residual of every interior element row at every observed time, stacked time
    major, and its Jacobian with respect to the free element parameters.
    """
    values = alpha.values if isinstance(alpha, ElementParams) else np.asarray(alpha, dtype=float)
    if values.shape != (model.n_params,):
        raise DimensionMismatch(f"alpha has shape {values.shape}, expected ({model.n_params},)")
    if obs.y.shape[1] != model.n_unknowns or obs.ydot.shape != obs.y.shape:
        raise DimensionMismatch(f"observations have {obs.y.shape[1]} unknowns, model has {model.n_unknowns}")
    free = np.ones(model.n_params, dtype=bool) if free is None else free

    system = build_system(model, values)
    E, F = system.E[0], system.F[0]
    r = obs.ydot @ E.T + obs.y @ F.T
    if system.stenosis is not None:
        r = r + system.stenosis.evaluate(obs.y, obs.ydot, model.n_unknowns)[0]

    J = np.zeros((obs.n_obs, model.n_unknowns, model.n_params))
    for element in model.elements:
        if element.is_boundary:
            continue
        part = element.param_jacobian(values, obs.y, obs.ydot)
        J[:, part.rows[:, None], part.params[None, :]] += part.J

    rows = ~model.row_is_boundary
    r = r[:, rows]
    J = J[:, rows][:, :, free]
    if obs.weights is not None:
        w = obs.weights[rows]
        r = r * w
        J = J * w[None, :, None]
    return r.reshape(-1), J.reshape(-1, int(free.sum()))


def damped_step(J: np.ndarray, r: np.ndarray, damping: float) -> np.ndarray:
    """Solve (J^T J + damping * diag(J^T J)) delta = -J^T r"""
    A = J.T @ J
    g = J.T @ r
    diag = np.diag(A)
    M = A + damping * np.diag(diag)
    # columns without information get a tiny ridge so the step stays defined
    empty = diag <= 0.0
    M[empty, empty] += 1e-12 * max(float(diag.max(initial=0.0)), 1.0)
    try:
        delta = scipy.linalg.solve(M, -g, assume_a="sym")
    except (scipy.linalg.LinAlgError, ValueError) as e:
        raise SingularNormalEquations(f"damped normal equations could not be solved: {e}")
    if not np.all(np.isfinite(delta)):
        raise SingularNormalEquations("damped normal equations produced a non-finite step")
    return delta


def lm_optimize(model: LpnModel, alpha0, obs: ObservationSet, cfg: Optional[LmConfig] = None) -> LmReport:
    """Levenberg-Marquardt on the stacked residual with the gradient-ratio damping update"""
    cfg = cfg or LmConfig()
    if not isinstance(alpha0, ElementParams):
        alpha0 = ElementParams.from_model(model).with_values(alpha0)
    free = ~cfg.freeze_mask(alpha0)
    if not free.any():
        raise ModelValidationError("every element parameter is frozen")
    names = alpha0.names()
    frozen = [n for n, f in zip(names, free) if not f]

    alpha = alpha0.values.copy()
    damping = cfg.initial_damping
    prev_grad = None
    best_alpha, best_sum = alpha.copy(), np.inf
    history: List[float] = []
    grad_norm = inc_norm = np.inf
    converged = False
    iterations = 0

    logger.info(f"🔍 LM: {int(free.sum())} free parameters, {obs.n_obs} observation times")
    for it in range(1, cfg.max_iters + 1):
        iterations = it
        r, J = stack_system(model, alpha, obs, free)
        residual_sum = float(r @ r)
        if residual_sum < best_sum:
            best_alpha, best_sum = alpha.copy(), residual_sum

        grad_norm = float(np.linalg.norm(J.T @ r))
        history.append(grad_norm)
        if prev_grad is not None and prev_grad > 0.0:
            damping *= grad_norm / prev_grad
        prev_grad = grad_norm

        delta = damped_step(J, r, damping)
        alpha[free] += delta
        inc_norm = float(np.linalg.norm(delta))
        logger.debug(f"🔍 LM iter {it}: S={residual_sum:.4e} |g|={grad_norm:.3e} |d|={inc_norm:.3e} lambda={damping:.3e}")

        if grad_norm < cfg.tol_grad and inc_norm < cfg.tol_inc:
            converged = True
            break

    r, _ = stack_system(model, alpha, obs, free)
    final_sum = float(r @ r)
    if not converged:
        if best_sum < final_sum:
            alpha, final_sum = best_alpha, best_sum
        logger.warning(f"⚠️ LM stopped after {iterations} iterations without meeting both tolerances")
    else:
        logger.info(f"✅ LM converged in {iterations} iterations (S={final_sum:.4e})")

    return LmReport(
        alpha=alpha0.with_values(alpha),
        iterations=iterations,
        grad_norm=grad_norm,
        inc_norm=inc_norm,
        residual_sum=final_sum,
        converged=converged,
        grad_history=history,
        frozen=frozen,
    )


def optimize_with_forward_check(model: LpnModel, alpha0, obs: ObservationSet, cfg: Optional[LmConfig] = None,
                                integrator: Optional[IntegratorConfig] = None) -> LmReport:
    """
    Optimize, then run the optimized model forward. If that run fails, optimize
    again with every stenosis coefficient frozen at its initial value.
    """
    cfg = cfg or LmConfig()
    report = lm_optimize(model, alpha0, obs, cfg)
    try:
        run_cycles(model, report.alpha, cfg=integrator)
        return report
    except (NewtonDivergence, NonConvergence) as e:
        logger.warning(f"⚠️ Optimized model failed forward ({e}); retrying with stenosis frozen")

    retry_cfg = cfg.model_copy(update={"freeze": list(cfg.freeze) + ["S"]})
    report = lm_optimize(model, alpha0, obs, retry_cfg)
    report.retried_with_frozen_stenosis = True
    run_cycles(model, report.alpha, cfg=integrator)
    return report


def export_optimized(model: LpnModel, report: LmReport, path, lower_bound: Optional[float] = None):
    """Write the model file with the fitted parameters and an lm_report block"""
    values = report.alpha.values
    if lower_bound is not None:
        values = np.maximum(values, lower_bound)
    spec = spec_with_params(model, values)
    save_model(spec, path, extra={"lm_report": report.to_dict()})
    logger.info(f"✅ Optimized model written to {path}")
    return spec
