"""
Forward 0D solver: generalized-alpha time integration of

    E . ydot + F . y + c(y, ydot) = 0

with Newton-Raphson at every step, steady-state initialization and
run-to-periodicity over whole cardiac cycles.

The solver works on a `DaeSystem` that holds a batch of B systems sharing
the same network and element parameters but differing in their Windkessel
values, so a population of SMC particles is integrated in one pass.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from services import config
from services.elements import KIND_QQ, KIND_QQDOT, Windkessel, scatter
from services.errors import DimensionMismatch, NewtonDivergence, NonConvergence, NonPeriodic
from services.lpn_model import LpnModel, Trajectory, WindkesselParamVector, alpha_values

logger = logging.getLogger(__name__)

# relative increment below which a Newton iteration is considered stalled at round-off
STAGNATION_TOL = 1e-13


class IntegratorConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    rho_inf: float = Field(default=config.RHO_INF, ge=0.0, le=1.0)
    steps_per_cycle: int = Field(default=config.STEPS_PER_CYCLE, ge=1)
    time_step: Optional[float] = Field(default=None, gt=0.0)
    max_newton_iters: int = Field(default=config.NEWTON_MAX_ITERS, ge=1)
    newton_abs_tol: float = Field(default=config.NEWTON_TOL, gt=0.0)
    cycles_max: int = Field(default=config.CYCLES_MAX, ge=1)
    periodicity_tol: float = Field(default=config.PERIODICITY_TOL, gt=0.0)

    @property
    def alpha_m(self) -> float:
        return (3.0 - self.rho_inf) / (2.0 * (1.0 + self.rho_inf))

    @property
    def alpha_f(self) -> float:
        return 1.0 / (1.0 + self.rho_inf)

    @property
    def gamma(self) -> float:
        return 0.5 + self.alpha_m - self.alpha_f

    def steps_for(self, period: float) -> int:
        if self.time_step is not None:
            return max(1, int(round(period / self.time_step)))
        return self.steps_per_cycle


@dataclass(frozen=True)
class SteadyState:
    y: np.ndarray
    converged: bool
    residual_norm: float = 0.0


class StenosisKernel:
    """
    Vectorised stenosis nonlinearity. Each term adds to one residual row

        KIND_QQ     coeff * |y_q| * y_q
        KIND_QQDOT  coeff * |y_q| * ydot_q
    """

    def __init__(self, rows, cols, kinds, coeffs):
        self.rows = np.asarray(rows, dtype=int)
        self.cols = np.asarray(cols, dtype=int)
        self.kinds = np.asarray(kinds, dtype=int)
        self.coeffs = np.asarray(coeffs, dtype=float)

    @classmethod
    def from_terms(cls, terms) -> Optional["StenosisKernel"]:
        if not terms:
            return None
        return cls([t.row for t in terms], [t.col for t in terms], [t.kind for t in terms], [t.coeff for t in terms])

    def evaluate(self, y: np.ndarray, ydot: np.ndarray, n: int):
        B = y.shape[0]
        q = y[:, self.cols]
        qd = ydot[:, self.cols]
        a = np.abs(q)
        qq = self.kinds == KIND_QQ

        c = np.zeros((B, n))
        np.add.at(c, (slice(None), self.rows), self.coeffs * a * np.where(qq, q, qd))

        dc_dy = np.zeros((B, n, n))
        np.add.at(dc_dy, (slice(None), self.rows, self.cols),
                  self.coeffs * np.where(qq, 2.0 * a, np.sign(q) * qd))

        dc_dydot = np.zeros((B, n, n))
        np.add.at(dc_dydot, (slice(None), self.rows, self.cols),
                  np.where(self.kinds == KIND_QQDOT, self.coeffs * a, 0.0))
        return c, dc_dy, dc_dydot


class DaeSystem:
    """Batch of B systems E . ydot + F . y + source(t) + c_stenosis(y, ydot) = 0"""

    def __init__(self, E, F, source: Callable[[float], np.ndarray], stenosis: Optional[StenosisKernel] = None,
                 steady_source: Optional[np.ndarray] = None, kinds: Optional[np.ndarray] = None):
        E = np.asarray(E, dtype=float)
        F = np.asarray(F, dtype=float)
        if E.ndim == 2:
            E = E[None]
        if F.ndim == 2:
            F = F[None]
        if E.shape != F.shape or E.shape[1] != E.shape[2]:
            raise DimensionMismatch(f"E {E.shape} and F {F.shape} must be matching square batches")
        self.E = E
        self.F = F
        self.source = source
        self.stenosis = stenosis
        self.steady_source = steady_source
        self.kinds = kinds
        self._inverse_cache: Dict[float, np.ndarray] = {}

    @property
    def batch_size(self) -> int:
        return self.E.shape[0]

    @property
    def size(self) -> int:
        return self.E.shape[1]

    @property
    def is_linear(self) -> bool:
        return self.stenosis is None

    def take(self, idx) -> "DaeSystem":
        sub = DaeSystem(self.E[idx], self.F[idx], self.source, self.stenosis, self.steady_source, self.kinds)
        sub._inverse_cache = {key: inv[idx] for key, inv in self._inverse_cache.items()}
        return sub

    def linearize(self, y, ydot, t, source=None):
        """Residual and the nonlinear-term derivatives at a batch of states"""
        src = self.source(t) if source is None else source
        r = np.einsum("bij,bj->bi", self.E, ydot) + np.einsum("bij,bj->bi", self.F, y) + src
        if self.stenosis is None:
            return r, None, None
        c, dc_dy, dc_dydot = self.stenosis.evaluate(y, ydot, self.size)
        return r + c, dc_dy, dc_dydot

    def residual(self, y, ydot, t):
        return self.linearize(y, ydot, t)[0]

    def iteration_inverse(self, cfg: IntegratorConfig, dt: float) -> Optional[np.ndarray]:
        """Inverse of the constant iteration matrix of a linear system, cached per time step"""
        if not self.is_linear:
            return None
        if dt not in self._inverse_cache:
            K = cfg.alpha_m * self.E + cfg.alpha_f * cfg.gamma * dt * self.F
            inv, ok = _invert_batch(K)
            self._inverse_cache[dt] = inv
        return self._inverse_cache[dt]


def _solve_batch(K: np.ndarray, rhs: np.ndarray):
    """Solve K x = rhs for each member; singular members come back as NaN"""
    try:
        return np.linalg.solve(K, rhs[..., None])[..., 0], np.ones(K.shape[0], dtype=bool)
    except np.linalg.LinAlgError:
        x = np.full_like(rhs, np.nan)
        ok = np.zeros(K.shape[0], dtype=bool)
        for b in range(K.shape[0]):
            try:
                x[b] = np.linalg.solve(K[b], rhs[b])
                ok[b] = True
            except np.linalg.LinAlgError:
                pass
        return x, ok


def _invert_batch(K: np.ndarray):
    try:
        return np.linalg.inv(K), np.ones(K.shape[0], dtype=bool)
    except np.linalg.LinAlgError:
        inv = np.full_like(K, np.nan)
        ok = np.zeros(K.shape[0], dtype=bool)
        for b in range(K.shape[0]):
            try:
                inv[b] = np.linalg.inv(K[b])
                ok[b] = True
            except np.linalg.LinAlgError:
                pass
        return inv, ok


# ---------------------------------------------------------------------------
# System assembly
# ---------------------------------------------------------------------------

def build_system(model: LpnModel, alpha=None, thetas=None, theta: Optional[WindkesselParamVector] = None) -> DaeSystem:
    """
    Assemble the batched system for one element parameter vector and B
    Windkessel parameter vectors (rows of `thetas`). Only the Windkessel rows
    differ between batch members.
    """
    values = model.alpha_geometric if alpha is None else alpha_values(model, alpha)
    if theta is None:
        theta = WindkesselParamVector.from_model(model)
    thetas = theta.theta[None] if thetas is None else np.atleast_2d(np.asarray(thetas, dtype=float))
    n = model.n_unknowns
    zero = np.zeros(n)

    interior = [e for e in model.elements if not isinstance(e, Windkessel)]
    parts = [e.contribution(values, zero, zero, t=0.0) for e in interior]
    E0, F0, _, _, _ = scatter(parts, n)

    B = thetas.shape[0]
    E = np.repeat(E0[None], B, axis=0)
    F = np.repeat(F0[None], B, axis=0)
    Rp, Rd, C = theta.decode_batch(thetas)

    base = np.zeros(n)
    for wk in model.windkessels:
        row = wk.rows[0]
        p, q = wk.unknowns
        k = wk.outlet_index
        E[:, row, p] = -Rd[:, k] * C[:, k]
        E[:, row, q] = Rp[:, k] * Rd[:, k]
        F[:, row, p] = -1.0
        F[:, row, q] = Rp[:, k] + Rd[:, k]
        base[row] = wk.Pref

    inlet_row = 0
    inflow = model.inflow

    def source(t):
        src = base.copy()
        src[inlet_row] = -inflow(t)
        return src

    steady = base.copy()
    steady[inlet_row] = -inflow.mean()

    terms = [term for e in model.elements for term in e.stenosis_terms(values)]
    kinds = np.tile([0, 1], len(model.nodes))
    return DaeSystem(E, F, source, StenosisKernel.from_terms(terms), steady, kinds)


# ---------------------------------------------------------------------------
# Steady state
# ---------------------------------------------------------------------------

def solve_steady_batch(system: DaeSystem, cfg: IntegratorConfig):
    """Newton solve of r(y, 0) = 0 with the steady (mean) source for every member"""
    B, n = system.batch_size, system.size
    src = system.steady_source if system.steady_source is not None else system.source(0.0)
    y = np.zeros((B, n))
    zero = np.zeros((B, n))
    settled = np.zeros(B, dtype=bool)
    failed = np.zeros(B, dtype=bool)
    norm = np.full(B, np.inf)

    for it in range(cfg.max_newton_iters + 1):
        r, dc_dy, _ = system.linearize(y, zero, 0.0, source=src)
        norm = np.max(np.abs(r), axis=1)
        failed |= ~np.isfinite(norm)
        active = ~(settled | (norm < cfg.newton_abs_tol)) & ~failed
        if not active.any():
            break
        if it == cfg.max_newton_iters:
            failed |= active
            break
        K = system.F[active] if dc_dy is None else system.F[active] + dc_dy[active]
        dy, ok = _solve_batch(K, -r[active])
        idx = np.flatnonzero(active)
        failed[idx[~ok]] = True
        y[idx[ok]] += dy[ok]
        stalled = np.max(np.abs(dy), axis=1) <= STAGNATION_TOL * np.maximum(1.0, np.max(np.abs(y[idx]), axis=1))
        settled[idx[ok & stalled]] = True

    y[failed] = np.nan
    return y, ~failed, norm


def solve_steady(model: LpnModel, alpha=None, theta: Optional[WindkesselParamVector] = None,
                 cfg: Optional[IntegratorConfig] = None) -> SteadyState:
    cfg = cfg or IntegratorConfig()
    system = build_system(model, alpha, theta=theta)
    y, ok, norm = solve_steady_batch(system, cfg)
    if not ok[0]:
        logger.error(f"❌ Steady-state solve failed (|r|={norm[0]:.3e})")
        raise NonConvergence(cfg.max_newton_iters, float(norm[0]), "Steady-state solve did not converge")
    return SteadyState(y=y[0], converged=True, residual_norm=float(norm[0]))


# ---------------------------------------------------------------------------
# Time stepping
# ---------------------------------------------------------------------------

def newton_step_batch(system: DaeSystem, y_n, ydot_n, t_n: float, dt: float, cfg: IntegratorConfig):
    """
    One generalized-alpha step for every member of the batch.

    Returns (y, ydot, failed, stage residual norm). Failed members carry NaN.
    """
    am, af, gamma = cfg.alpha_m, cfg.alpha_f, cfg.gamma
    B = y_n.shape[0]

    ydot = (gamma - 1.0) / gamma * ydot_n
    y = y_n.copy()
    t_af = t_n + af * dt
    src = system.source(t_af)
    K_inv = system.iteration_inverse(cfg, dt)

    settled = np.zeros(B, dtype=bool)
    failed = np.zeros(B, dtype=bool)
    norm = np.full(B, np.inf)

    for it in range(cfg.max_newton_iters + 1):
        y_af = y_n + af * (y - y_n)
        ydot_am = ydot_n + am * (ydot - ydot_n)
        r, dc_dy, dc_dydot = system.linearize(y_af, ydot_am, t_af, source=src)
        norm = np.max(np.abs(r), axis=1)
        failed |= ~np.isfinite(norm)
        active = ~(settled | (norm < cfg.newton_abs_tol)) & ~failed
        if not active.any():
            break
        if it == cfg.max_newton_iters:
            failed |= active
            break

        idx = np.flatnonzero(active)
        if K_inv is not None:
            delta = -np.einsum("bij,bj->bi", K_inv[idx], r[idx])
            ok = np.all(np.isfinite(delta), axis=1)
        else:
            K = am * (system.E[idx] + dc_dydot[idx]) + af * gamma * dt * (system.F[idx] + dc_dy[idx])
            delta, ok = _solve_batch(K, -r[idx])
        failed[idx[~ok]] = True
        idx, delta = idx[ok], delta[ok]

        ydot[idx] += delta
        y[idx] += gamma * dt * delta

        stalled = np.max(np.abs(delta), axis=1) <= STAGNATION_TOL * np.maximum(1.0, np.max(np.abs(ydot[idx]), axis=1))
        # linear members are re-checked too, so the cached inverse acts as iterative refinement
        settled[idx[stalled]] = True

    y[failed] = np.nan
    ydot[failed] = np.nan
    return y, ydot, failed, norm


def step(model: LpnModel, alpha, theta: Optional[WindkesselParamVector], y_n, ydot_n, t_n: float, dt: float,
         cfg: Optional[IntegratorConfig] = None, system: Optional[DaeSystem] = None):
    """Single generalized-alpha step of one network; raises NewtonDivergence on failure"""
    cfg = cfg or IntegratorConfig()
    system = system or build_system(model, alpha, theta=theta)
    y, ydot, failed, norm = newton_step_batch(system, np.atleast_2d(y_n), np.atleast_2d(ydot_n), t_n, dt, cfg)
    if failed[0]:
        raise NewtonDivergence(cfg.max_newton_iters, float(norm[0]), t_n + dt)
    return y[0], ydot[0]


def integrate(system: DaeSystem, y0, ydot0, t0: float, dt: float, n_steps: int, cfg: IntegratorConfig):
    """
    Integrate n_steps from (y0, ydot0). Returns states of shape (B, n_steps + 1, N)
    including the initial one, the failure mask, the time of failure and the
    largest stage residual per member.
    """
    y0 = np.atleast_2d(np.asarray(y0, dtype=float))
    ydot0 = np.atleast_2d(np.asarray(ydot0, dtype=float))
    B, n = y0.shape
    ys = np.empty((B, n_steps + 1, n))
    ydots = np.empty_like(ys)
    ys[:, 0], ydots[:, 0] = y0, ydot0
    failed = ~np.all(np.isfinite(y0), axis=1)
    fail_time = np.full(B, np.nan)
    max_res = np.zeros(B)

    y, ydot = y0.copy(), ydot0.copy()
    for k in range(n_steps):
        y, ydot, f, norm = newton_step_batch(system, y, ydot, t0 + k * dt, dt, cfg)
        newly = f & ~failed
        fail_time[newly] = t0 + (k + 1) * dt
        failed |= f
        max_res = np.where(failed, max_res, np.maximum(max_res, norm))
        ys[:, k + 1], ydots[:, k + 1] = y, ydot

    ys[failed] = np.nan
    ydots[failed] = np.nan
    return ys, ydots, failed, fail_time, max_res


def cycle_change(previous: np.ndarray, current: np.ndarray, kinds: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Max relative change of any unknown's waveform between two cycles, per member.
    Each unknown is scaled by its own amplitude, floored at 1e-6 of the largest
    amplitude of its kind (pressure or flow).
    """
    scale = np.max(np.abs(previous), axis=1)
    floor = np.zeros_like(scale)
    kinds = np.zeros(scale.shape[1], dtype=int) if kinds is None else kinds
    for kind in np.unique(kinds):
        cols = kinds == kind
        floor[:, cols] = 1e-6 * np.max(scale[:, cols], axis=1, keepdims=True) + 1e-12
    diff = np.max(np.abs(current - previous), axis=1)
    return np.max(diff / np.maximum(scale, floor), axis=1)


@dataclass(frozen=True)
class BatchForwardResult:
    times: np.ndarray
    y: np.ndarray
    ydot: np.ndarray
    cycles: np.ndarray
    periodic: np.ndarray
    change: np.ndarray
    failed: np.ndarray
    fail_time: np.ndarray
    max_stage_residual: np.ndarray


def run_cycles_batch(system: DaeSystem, period: float, cfg: Optional[IntegratorConfig] = None,
                     y0=None, ydot0=None, t0: float = 0.0) -> BatchForwardResult:
    """
    Integrate whole cycles for every member until its cycle waveform is
    periodic or cycles_max is reached. Members that converge stop integrating.
    """
    cfg = cfg or IntegratorConfig()
    B, n = system.batch_size, system.size
    n_steps = cfg.steps_for(period)
    dt = period / n_steps

    if y0 is None:
        y_start, ok, _ = solve_steady_batch(system, cfg)
        failed = ~ok
    else:
        y_start = np.broadcast_to(np.asarray(y0, dtype=float), (B, n)).copy()
        failed = ~np.all(np.isfinite(y_start), axis=1)
    ydot_start = np.zeros((B, n)) if ydot0 is None else np.broadcast_to(np.asarray(ydot0, dtype=float), (B, n)).copy()

    out_y = np.full((B, n_steps + 1, n), np.nan)
    out_ydot = np.full_like(out_y, np.nan)
    previous = np.repeat(y_start[:, None, :], n_steps + 1, axis=1)
    cycles = np.zeros(B, dtype=int)
    periodic = np.zeros(B, dtype=bool)
    change = np.full(B, np.inf)
    fail_time = np.full(B, np.nan)
    max_res = np.full(B, np.nan)

    active = np.flatnonzero(~failed)
    sub = system.take(active)
    for cycle in range(1, cfg.cycles_max + 1):
        if active.size == 0:
            break
        t_start = t0 + (cycle - 1) * period
        ys, ydots, f, ft, res = integrate(sub, y_start[active], ydot_start[active], t_start, dt, n_steps, cfg)

        ch = cycle_change(previous[active], ys, system.kinds)
        previous[active] = ys
        out_y[active], out_ydot[active] = ys, ydots
        cycles[active] = cycle
        change[active] = ch
        max_res[active] = res
        y_start[active], ydot_start[active] = ys[:, -1], ydots[:, -1]

        failed[active[f]] = True
        fail_time[active[f]] = ft[f]
        done = (ch < cfg.periodicity_tol) & ~f
        periodic[active[done]] = True

        keep = ~(done | f)
        if not keep.all():
            active = active[keep]
            sub = sub.take(np.flatnonzero(keep))
        logger.debug(f"🔍 cycle {cycle}: {active.size} members still running")

    out_y[failed] = np.nan
    out_ydot[failed] = np.nan
    times = t0 + dt * np.arange(n_steps + 1)
    return BatchForwardResult(times, out_y, out_ydot, cycles, periodic, change, failed, fail_time, max_res)


@dataclass(frozen=True)
class ForwardResult:
    trajectory: Trajectory
    cycles: int
    periodic: bool
    change: float
    max_stage_residual: float


def run_cycles(model: LpnModel, alpha=None, theta: Optional[WindkesselParamVector] = None,
               cfg: Optional[IntegratorConfig] = None, y0=None, ydot0=None, strict: bool = False) -> ForwardResult:
    """
    Run the network to a periodic state and return its final cycle, both
    endpoints included. Non-periodic runs are returned with periodic=False and
    a warning unless strict is set.
    """
    cfg = cfg or IntegratorConfig()
    system = build_system(model, alpha, theta=theta)
    if y0 is None:
        y0 = solve_steady(model, alpha, theta, cfg).y

    batch = run_cycles_batch(system, model.period, cfg, y0=y0, ydot0=ydot0, t0=model.inflow.t0)
    if batch.failed[0]:
        logger.error(f"❌ Newton iteration failed at t={batch.fail_time[0]:.6g}")
        raise NewtonDivergence(cfg.max_newton_iters, float("nan"), float(batch.fail_time[0]))

    traj = Trajectory(batch.times, batch.y[0], batch.ydot[0], tuple(model.unknown_names()))
    result = ForwardResult(traj, int(batch.cycles[0]), bool(batch.periodic[0]), float(batch.change[0]),
                           float(batch.max_stage_residual[0]))
    if not result.periodic:
        if strict:
            raise NonPeriodic(result.cycles, result.change, result)
        logger.warning(f"⚠️ No periodic state after {result.cycles} cycles (change {result.change:.3e})")
    else:
        logger.info(f"✅ Periodic after {result.cycles} cycles (change {result.change:.2e})")
    return result
