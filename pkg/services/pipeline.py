"""
Two-run Windkessel calibration workflow.

    observations -> Run 1 (SMC, geometric model) -> theta_MAP
                 -> high-fidelity hand-off (request / response files)
                 -> LM optimization of every element parameter
                 -> Run 2 (SMC, optimized model) -> posterior

The high-fidelity evaluation is a file hand-off. It can be answered by a
remote service (HIFI_SERVICE_URL), by a designated surrogate 0D model, or by
hand, after which the workflow is resumed. Also provides observation
extraction, noise synthesis, error metrics and grid-evaluated posteriors.
"""

import hashlib
import io
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd
import requests
from pydantic import BaseModel, model_validator
from scipy.integrate import trapezoid
from scipy.interpolate import CubicSpline

from services import config
from services.errors import (
    DimensionMismatch,
    HandoffMissing,
    LpnError,
    ModelFailure,
    ModelValidationError,
    StageError,
    WorkspaceLocked,
)
from services.forward_solver import IntegratorConfig, build_system, run_cycles, run_cycles_batch
from services.inverse_lm import LmConfig, ObservationSet, export_optimized, optimize_with_forward_check
from services.lpn_model import (
    LpnModel,
    LpnModelSpec,
    Trajectory,
    WindkesselBc,
    WindkesselParamVector,
    close_cycle,
    encode_windkessel,
    load_model_spec,
    read_trajectory,
    spec_with_windkessels,
    write_trajectory,
)
from services.smc import NoiseModel, Prior, SmcConfig, log_likelihood, run_smc, write_posterior

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_AWAITING_HANDOFF = 2


# ---------------------------------------------------------------------------
# Observations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ObservationVector:
    """[P_in,min, P_in,max, Q_mean per outlet]"""

    values: np.ndarray
    names: List[str] = field(default_factory=list)

    @property
    def p_min(self) -> float:
        return float(self.values[0])

    @property
    def p_max(self) -> float:
        return float(self.values[1])

    @property
    def q_mean(self) -> np.ndarray:
        return self.values[2:]


def observation_names(model: LpnModel) -> List[str]:
    return ["P_in_min", "P_in_max"] + [f"Q_mean:{n}" for n in model.outlet_nodes]


def _closed_cycle(times: np.ndarray, y: np.ndarray, period: float):
    """Append the first sample one period later unless the cycle already includes it"""
    if times[-1] - times[0] < period * (1.0 - 1e-9):
        times = np.append(times, times[0] + period)
        y = np.concatenate([y, y[..., :1, :]], axis=-2)
    return times, y


def observations_from_states(model: LpnModel, times: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Observation vectors for states of shape (..., n_times, n_unknowns)"""
    p_col = model.unknown_index(model.inlet_node, "P")
    q_cols = [model.unknown_index(n, "Q") for n in model.outlet_nodes]
    p_in = y[..., p_col]
    times_c, y_c = _closed_cycle(np.asarray(times, dtype=float), y, model.period)
    span = times_c[-1] - times_c[0]
    q_mean = trapezoid(y_c[..., q_cols], times_c, axis=-2) / span
    return np.concatenate([np.min(p_in, axis=-1)[..., None], np.max(p_in, axis=-1)[..., None], q_mean], axis=-1)


def extract_observations(traj: Trajectory, model: LpnModel) -> ObservationVector:
    names = model.unknown_names()
    if traj.columns and tuple(traj.columns) != tuple(names):
        missing = {f"{model.inlet_node}:P"} | {f"{n}:Q" for n in model.outlet_nodes}
        missing -= set(traj.columns)
        if missing:
            raise DimensionMismatch(f"trajectory lacks columns {sorted(missing)}")
        traj = traj.with_columns(names)
    values = observations_from_states(model, traj.times, traj.y)
    return ObservationVector(values, observation_names(model))


def synthesize_noisy_observations(y_true, snr: float, seed: Optional[int] = None):
    """
    Additive Gaussian noise with sigma_i^2 = y_true_i^2 / SNR. The returned
    noise model takes its variances from the noisy observations.
    """
    if snr <= 0:
        raise ModelValidationError(f"SNR must be positive, got {snr}")
    y_true = np.asarray(y_true.values if isinstance(y_true, ObservationVector) else y_true, dtype=float)
    rng = np.random.default_rng(seed)
    y_obs = y_true + rng.standard_normal(y_true.shape) * np.abs(y_true) / np.sqrt(snr)
    return y_obs, NoiseModel.from_snr(y_obs, snr)


# ---------------------------------------------------------------------------
# Forward observation model
# ---------------------------------------------------------------------------

def expand_theta(theta: np.ndarray, coupling: Optional[List[List[int]]], n_out: int) -> np.ndarray:
    """Map free parameters (one per coupling group) onto every outlet"""
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    if coupling is None:
        if theta.shape[1] != n_out:
            raise DimensionMismatch(f"theta has {theta.shape[1]} entries for {n_out} outlets")
        return theta
    if theta.shape[1] != len(coupling):
        raise DimensionMismatch(f"theta has {theta.shape[1]} entries for {len(coupling)} coupling groups")
    full = np.empty((theta.shape[0], n_out))
    for g, outlets in enumerate(coupling):
        full[:, outlets] = theta[:, [g]]
    return full


def validate_coupling(coupling: Optional[List[List[int]]], n_out: int):
    if coupling is None:
        return
    flat = sorted(i for group in coupling for i in group)
    if flat != list(range(n_out)):
        raise ModelValidationError(f"coupling groups must cover outlets 0..{n_out - 1} exactly once")


class LpnObservationModel:
    """Evaluator theta -> observation vector through the batched forward solver"""

    def __init__(self, model: LpnModel, alpha=None, coupling: Optional[List[List[int]]] = None,
                 integrator: Optional[IntegratorConfig] = None, batch_size: int = 2000):
        self.model = model
        self.alpha = model.alpha_geometric if alpha is None else alpha
        self.theta = WindkesselParamVector.from_model(model)
        self.coupling = coupling
        validate_coupling(coupling, len(self.theta))
        self.integrator = integrator or IntegratorConfig()
        self.batch_size = batch_size

    @property
    def dim(self) -> int:
        return len(self.theta) if self.coupling is None else len(self.coupling)

    def parameter_names(self) -> List[str]:
        names = list(self.theta.names)
        if self.coupling is None:
            return [f"theta:{n}" for n in names]
        return ["theta:" + "+".join(names[i] for i in group) for group in self.coupling]

    def full_theta(self, theta) -> np.ndarray:
        return expand_theta(theta, self.coupling, len(self.theta))

    def trajectories(self, theta):
        full = self.full_theta(theta)
        system = build_system(self.model, self.alpha, full, self.theta)
        return run_cycles_batch(system, self.model.period, self.integrator, t0=self.model.inflow.t0)

    def __call__(self, theta) -> np.ndarray:
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        out = np.full((theta.shape[0], len(self.theta) + 2), np.nan)
        for start in range(0, theta.shape[0], self.batch_size):
            chunk = slice(start, start + self.batch_size)
            result = self.trajectories(theta[chunk])
            ok = ~result.failed
            out[chunk][ok] = observations_from_states(self.model, result.times, result.y[ok])
            if not ok.all():
                failures = [ModelFailure(t, ft) for t, ft in zip(theta[chunk][~ok], result.fail_time[~ok])]
                logger.warning(f"⚠️ {len(failures)} of {ok.size} forward runs failed, first: {failures[0]}")
            if (~result.periodic & ok).any():
                logger.debug(f"⚠️ {int((~result.periodic & ok).sum())} members not periodic after {self.integrator.cycles_max} cycles")
        return out

    def evaluate_one(self, theta) -> np.ndarray:
        """Observation vector of a single parameter vector; raises ModelFailure if the run fails"""
        theta = np.asarray(theta, dtype=float)
        result = self.trajectories(theta[None])
        if result.failed[0]:
            raise ModelFailure(self.full_theta(theta[None])[0], float(result.fail_time[0]))
        return observations_from_states(self.model, result.times, result.y[:1])[0]


# ---------------------------------------------------------------------------
# Error metrics
# ---------------------------------------------------------------------------

@dataclass
class ErrorReport:
    eps_p_max: float
    eps_q_max: float
    pressure_caps: Dict[str, float] = field(default_factory=dict)
    flow_caps: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "eps_p_max": self.eps_p_max,
            "eps_q_max": self.eps_q_max,
            "pressure_caps": self.pressure_caps,
            "flow_caps": self.flow_caps,
        }


def resample_periodic(traj: Trajectory, times: np.ndarray, period: float) -> Trajectory:
    t, y = _closed_cycle(np.asarray(traj.times, dtype=float), np.asarray(traj.y, dtype=float), period)
    y = close_cycle(y, "trajectory")
    spline = CubicSpline(t, y, axis=0, bc_type="periodic")
    tau = t[0] + np.mod(np.asarray(times, dtype=float) - t[0], period)
    # keep an end point of the cycle at the end rather than wrapping it to the start
    tau[np.isclose(np.asarray(times) - t[0], period)] = t[-1]
    return Trajectory(np.asarray(times, dtype=float), spline(tau), None, traj.columns)


def error_metrics(traj_lo: Trajectory, traj_hi: Trajectory, model: LpnModel) -> ErrorReport:
    """
    Maximum pressure error relative to the mean high-fidelity pressure at every
    cap (inlet and outlets), maximum flow error relative to the high-fidelity
    flow range at every outlet.
    """
    names = model.unknown_names()
    lo = traj_lo.with_columns(names) if traj_lo.columns and tuple(traj_lo.columns) != tuple(names) else traj_lo
    hi = traj_hi.with_columns(names) if traj_hi.columns and tuple(traj_hi.columns) != tuple(names) else traj_hi
    if lo.times.shape != hi.times.shape or not np.allclose(lo.times, hi.times):
        if hi.times.size >= lo.times.size:
            hi = resample_periodic(hi, lo.times, model.period)
        else:
            lo = resample_periodic(lo, hi.times, model.period)

    n_t = lo.times.size
    caps = [model.inlet_node] + list(model.outlet_nodes)
    pressure = {}
    for node in caps:
        col = model.unknown_index(node, "P")
        pressure[node] = float(n_t * np.max(np.abs(lo.y[:, col] - hi.y[:, col])) / np.sum(hi.y[:, col]))

    flow = {}
    for node in model.outlet_nodes:
        col = model.unknown_index(node, "Q")
        span = np.max(hi.y[:, col]) - np.min(hi.y[:, col])
        if span <= 0:
            logger.warning(f"⚠️ Zero flow range at outlet {node}; flow error undefined there")
            flow[node] = float("nan")
        else:
            flow[node] = float(np.max(np.abs(lo.y[:, col] - hi.y[:, col])) / span)

    q_values = [v for v in flow.values() if np.isfinite(v)]
    return ErrorReport(
        eps_p_max=float(np.mean(list(pressure.values()))),
        eps_q_max=float(np.mean(q_values)) if q_values else float("nan"),
        pressure_caps=pressure,
        flow_caps=flow,
    )


# ---------------------------------------------------------------------------
# Grid posterior
# ---------------------------------------------------------------------------

@dataclass
class GridPosterior:
    axes: List[np.ndarray]
    density: np.ndarray
    log_posterior: np.ndarray

    def cell_weights(self) -> np.ndarray:
        w = np.ones(self.density.shape)
        for i, axis in enumerate(self.axes):
            trap = np.full(axis.size, 1.0)
            trap[[0, -1]] = 0.5
            shape = [1] * len(self.axes)
            shape[i] = axis.size
            w = w * trap.reshape(shape)
        return w

    def argmax(self) -> np.ndarray:
        idx = np.unravel_index(int(np.argmax(self.density)), self.density.shape)
        return np.array([axis[i] for axis, i in zip(self.axes, idx)])

    def marginal(self, i: int) -> np.ndarray:
        """Marginal density on axis i, integrated by trapezoid over the other axes"""
        weighted = self.density
        for j, axis in enumerate(self.axes):
            if j == i:
                continue
            trap = np.full(axis.size, 1.0)
            trap[[0, -1]] = 0.5
            shape = [1] * len(self.axes)
            shape[j] = axis.size
            weighted = weighted * trap.reshape(shape)
        return weighted.sum(axis=tuple(j for j in range(len(self.axes)) if j != i))

    def to_frame(self, names: List[str]) -> pd.DataFrame:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        frame = pd.DataFrame({n: m.ravel() for n, m in zip(names, mesh)})
        frame["density"] = self.density.ravel()
        return frame


def grid_posterior(evaluator, axes: List[np.ndarray], noise: NoiseModel, prior: Optional[Prior] = None) -> GridPosterior:
    """
    Prior x likelihood at every grid point, normalised so the trapezoidal cell
    weights sum to one. A failed evaluation gives density 0.
    """
    axes = [np.asarray(a, dtype=float) for a in axes]
    mesh = np.meshgrid(*axes, indexing="ij")
    theta = np.column_stack([m.ravel() for m in mesh])
    outputs = np.asarray(evaluator(theta), dtype=float)
    log_post = log_likelihood(noise, outputs)
    failed = ~np.all(np.isfinite(outputs), axis=1)
    if failed.any():
        logger.warning(f"⚠️ {int(failed.sum())} grid points failed to evaluate; density set to 0")
    if prior is not None:
        log_post = log_post + prior.log_density(theta)
    if not np.any(np.isfinite(log_post)):
        raise ModelValidationError("posterior is zero on every grid point")

    log_post = log_post.reshape(mesh[0].shape)
    density = np.exp(log_post - np.max(log_post[np.isfinite(log_post)]))
    grid = GridPosterior(axes, density, log_post)
    grid.density = density / np.sum(density * grid.cell_weights())
    return grid


# ---------------------------------------------------------------------------
# Calibration case
# ---------------------------------------------------------------------------

class SynthesisSpec(BaseModel):
    trajectory: Optional[str] = None
    model: Optional[str] = None
    theta: Optional[List[float]] = None
    snr: float
    seed: Optional[int] = None  # defaults to the case noise seed

    @model_validator(mode="after")
    def one_source(self):
        if (self.trajectory is None) == (self.model is None):
            raise ValueError("synthesis needs exactly one of 'trajectory' or 'model'")
        return self


class ObservationSpec(BaseModel):
    file: Optional[str] = None
    y_obs: Optional[List[float]] = None
    snr: Optional[float] = None
    synthesize: Optional[SynthesisSpec] = None

    @model_validator(mode="after")
    def one_source(self):
        sources = [self.file is not None, self.y_obs is not None, self.synthesize is not None]
        if sum(sources) != 1:
            raise ValueError("observations need exactly one of 'file', 'y_obs' or 'synthesize'")
        if self.synthesize is None and (self.snr is None or self.snr <= 0):
            raise ValueError("observations from a file or vector need a positive 'snr'")
        return self


class Seeds(BaseModel):
    noise: int = 0
    run1: int = 1
    run2: int = 2


class CalibrationCase(BaseModel):
    model: str
    prior: Optional[Any] = None
    observations: ObservationSpec
    coupling: Optional[List[List[int]]] = None
    smc: SmcConfig = SmcConfig()
    lm: LmConfig = LmConfig()
    integrator: IntegratorConfig = IntegratorConfig()
    workspace: str = "workspace"
    surrogate_hifi: Optional[str] = None
    resample: int = 100
    seeds: Seeds = Seeds()


def load_case(path, overrides: Optional[dict] = None) -> CalibrationCase:
    """Read a case file; relative paths are taken relative to the case file"""
    base = Path(path).resolve().parent
    with open(path) as f:
        data = json.load(f)
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})

    def resolve(p):
        return p if p is None or os.path.isabs(p) else str(base / p)

    data["model"] = resolve(data.get("model"))
    data["workspace"] = resolve(data.get("workspace", "workspace"))
    data["surrogate_hifi"] = resolve(data.get("surrogate_hifi"))
    obs = data.get("observations", {})
    obs["file"] = resolve(obs.get("file"))
    if obs.get("synthesize"):
        obs["synthesize"]["trajectory"] = resolve(obs["synthesize"].get("trajectory"))
        obs["synthesize"]["model"] = resolve(obs["synthesize"].get("model"))
    try:
        case = CalibrationCase.model_validate(data)
    except ValueError as e:
        raise ModelValidationError(f"{path}: {e}")
    for p in (case.model, case.observations.file, case.surrogate_hifi):
        if p is not None and not os.path.exists(p):
            raise ModelValidationError(f"referenced file does not exist: {p}")
    return case


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class WorkspaceLock:
    """Exclusive lock file guarding one workspace"""

    def __init__(self, workspace: Path):
        self.path = workspace / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise WorkspaceLocked(f"workspace {self.path.parent} is in use (remove {self.path} if stale)")
        with os.fdopen(fd, "w") as f:
            f.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


@dataclass
class CalibrationOutcome:
    status: str
    workspace: Path
    artifacts: Dict[str, str] = field(default_factory=dict)
    report: dict = field(default_factory=dict)

    @property
    def exit_code(self) -> int:
        return EXIT_AWAITING_HANDOFF if self.status == "awaiting_handoff" else EXIT_OK


def _stage(name):
    def wrap(fn):
        def run(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except StageError:
                raise
            except (LpnError, requests.RequestException, OSError, ValueError) as e:
                logger.error(f"❌ Stage '{name}' failed: {e}")
                raise StageError(name, e)
        return run
    return wrap


@_stage("observations")
def prepare_observations(case: CalibrationCase, model: LpnModel, ws: Path):
    spec = case.observations
    path = ws / "observations.json"
    if path.exists():
        data = json.loads(path.read_text())
        return np.array(data["y_obs"]), NoiseModel(np.array(data["y_obs"]), np.array(data["variance"]))

    y_true = None
    if spec.synthesize is not None:
        syn = spec.synthesize
        if syn.trajectory is not None:
            traj = read_trajectory(syn.trajectory, model=model)
            y_true = extract_observations(traj, model).values
        else:
            source = LpnModel.from_spec(load_model_spec(syn.model))
            evaluator = LpnObservationModel(source, coupling=case.coupling, integrator=case.integrator)
            theta = WindkesselParamVector.from_model(source).theta if syn.theta is None else np.asarray(syn.theta)
            if syn.theta is None and case.coupling is not None:
                theta = theta[[g[0] for g in case.coupling]]
            y_true = evaluator.evaluate_one(theta)
        seed = case.seeds.noise if syn.seed is None else syn.seed
        y_obs, noise = synthesize_noisy_observations(y_true, syn.snr, seed)
        snr = syn.snr
    elif spec.file is not None:
        y_obs = extract_observations(read_trajectory(spec.file, model=model), model).values
        noise, snr = NoiseModel.from_snr(y_obs, spec.snr), spec.snr
    else:
        y_obs = np.asarray(spec.y_obs, dtype=float)
        noise, snr = NoiseModel.from_snr(y_obs, spec.snr), spec.snr

    if y_obs.size != len(model.outlet_nodes) + 2:
        raise DimensionMismatch(f"{y_obs.size} observations for {len(model.outlet_nodes)} outlets")
    path.write_text(json.dumps({
        "names": observation_names(model),
        "y_obs": y_obs.tolist(),
        "y_true": None if y_true is None else np.asarray(y_true).tolist(),
        "variance": noise.variance.tolist(),
        "snr": snr,
    }, indent=2))
    logger.info(f"📊 Observations: {np.round(y_obs, 4).tolist()}")
    return y_obs, noise


def make_prior(case: CalibrationCase, evaluator: LpnObservationModel) -> Prior:
    if case.prior is None:
        return Prior.uniform(evaluator.dim, 2.0, 8.0, evaluator.parameter_names())
    prior = Prior.from_json(case.prior, evaluator.parameter_names())
    if prior.dim == 1 and evaluator.dim > 1:
        prior = Prior(prior.marginals * evaluator.dim, evaluator.parameter_names())
    if prior.dim != evaluator.dim:
        raise DimensionMismatch(f"prior has {prior.dim} marginals for {evaluator.dim} parameters")
    return prior


@_stage("run1")
def run_first_calibration(case, model, noise, ws: Path) -> dict:
    evaluator = LpnObservationModel(model, coupling=case.coupling, integrator=case.integrator)
    prior = make_prior(case, evaluator)
    cfg = case.smc.model_copy(update={"seed": case.seeds.run1})
    logger.info(f"🔍 Run 1: SMC with the geometric model, {cfg.particles} particles")
    result = run_smc(evaluator, prior, noise, cfg)

    run_dir = ws / "run1"
    run_dir.mkdir(parents=True, exist_ok=True)
    summary = write_posterior(result, run_dir / "posterior.csv", run_dir / "summary.json")

    full = evaluator.full_theta(result.theta_map)[0]
    bcs = WindkesselParamVector.from_model(model).with_theta(full).decode()
    request = write_handoff_request(ws / "hifi_request.json", model, full, bcs)

    files = ["run1/posterior.csv", "run1/summary.json", "hifi_request.json", "observations.json"]
    manifest = {name: _sha256(ws / name) for name in files}
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    logger.info(f"✅ Run 1 done, theta_MAP={np.round(result.theta_map, 4).tolist()}")
    return {"summary": summary, "request": request}


def write_handoff_request(path: Path, model: LpnModel, theta_full: np.ndarray, bcs: List[WindkesselBc]) -> dict:
    inflow = model.spec.boundary_conditions.inflow
    request = {
        "model": model.spec.name,
        "theta": [float(t) for t in theta_full],
        "windkessels": [
            {"name": w.name, "node": w.node, "Rp": bc.Rp, "Rd": bc.Rd, "C": bc.C, "Pref": bc.Pref}
            for w, bc in zip(model.spec.boundary_conditions.windkessels, bcs)
        ],
        "inflow": {"node": inflow.node, "t": inflow.t, "Q": inflow.Q, "period": model.period},
        "columns": model.unknown_names(),
    }
    Path(path).write_text(json.dumps(request, indent=2))
    return request


def read_handoff_request(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise HandoffMissing(f"no hand-off request at {path}")
    return json.loads(path.read_text())


def request_windkessels(request: dict) -> List[WindkesselBc]:
    return [WindkesselBc(w["Rp"], w["Rd"], w["C"], w.get("Pref", 0.0)) for w in request["windkessels"]]


def request_theta(request: dict) -> np.ndarray:
    """Re-encode the decoded Windkessel values of a hand-off request"""
    return np.array([encode_windkessel(bc)[0] for bc in request_windkessels(request)])


def evaluate_hifi_request(request: dict, hifi_spec: LpnModelSpec, cfg: Optional[IntegratorConfig] = None) -> Trajectory:
    """Answer a hand-off request with a 0D model standing in for the high-fidelity solver"""
    spec = spec_with_windkessels(hifi_spec, request_windkessels(request))
    model = LpnModel.from_spec(spec)
    traj = run_cycles(model, cfg=cfg).trajectory
    columns = request.get("columns") or model.unknown_names()
    return traj.with_columns(columns)


@_stage("handoff")
def fulfil_handoff(case: CalibrationCase, ws: Path) -> bool:
    """Produce hifi_response.csv if a surrogate or a service is available"""
    response = ws / "hifi_response.csv"
    if response.exists():
        return True
    request = read_handoff_request(ws / "hifi_request.json")
    if case.surrogate_hifi:
        logger.info(f"🔍 Evaluating hand-off with surrogate model {case.surrogate_hifi}")
        traj = evaluate_hifi_request(request, load_model_spec(case.surrogate_hifi), case.integrator)
        write_trajectory(traj, response)
        return True
    if config.HIFI_SERVICE_URL:
        url = config.HIFI_SERVICE_URL.rstrip("/") + "/evaluate"
        logger.info(f"🔍 Submitting hand-off request to {url}")
        r = requests.post(url, json=request, timeout=config.HIFI_TIMEOUT)
        r.raise_for_status()
        frame = pd.read_csv(io.StringIO(r.json()["csv"]))
        frame.to_csv(response, index=False, float_format="%.12g")
        return True
    logger.info(f"⚠️ Awaiting high-fidelity result: write {response} and resume")
    return False


def check_manifest(ws: Path):
    manifest_path = ws / "run1" / "manifest.json"
    if not manifest_path.exists():
        raise HandoffMissing(f"no Run 1 manifest in {ws}")
    manifest = json.loads(manifest_path.read_text())
    for name, digest in manifest.items():
        if _sha256(ws / name) != digest:
            raise ModelValidationError(f"Run 1 artifact {name} changed since the hand-off")


@_stage("optimize")
def optimize_from_handoff(case: CalibrationCase, model: LpnModel, ws: Path):
    response = ws / "hifi_response.csv"
    if not response.exists():
        raise HandoffMissing(f"no hand-off response at {response}")
    request = read_handoff_request(ws / "hifi_request.json")
    hifi_traj = read_trajectory(response, model=model)

    # the element parameters are fitted at the hand-off boundary conditions
    bc_model = LpnModel.from_spec(spec_with_windkessels(model.spec, request_windkessels(request)))
    obs = ObservationSet.from_trajectory(hifi_traj, bc_model, case.resample, case.lm.row_scaling, bc_model.period)
    report = optimize_with_forward_check(bc_model, bc_model.alpha_geometric, obs, case.lm, case.integrator)
    spec = export_optimized(model, report, ws / "optimized_model.json", case.lm.lower_bound)

    metrics = {}
    try:
        geometric = run_cycles(bc_model, cfg=case.integrator).trajectory
        optimized = run_cycles(LpnModel.from_spec(spec_with_windkessels(spec, request_windkessels(request))),
                               cfg=case.integrator).trajectory
        metrics = {
            "geometric": error_metrics(geometric, hifi_traj, model).to_dict(),
            "optimized": error_metrics(optimized, hifi_traj, model).to_dict(),
        }
        logger.info(f"📊 eps_P,max {metrics['geometric']['eps_p_max']:.4f} -> {metrics['optimized']['eps_p_max']:.4f}, "
                    f"eps_Q,max {metrics['geometric']['eps_q_max']:.4f} -> {metrics['optimized']['eps_q_max']:.4f}")
    except LpnError as e:
        logger.warning(f"⚠️ Error metrics unavailable: {e}")
    return spec, report, metrics


@_stage("run2")
def run_second_calibration(case, optimized_spec: LpnModelSpec, noise, ws: Path) -> dict:
    model = LpnModel.from_spec(optimized_spec)
    evaluator = LpnObservationModel(model, coupling=case.coupling, integrator=case.integrator)
    prior = make_prior(case, evaluator)
    cfg = case.smc.model_copy(update={"seed": case.seeds.run2})
    logger.info(f"🔍 Run 2: SMC with the optimized model, {cfg.particles} particles")
    result = run_smc(evaluator, prior, noise, cfg)
    run_dir = ws / "run2"
    run_dir.mkdir(parents=True, exist_ok=True)
    summary = write_posterior(result, run_dir / "posterior.csv", run_dir / "summary.json")
    logger.info(f"✅ Run 2 done, theta_MAP={np.round(result.theta_map, 4).tolist()}")
    return summary


def calibrate(case: CalibrationCase, resume: bool = False) -> CalibrationOutcome:
    """
    Run the workflow as far as possible. Returns status 'awaiting_handoff'
    when the high-fidelity result has to be provided before resuming.
    """
    ws = Path(case.workspace)
    with WorkspaceLock(ws):
        model = LpnModel.from_spec(load_model_spec(case.model))
        manifest = ws / "run1" / "manifest.json"

        if resume:
            if not (ws / "hifi_request.json").exists():
                raise StageError("handoff", HandoffMissing(f"nothing to resume in {ws}"))
            check_manifest(ws)
        elif manifest.exists():
            raise StageError("run1", ModelValidationError(f"{ws} already holds a Run 1; use resume"))

        y_obs, noise = prepare_observations(case, model, ws)
        if not resume:
            run_first_calibration(case, model, noise, ws)

        if not fulfil_handoff(case, ws):
            if resume:
                raise StageError("handoff", HandoffMissing(f"no hand-off response in {ws}"))
            return CalibrationOutcome("awaiting_handoff", ws, {"request": str(ws / "hifi_request.json")})

        spec, lm_report, metrics = optimize_from_handoff(case, model, ws)
        summary2 = run_second_calibration(case, spec, noise, ws)

        run1 = json.loads((ws / "run1" / "summary.json").read_text())
        request = read_handoff_request(ws / "hifi_request.json")
        report = {
            "seeds": case.seeds.model_dump(),
            "observations": y_obs.tolist(),
            "run1": {"map": run1["map"], "mean": run1["mean"]},
            "handoff_theta": request["theta"],
            "lm": lm_report.to_dict(),
            "error_metrics": metrics,
            "run2": {"map": summary2["map"], "mean": summary2["mean"]},
        }
        (ws / "report.json").write_text(json.dumps(report, indent=2))
        artifacts = {name: str(ws / name) for name in (
            "run1/posterior.csv", "hifi_request.json", "hifi_response.csv", "optimized_model.json",
            "run2/posterior.csv", "report.json")}
        logger.info(f"✅ Calibration complete, report in {ws / 'report.json'}")
        return CalibrationOutcome("complete", ws, artifacts, report)
