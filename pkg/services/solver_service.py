from fastapi import FastAPI, HTTPException
from pydantic import BaseModel
from typing import Dict, List, Optional
import logging
import math

import numpy as np

from services import config
from services.errors import DimensionMismatch, LpnError, ModelValidationError
from services.forward_solver import IntegratorConfig, run_cycles
from services.inverse_lm import LmConfig, ObservationSet, optimize_with_forward_check
from services.lpn_model import LpnModel, LpnModelSpec, Trajectory, spec_with_params
from services.pipeline import error_metrics

app = FastAPI(title="0D Solver Service", version="1.0.0")
logging.basicConfig(level=config.LOG_LEVEL)
logger = logging.getLogger(__name__)


class TrajectoryRows(BaseModel):
    columns: List[str]
    times: List[float]
    rows: List[List[float]]
    derivatives: Optional[List[List[float]]] = None

    def to_trajectory(self) -> Trajectory:
        ydot = None if self.derivatives is None else np.asarray(self.derivatives, dtype=float)
        return Trajectory(np.asarray(self.times, dtype=float), np.asarray(self.rows, dtype=float), ydot,
                          tuple(self.columns))

    @classmethod
    def from_trajectory(cls, traj: Trajectory) -> "TrajectoryRows":
        return cls(
            columns=list(traj.columns),
            times=traj.times.tolist(),
            rows=traj.y.tolist(),
            derivatives=None if traj.ydot is None else traj.ydot.tolist(),
        )


class SimulateRequest(BaseModel):
    model: LpnModelSpec
    integrator: IntegratorConfig = IntegratorConfig()
    strict: bool = False


class SimulateResponse(BaseModel):
    trajectory: TrajectoryRows
    cycles: int
    periodic: bool
    change: float


class OptimizeRequest(BaseModel):
    model: LpnModelSpec
    trajectory: TrajectoryRows
    lm: LmConfig = LmConfig()
    integrator: IntegratorConfig = IntegratorConfig()
    resample: int = 100


class OptimizeResponse(BaseModel):
    model: dict
    report: dict


class MetricsRequest(BaseModel):
    model: LpnModelSpec
    low: TrajectoryRows
    high: TrajectoryRows


class MetricsResponse(BaseModel):
    eps_p_max: float
    eps_q_max: Optional[float] = None
    pressure_caps: Dict[str, float]
    flow_caps: Dict[str, Optional[float]]


def _status_for(error: LpnError) -> int:
    return 422 if isinstance(error, (ModelValidationError, DimensionMismatch)) else 500


@app.post("/simulate", response_model=SimulateResponse)
def simulate(request: SimulateRequest):
    """Run a model to its periodic state and return the final cycle"""
    try:
        model = LpnModel.from_spec(request.model)
        result = run_cycles(model, cfg=request.integrator, strict=request.strict)
        logger.info(f"✅ Simulated '{request.model.name}' in {result.cycles} cycles")
        return SimulateResponse(
            trajectory=TrajectoryRows.from_trajectory(result.trajectory),
            cycles=result.cycles,
            periodic=result.periodic,
            change=result.change,
        )
    except LpnError as e:
        logger.error(f"❌ Simulation failed: {e}")
        raise HTTPException(status_code=_status_for(e), detail=str(e))


@app.post("/optimize", response_model=OptimizeResponse)
def optimize(request: OptimizeRequest):
    """Fit every element parameter of the model to the posted trajectory"""
    try:
        model = LpnModel.from_spec(request.model)
        obs = ObservationSet.from_trajectory(request.trajectory.to_trajectory(), model, request.resample,
                                             request.lm.row_scaling, model.period)
        report = optimize_with_forward_check(model, model.alpha_geometric, obs, request.lm, request.integrator)
        values = report.alpha.values
        if request.lm.lower_bound is not None:
            values = values.clip(min=request.lm.lower_bound)
        spec = spec_with_params(model, values)
        return OptimizeResponse(model=spec.model_dump(exclude_none=True), report=report.to_dict())
    except LpnError as e:
        logger.error(f"❌ Optimization failed: {e}")
        raise HTTPException(status_code=_status_for(e), detail=str(e))


@app.post("/metrics", response_model=MetricsResponse)
def metrics(request: MetricsRequest):
    """Pressure and flow errors of a 0D trajectory against a reference trajectory"""
    try:
        model = LpnModel.from_spec(request.model)
        report = error_metrics(request.low.to_trajectory(), request.high.to_trajectory(), model)
        # NaN is not valid JSON
        clean = lambda v: None if math.isnan(v) else v
        return MetricsResponse(
            eps_p_max=report.eps_p_max,
            eps_q_max=clean(report.eps_q_max),
            pressure_caps=report.pressure_caps,
            flow_caps={k: clean(v) for k, v in report.flow_caps.items()},
        )
    except (LpnError, ValueError) as e:
        logger.error(f"❌ Error metrics failed: {e}")
        status = _status_for(e) if isinstance(e, LpnError) else 422
        raise HTTPException(status_code=status, detail=str(e))


@app.get("/health")
async def health_check():
    """Health check endpoint"""
    return {"status": "healthy", "service": "solver"}


if __name__ == "__main__":
    import uvicorn
    uvicorn.run(app, host="0.0.0.0", port=8101)
