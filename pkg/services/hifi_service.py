"""
Stand-in for the external high-fidelity solver. Answers hand-off requests with
a designated 0D model (HIFI_MODEL_PATH) run at the requested Windkessel values.
"""

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel
from typing import List, Optional
import io
import logging
import os

from services import config
from services.errors import DimensionMismatch, LpnError, ModelValidationError
from services.lpn_model import LpnModelSpec, load_model_spec, write_trajectory
from services.pipeline import evaluate_hifi_request

app = FastAPI(title="High-Fidelity Service", version="1.0.0")
logging.basicConfig(level=config.LOG_LEVEL)
logger = logging.getLogger(__name__)

_surrogate: Optional[LpnModelSpec] = None


class WindkesselValues(BaseModel):
    name: str
    node: str
    Rp: float
    Rd: float
    C: float
    Pref: float = 0.0


class HandoffRequest(BaseModel):
    model: str
    theta: List[float]
    windkessels: List[WindkesselValues]
    inflow: dict
    columns: List[str] = []


class HandoffResponse(BaseModel):
    model: str
    csv: str


def surrogate_spec() -> LpnModelSpec:
    global _surrogate
    if _surrogate is None:
        path = os.getenv("HIFI_MODEL_PATH", config.HIFI_MODEL_PATH)
        _surrogate = load_model_spec(path)
        logger.info(f"✅ Loaded surrogate model '{_surrogate.name}' from {path}")
    return _surrogate


@app.post("/evaluate", response_model=HandoffResponse)
def evaluate(request: HandoffRequest):
    """Trajectory at the LPN node points for the requested boundary conditions"""
    try:
        spec = surrogate_spec()
        logger.info(f"🔍 Evaluating hand-off for '{request.model}' with {len(request.windkessels)} outlets")
        traj = evaluate_hifi_request(request.model_dump(), spec)
        buffer = io.StringIO()
        write_trajectory(traj, buffer)
        return HandoffResponse(model=spec.name, csv=buffer.getvalue())
    except (LpnError, ValueError, KeyError) as e:
        logger.error(f"❌ Hand-off evaluation failed: {e}")
        invalid = isinstance(e, (ValueError, KeyError, ModelValidationError, DimensionMismatch))
        raise HTTPException(status_code=422 if invalid else 500, detail=str(e))
    except OSError as e:
        logger.error(f"❌ Surrogate model unavailable: {e}")
        raise HTTPException(status_code=503, detail="Surrogate model unavailable")


@app.get("/health")
async def health_check():
    """Health check endpoint"""
    return {"status": "healthy", "service": "hifi", "model_path": os.getenv("HIFI_MODEL_PATH", config.HIFI_MODEL_PATH)}


if __name__ == "__main__":
    import uvicorn
    uvicorn.run(app, host="0.0.0.0", port=8102)
