import os
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

# Forward solver defaults
RHO_INF = float(os.getenv("LPN_RHO_INF", "0.2"))
STEPS_PER_CYCLE = int(os.getenv("LPN_STEPS_PER_CYCLE", "1000"))
NEWTON_TOL = float(os.getenv("LPN_NEWTON_TOL", "1e-8"))
NEWTON_MAX_ITERS = int(os.getenv("LPN_NEWTON_MAX_ITERS", "30"))
CYCLES_MAX = int(os.getenv("LPN_CYCLES_MAX", "100"))
PERIODICITY_TOL = float(os.getenv("LPN_PERIODICITY_TOL", "1e-3"))

# Levenberg-Marquardt defaults
LM_INITIAL_DAMPING = float(os.getenv("LM_INITIAL_DAMPING", "1.0"))
LM_TOL_GRAD = float(os.getenv("LM_TOL_GRAD", "1e-5"))
LM_TOL_INC = float(os.getenv("LM_TOL_INC", "1e-10"))
LM_MAX_ITERS = int(os.getenv("LM_MAX_ITERS", "100"))

# Sequential Monte Carlo defaults
SMC_PARTICLES = int(os.getenv("SMC_PARTICLES", "10000"))
SMC_ESS_MIN = float(os.getenv("SMC_ESS_MIN", "5000"))
SMC_REJUVENATION_STEPS = int(os.getenv("SMC_REJUVENATION_STEPS", "2"))
SMC_PROPOSAL_SCALE = float(os.getenv("SMC_PROPOSAL_SCALE", "0.5"))
SMC_WORKERS = int(os.getenv("SMC_WORKERS", "1"))

# High-fidelity hand-off
HIFI_SERVICE_URL = os.getenv("HIFI_SERVICE_URL")
HIFI_TIMEOUT = int(os.getenv("HIFI_TIMEOUT", "600"))
HIFI_MODEL_PATH = os.getenv("HIFI_MODEL_PATH", "sample_models/bifurcation_hifi.json")

LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO").upper()

# Rigid-wall capacitance floor (cm^5/dyn)
C_MIN = 1e-8
