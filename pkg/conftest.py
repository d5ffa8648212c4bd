from pathlib import Path

import numpy as np
import pytest

from services.forward_solver import IntegratorConfig
from services.lpn_model import LpnModel, LpnModelSpec, load_model_spec

SAMPLE_DIR = Path(__file__).parent / "sample_models"


def single_vessel_spec(R=10.0, L=0.5, C=1e-4, S=0.0, Rp=50.0, Rd=500.0, Cwk=5e-4, Q=None, period=1.0, Pref=0.0):
    """inlet -> vessel -> Windkessel; Q is a constant or (t, Q) samples"""
    if Q is None:
        t, q = [0.0, 0.25, 0.5, 0.75], [5.0, 15.0, 8.0, 4.0]
    elif np.isscalar(Q):
        t, q = [0.0], [float(Q)]
    else:
        t, q = Q
    return LpnModelSpec.model_validate({
        "name": "single",
        "period": period,
        "nodes": ["in", "out"],
        "vessels": [{"name": "V", "inlet": "in", "outlet": "out", "R": R, "L": L, "C": C, "S": S}],
        "boundary_conditions": {
            "inflow": {"node": "in", "t": list(t), "Q": list(q)},
            "windkessels": [{"name": "WK", "node": "out", "Rp": Rp, "Rd": Rd, "C": Cwk, "Pref": Pref}],
        },
    })


def tree_spec(n_out=3, seed=0, stenosis=False):
    """inlet vessel -> junction with n_out outlets -> one vessel and Windkessel per outlet"""
    rng = np.random.default_rng(seed)
    outlets = [f"n{i}" for i in range(n_out)]
    caps = [f"out{i}" for i in range(n_out)]
    vessels = [{"name": "root", "inlet": "in", "outlet": "J",
                "R": 15.0, "L": 10.0, "C": 2e-5, "S": 0.5 if stenosis else 0.0}]
    windkessels = []
    for i in range(n_out):
        vessels.append({"name": f"b{i}", "inlet": outlets[i], "outlet": caps[i],
                        "R": float(rng.uniform(50, 150)), "L": float(rng.uniform(5, 25)),
                        "C": float(rng.uniform(2e-6, 1e-5)), "S": float(rng.uniform(0.5, 2.0)) if stenosis else 0.0})
        Rt = float(np.exp(rng.uniform(5.5, 6.5)))
        Rd = Rt / 1.1
        windkessels.append({"name": f"RCR{i}", "node": caps[i], "Rp": Rt - Rd, "Rd": Rd, "C": 0.3 / Rd})
    return LpnModelSpec.model_validate({
        "name": f"tree{n_out}",
        "period": 1.0,
        "nodes": ["in", "J"] + outlets + caps,
        "vessels": vessels,
        "junctions": [{"name": "J", "inlet": "J", "outlets": outlets}],
        "boundary_conditions": {
            "inflow": {"node": "in", "t": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
                       "Q": [5.0, 20.0, 30.0, 22.0, 12.0, 6.0, 4.0, 5.0, 6.0, 5.0]},
            "windkessels": windkessels,
        },
    })


@pytest.fixture
def sample_dir():
    return SAMPLE_DIR


@pytest.fixture
def bifurcation_spec():
    return load_model_spec(SAMPLE_DIR / "bifurcation.json")


@pytest.fixture
def hifi_spec():
    return load_model_spec(SAMPLE_DIR / "bifurcation_hifi.json")


@pytest.fixture
def bifurcation(bifurcation_spec):
    return LpnModel.from_spec(bifurcation_spec)


@pytest.fixture
def hifi(hifi_spec):
    return LpnModel.from_spec(hifi_spec)


@pytest.fixture
def fast_integrator():
    return IntegratorConfig(steps_per_cycle=100, cycles_max=30)


@pytest.fixture
def make_single_vessel():
    return single_vessel_spec


@pytest.fixture
def make_tree():
    return tree_spec
