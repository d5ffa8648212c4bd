import json
import math

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from services import config
from services.errors import DimensionMismatch, ModelValidationError
from services.lpn_model import (
    ElementParams,
    FluidProperties,
    InflowWaveform,
    LpnModel,
    LpnModelSpec,
    Trajectory,
    VesselGeometry,
    WindkesselBc,
    WindkesselParamVector,
    assemble_residual,
    decode_windkessel,
    derive_geometric_params,
    encode_windkessel,
    load_model,
    perturb_boundary_conditions,
    read_trajectory,
    save_model,
    spec_with_params,
    write_trajectory,
)

FLUID = FluidProperties()


def test_geometric_parameters():
    R, L, C, S = derive_geometric_params(VesselGeometry(r=0.5, l=10.0, E=4e6, h=0.05), FLUID)
    assert R == pytest.approx(8 * 0.04 * 10.0 / (math.pi * 0.5 ** 4))
    assert L == pytest.approx(1.06 * 10.0 / (math.pi * 0.25))
    assert C == pytest.approx(3 * 10.0 * math.pi * 0.125 / (2 * 4e6 * 0.05))
    assert S == 0.0


def test_rigid_wall_gets_capacitance_floor():
    _, _, C, _ = derive_geometric_params(VesselGeometry(r=0.3, l=4.0), FLUID)
    assert C == config.C_MIN


def test_stenosis_coefficient_from_areas():
    S0 = math.pi * 0.3 ** 2
    _, _, _, S = derive_geometric_params(VesselGeometry(r=0.3, l=4.0, S0=S0, Ss=S0 / 2), FLUID)
    assert S == pytest.approx(1.52 * 1.06 / (2 * S0 ** 2))


@pytest.mark.parametrize("geom", [
    VesselGeometry(r=0.0, l=1.0),
    VesselGeometry(r=1.0, l=-1.0),
    VesselGeometry(r=1.0, l=1.0, E=-5.0, h=0.1),
    VesselGeometry(r=1.0, l=1.0, S0=1.0, Ss=2.0),
])
def test_invalid_geometry_is_rejected(geom):
    with pytest.raises(ModelValidationError):
        derive_geometric_params(geom, FLUID)


@given(r=st.floats(0.05, 2.0), l=st.floats(0.1, 50.0), k=st.floats(0.5, 4.0))
def test_geometric_scaling(r, l, k):
    R1, L1, C1, _ = derive_geometric_params(VesselGeometry(r=r, l=l, E=1e6, h=0.1), FLUID)
    R2, L2, C2, _ = derive_geometric_params(VesselGeometry(r=r, l=k * l, E=1e6, h=0.1), FLUID)
    assert R2 == pytest.approx(k * R1, rel=1e-12)
    assert L2 == pytest.approx(k * L1, rel=1e-12)
    assert C2 == pytest.approx(k * C1, rel=1e-12)
    R3, L3, _, _ = derive_geometric_params(VesselGeometry(r=k * r, l=l, E=1e6, h=0.1), FLUID)
    assert R3 == pytest.approx(R1 / k ** 4, rel=1e-12)
    assert L3 == pytest.approx(L1 / k ** 2, rel=1e-12)


@given(
    Rp=st.floats(0.0, 1e4),
    Rd=st.floats(1e-2, 1e4),
    C=st.floats(1e-7, 1e-1),
)
def test_windkessel_encoding_round_trip(Rp, Rd, C):
    bc = WindkesselBc(Rp, Rd, C)
    back = decode_windkessel(*encode_windkessel(bc))
    assert back.Rp == pytest.approx(Rp, rel=1e-9, abs=1e-9 * Rd)
    assert back.Rd == pytest.approx(Rd, rel=1e-9)
    assert back.C == pytest.approx(C, rel=1e-9)


def test_decode_rejects_negative_ratio():
    with pytest.raises(ModelValidationError):
        decode_windkessel(5.0, -0.1, 0.3)


def test_param_vector_round_trip(bifurcation):
    theta = WindkesselParamVector.from_model(bifurcation)
    assert theta.names == ("RCR1", "RCR2")
    for bc, w in zip(theta.decode(), bifurcation.spec.boundary_conditions.windkessels):
        assert bc.Rp == pytest.approx(w.Rp, rel=1e-12)
        assert bc.Rd == pytest.approx(w.Rd, rel=1e-12)
        assert bc.C == pytest.approx(w.C, rel=1e-12)
    Rp, Rd, C = theta.decode_batch(np.vstack([theta.theta, theta.theta + 1.0]))
    assert Rd[1, 0] == pytest.approx(math.e * Rd[0, 0])
    assert Rd[1, 0] * C[1, 0] == pytest.approx(theta.tau[0])
    with pytest.raises(DimensionMismatch):
        theta.with_theta([1.0, 2.0, 3.0])


def test_compiled_layout(bifurcation):
    model = bifurcation
    assert model.n_unknowns == 12
    assert model.unknown_names()[:2] == ["inlet:P", "inlet:Q"]
    assert model.inlet_node == "inlet"
    assert model.outlet_nodes == ("out1", "out2")
    # inlet row, 3 vessels, junction with 2 outlets, 2 Windkessels
    assert model.row_is_boundary.tolist() == [True] + [False] * 6 + [False] * 3 + [True, True]
    assert model.row_kind[1] == "pressure" and model.row_kind[2] == "flow"
    assert model.n_params == 3 * 4 + 3 * 2
    np.testing.assert_allclose(model.alpha_geometric[-6:], 0.0)


def test_element_params_lookup(bifurcation):
    alpha = ElementParams.from_model(bifurcation)
    idx = alpha.index_of("branch1", "R")
    assert alpha.names()[idx] == "branch1.R"
    assert alpha.names()[alpha.index_of("J0", "S", 1)] == "J0.S[1]"
    assert alpha.mask_for(["S"]).sum() == 3 + 2
    with pytest.raises(ModelValidationError):
        alpha.index_of("nope", "R")


def test_explicit_values_override_geometry(hifi, bifurcation):
    alpha = ElementParams.from_model(hifi)
    assert alpha.values[alpha.index_of("branch1", "R")] == 95.0
    geometric = ElementParams.from_model(bifurcation)
    i = geometric.index_of("branch1", "L")
    assert alpha.values[i] == pytest.approx(geometric.values[i])


def spec_dict(make_single_vessel):
    return make_single_vessel().model_dump()


@pytest.mark.parametrize("mutate", [
    lambda d: d["nodes"].append("in"),
    lambda d: d["nodes"].append("orphan"),
    lambda d: d["vessels"][0].update(outlet="missing"),
    lambda d: d["boundary_conditions"]["windkessels"].append(
        {"name": "WK2", "node": "out", "Rp": 1.0, "Rd": 1.0, "C": 1.0}),
    lambda d: d["boundary_conditions"]["windkessels"][0].update(Rd=0.0),
])
def test_invalid_networks_are_rejected(make_single_vessel, mutate):
    data = spec_dict(make_single_vessel)
    mutate(data)
    with pytest.raises((ModelValidationError, ValueError)):
        LpnModel.from_spec(LpnModelSpec.model_validate(data))


@settings(max_examples=30, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(seed=st.integers(0, 10_000))
def test_residual_superposition(make_single_vessel, seed):
    model = LpnModel.from_spec(make_single_vessel(S=0.0))
    theta = WindkesselParamVector.from_model(model)
    rng = np.random.default_rng(seed)
    a, b, da, db = rng.normal(size=(4, model.n_unknowns))
    zero = np.zeros(model.n_unknowns)
    r = lambda y, yd: assemble_residual(model, model.alpha_geometric, theta, y, yd, t=0.3)
    lhs = r(a + b, da + db)
    rhs = r(a, da) + r(b, db) - r(zero, zero)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_residual_shape_checks(bifurcation):
    theta = WindkesselParamVector.from_model(bifurcation)
    with pytest.raises(DimensionMismatch):
        assemble_residual(bifurcation, bifurcation.alpha_geometric, theta, np.zeros(3), np.zeros(3))
    with pytest.raises(DimensionMismatch):
        assemble_residual(bifurcation, np.zeros(2), theta, np.zeros(12), np.zeros(12))


def test_inflow_waveform_is_periodic(bifurcation):
    inflow = bifurcation.inflow
    assert inflow(0.35) == pytest.approx(inflow(1.35))
    assert inflow(0.1) == pytest.approx(20.0)
    assert inflow.mean() == pytest.approx(np.mean([5, 20, 30, 22, 12, 6, 4, 5, 6, 5]), rel=0.05)


def test_inflow_waveform_warns_on_open_end(caplog):
    t = np.linspace(0.0, 1.0, 11)
    Q = 10.0 + 5.0 * np.sin(2.0 * np.pi * t)
    Q[-1] = 12.0
    with caplog.at_level("WARNING"):
        inflow = InflowWaveform(t, Q, period=1.0)
    assert "inflow waveform: last sample differs" in caplog.text
    assert inflow(1.0) == pytest.approx(inflow(0.0))
    assert inflow(0.0) == pytest.approx(10.0)

    caplog.clear()
    with caplog.at_level("WARNING"):
        InflowWaveform(t, 10.0 + 5.0 * np.sin(2.0 * np.pi * t), period=1.0)
    assert "last sample differs" not in caplog.text


def test_trajectory_csv(tmp_path, bifurcation):
    times = np.linspace(0.0, 1.0, 11)
    y = np.outer(times, np.arange(12.0))
    traj = Trajectory(times, y, 2.0 * y, tuple(bifurcation.unknown_names()))
    write_trajectory(traj, tmp_path / "t.csv", tmp_path / "d.csv")
    back = read_trajectory(tmp_path / "t.csv", tmp_path / "d.csv", model=bifurcation)
    np.testing.assert_allclose(back.y, y)
    np.testing.assert_allclose(back.ydot, 2.0 * y)
    assert back.columns == traj.columns


def test_trajectory_columns_are_reordered(tmp_path, bifurcation):
    names = bifurcation.unknown_names()
    traj = Trajectory([0.0, 1.0], np.arange(24.0).reshape(2, 12), None, tuple(reversed(names)))
    write_trajectory(traj, tmp_path / "t.csv")
    back = read_trajectory(tmp_path / "t.csv", model=bifurcation)
    assert list(back.columns) == names
    np.testing.assert_allclose(back.column("inlet:P"), [11.0, 23.0])


def test_trajectory_rejects_bad_times():
    with pytest.raises(ModelValidationError):
        Trajectory([0.0, 0.0], np.zeros((2, 2)))


def test_model_file_round_trip(tmp_path, hifi):
    spec = spec_with_params(hifi, hifi.alpha_geometric * 2.0)
    save_model(spec, tmp_path / "m.json", extra={"note": "doubled"})
    assert json.loads((tmp_path / "m.json").read_text())["note"] == "doubled"
    model = load_model(tmp_path / "m.json")
    np.testing.assert_allclose(model.alpha_geometric, hifi.alpha_geometric * 2.0)


def test_perturbed_boundary_conditions(bifurcation_spec):
    perturbed = perturb_boundary_conditions(bifurcation_spec, seed=3)
    base = bifurcation_spec.boundary_conditions
    new = perturbed.boundary_conditions
    ratio = np.array(new.inflow.Q) / np.array(base.inflow.Q)
    assert np.allclose(ratio, ratio[0]) and 0.8 <= ratio[0] <= 1.2
    for a, b in zip(base.windkessels, new.windkessels):
        for key in ("Rp", "Rd", "C"):
            assert 0.8 <= getattr(b, key) / getattr(a, key) <= 1.2
    assert perturb_boundary_conditions(bifurcation_spec, seed=3) == perturbed
