import json

import pytest
from fastapi.testclient import TestClient

import cli
from cross_validate import cross_validate
from services import hifi_service
from services.forward_solver import IntegratorConfig
from services.hifi_service import app as hifi_app
from services.solver_service import app as solver_app

FAST = {"steps_per_cycle": 100, "cycles_max": 30}


@pytest.fixture
def solver():
    return TestClient(solver_app)


@pytest.fixture
def hifi_client(monkeypatch, sample_dir):
    monkeypatch.setenv("HIFI_MODEL_PATH", str(sample_dir / "bifurcation_hifi.json"))
    monkeypatch.setattr(hifi_service, "_surrogate", None)
    return TestClient(hifi_app)


@pytest.fixture
def model_json(sample_dir):
    return json.loads((sample_dir / "bifurcation.json").read_text())


def simulate(solver, model, **extra):
    return solver.post("/simulate", json={"model": model, "integrator": FAST, **extra})


def test_solver_health(solver):
    response = solver.get("/health")
    assert response.status_code == 200
    assert response.json() == {"status": "healthy", "service": "solver"}


def test_simulate(solver, model_json):
    response = simulate(solver, model_json)
    assert response.status_code == 200
    data = response.json()
    assert data["periodic"] is True
    assert len(data["trajectory"]["rows"]) == 101
    assert data["trajectory"]["columns"][0] == "inlet:P"
    assert len(data["trajectory"]["derivatives"]) == 101


def test_simulate_rejects_broken_network(solver, model_json):
    model_json["nodes"].append("orphan")
    response = simulate(solver, model_json)
    assert response.status_code == 422


def test_simulate_rejects_malformed_request(solver):
    response = solver.post("/simulate", json={"model": {"name": "x"}})
    assert response.status_code == 422


def test_strict_simulation_reports_non_periodic(solver, model_json):
    response = solver.post("/simulate", json={
        "model": model_json,
        "integrator": {"steps_per_cycle": 50, "cycles_max": 1, "periodicity_tol": 1e-12},
        "strict": True,
    })
    assert response.status_code == 500
    assert "periodic" in response.json()["detail"]


def test_metrics_of_identical_trajectories(solver, model_json):
    traj = simulate(solver, model_json).json()["trajectory"]
    response = solver.post("/metrics", json={"model": model_json, "low": traj, "high": traj})
    assert response.status_code == 200
    data = response.json()
    assert data["eps_p_max"] == 0.0 and data["eps_q_max"] == 0.0
    assert set(data["flow_caps"]) == {"out1", "out2"}


def test_metrics_reject_mismatched_columns(solver, model_json):
    traj = simulate(solver, model_json).json()["trajectory"]
    broken = dict(traj, columns=traj["columns"][:-1], rows=[row[:-1] for row in traj["rows"]], derivatives=None)
    response = solver.post("/metrics", json={"model": model_json, "low": broken, "high": traj})
    assert response.status_code == 422


def test_optimize_against_high_fidelity_run(solver, model_json, sample_dir):
    hifi_model = json.loads((sample_dir / "bifurcation_hifi.json").read_text())
    traj = simulate(solver, hifi_model).json()["trajectory"]
    response = solver.post("/optimize", json={
        "model": model_json,
        "trajectory": traj,
        "lm": {"max_iters": 50, "lower_bound": 0.0},
        "integrator": FAST,
    })
    assert response.status_code == 200
    data = response.json()
    assert data["report"]["iterations"] >= 1
    vessels = {v["name"]: v for v in data["model"]["vessels"]}
    assert all("geometry" not in v for v in vessels.values())
    assert vessels["branch1"]["R"] == pytest.approx(95.0, rel=0.05)
    assert all(v["S"] >= 0.0 for v in vessels.values())


def test_hifi_health(hifi_client, sample_dir):
    data = hifi_client.get("/health").json()
    assert data["status"] == "healthy"
    assert data["model_path"] == str(sample_dir / "bifurcation_hifi.json")


def test_hifi_evaluate(hifi_client, model_json):
    wk = model_json["boundary_conditions"]["windkessels"]
    columns = ["out2:Q", "inlet:P"]
    response = hifi_client.post("/evaluate", json={
        "model": model_json["name"],
        "theta": [0.0, 0.0],
        "windkessels": wk,
        "inflow": model_json["boundary_conditions"]["inflow"],
        "columns": columns,
    })
    assert response.status_code == 200
    lines = response.json()["csv"].splitlines()
    assert lines[0] == "time,out2:Q,inlet:P"
    assert len(lines) > 100


def test_hifi_rejects_wrong_outlet_count(hifi_client, model_json):
    wk = model_json["boundary_conditions"]["windkessels"][:1]
    response = hifi_client.post("/evaluate", json={
        "model": model_json["name"],
        "theta": [0.0],
        "windkessels": wk,
        "inflow": model_json["boundary_conditions"]["inflow"],
    })
    assert response.status_code == 422


def test_hifi_without_surrogate_model(monkeypatch, tmp_path, model_json):
    monkeypatch.setenv("HIFI_MODEL_PATH", str(tmp_path / "missing.json"))
    monkeypatch.setattr(hifi_service, "_surrogate", None)
    response = TestClient(hifi_app).post("/evaluate", json={
        "model": model_json["name"],
        "theta": [0.0, 0.0],
        "windkessels": model_json["boundary_conditions"]["windkessels"],
        "inflow": model_json["boundary_conditions"]["inflow"],
    })
    assert response.status_code == 503


# ---------------------------------------------------------------------------
# Command line
# ---------------------------------------------------------------------------

def test_cli_simulate_and_metrics(tmp_path, sample_dir, capsys):
    out = tmp_path / "traj.csv"
    code = cli.main(["simulate", str(sample_dir / "bifurcation.json"), "--out", str(out),
                     "--steps", "100", "--cycles-max", "30"])
    assert code == 0 and out.exists()

    capsys.readouterr()
    code = cli.main(["metrics", str(sample_dir / "bifurcation.json"), str(out), str(out)])
    assert code == 0
    report = json.loads(capsys.readouterr().out)
    assert report["eps_p_max"] == 0.0


def test_cli_with_named_inputs(tmp_path, sample_dir):
    model = str(sample_dir / "bifurcation.json")
    traj, deriv = tmp_path / "traj.csv", tmp_path / "traj_dot.csv"
    code = cli.main(["simulate", "--model", model, "--out", str(traj), "--deriv-out", str(deriv),
                     "--cycles", "30", "--dt", "0.01"])
    assert code == 0
    assert len(traj.read_text().splitlines()) == 102

    out = tmp_path / "optimized.json"
    code = cli.main(["optimize", "--model", model, "--obs", str(traj), "--obs-deriv", str(deriv),
                     "--out", str(out), "--cycles", "30", "--dt", "0.01"])
    assert code == 0
    assert "lm_report" in json.loads(out.read_text())


def test_cli_needs_a_model():
    with pytest.raises(SystemExit):
        cli.main(["simulate", "--out", "traj.csv"])
    with pytest.raises(SystemExit):
        cli.main(["optimize", "--model", "m.json"])


def test_cli_reports_unreadable_inputs(tmp_path, sample_dir):
    assert cli.main(["simulate", "--model", str(tmp_path / "missing.json")]) == 1
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    assert cli.main(["simulate", "--model", str(broken)]) == 1
    assert cli.main(["calibrate", str(sample_dir / "case_bifurcation.json"), "--particles", "0"]) == 1


def test_cli_reports_invalid_model(tmp_path, model_json):
    model_json["vessels"][0]["outlet"] = "nowhere"
    path = tmp_path / "broken.json"
    path.write_text(json.dumps(model_json))
    assert cli.main(["simulate", str(path), "--out", str(tmp_path / "t.csv")]) == 1


def test_cli_axis_parsing():
    assert cli.parse_axis("2:8:4").tolist() == [2.0, 4.0, 6.0, 8.0]
    with pytest.raises(Exception):
        cli.parse_axis("2:8")


def test_cli_particle_override_resets_threshold(sample_dir, tmp_path):
    case = cli.load_case(sample_dir / "case_bifurcation.json", {"workspace": str(tmp_path)})
    args = cli.build_parser().parse_args(["calibrate", "case.json", "--particles", "100", "--steps", "50"])
    case = cli.apply_run_overrides(case, args)
    assert case.smc.particles == 100
    assert case.smc.ess_min <= 100
    assert case.integrator.steps_per_cycle == 50


@pytest.mark.slow
def test_cross_validation_frame(sample_dir):
    frame = cross_validate(sample_dir / "bifurcation.json", sample_dir / "bifurcation_hifi.json", variations=2,
                           cfg=IntegratorConfig(steps_per_cycle=200, cycles_max=30))
    assert set(frame["model"]) == {"geometric", "optimized"}
    assert len(frame) == 4
    medians = frame.groupby("model")["eps_p_max"].median()
    assert medians["optimized"] < medians["geometric"]
