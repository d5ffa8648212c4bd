#!/usr/bin/env python3
"""
Command line for the 0D solver and the two-run Windkessel calibration.

    python cli.py simulate --model sample_models/bifurcation.json --out traj.csv --cycles 30 --dt 0.005
    python cli.py optimize --model sample_models/bifurcation.json --obs traj.csv [--obs-deriv traj_dot.csv] --out optimized.json
    python cli.py calibrate sample_models/case_bifurcation.json --surrogate-hifi sample_models/bifurcation_hifi.json
    python cli.py calibrate sample_models/case_bifurcation.json --resume
    python cli.py grid-posterior sample_models/case_bifurcation.json --axis 2:8:10 --axis 3:6:10 --out grid.csv
    python cli.py metrics sample_models/bifurcation.json low.csv high.csv

Exit codes: 0 success, 2 awaiting the high-fidelity hand-off, 1 error.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from services import config
from services.errors import LpnError
from services.forward_solver import IntegratorConfig, run_cycles
from services.inverse_lm import LmConfig, ObservationSet, export_optimized, optimize_with_forward_check
from services.lpn_model import load_model, read_trajectory, write_trajectory
from services.pipeline import (
    EXIT_ERROR,
    EXIT_OK,
    LpnObservationModel,
    calibrate,
    error_metrics,
    grid_posterior,
    load_case,
    make_prior,
    prepare_observations,
)

logger = logging.getLogger("cli")


def integrator_from(args) -> IntegratorConfig:
    overrides = {
        "steps_per_cycle": getattr(args, "steps", None),
        "time_step": getattr(args, "dt", None),
        "cycles_max": getattr(args, "cycles_max", None),
        "rho_inf": getattr(args, "rho_inf", None),
    }
    return IntegratorConfig(**{k: v for k, v in overrides.items() if v is not None})


def cmd_simulate(args) -> int:
    model = load_model(args.model)
    result = run_cycles(model, cfg=integrator_from(args), strict=args.strict)
    write_trajectory(result.trajectory, args.out, args.deriv_out)
    logger.info(f"✅ Trajectory written to {args.out} ({result.cycles} cycles, periodic={result.periodic})")
    return EXIT_OK


def cmd_optimize(args) -> int:
    model = load_model(args.model)
    traj = read_trajectory(args.trajectory, args.derivatives, model=model)
    lm = LmConfig(freeze=args.freeze or [], lower_bound=args.lower_bound, row_scaling=not args.no_row_scaling)
    resample = None if (args.derivatives and not args.resample) else (args.resample or 100)
    obs = ObservationSet.from_trajectory(traj, model, resample, lm.row_scaling, model.period)
    report = optimize_with_forward_check(model, model.alpha_geometric, obs, lm, integrator_from(args))
    export_optimized(model, report, args.out, lm.lower_bound)
    logger.info(f"📊 LM: {report.iterations} iterations, |g|={report.grad_norm:.3e}, S={report.residual_sum:.4e}")
    return EXIT_OK


def case_overrides(args) -> dict:
    overrides = {"workspace": args.workspace, "surrogate_hifi": args.surrogate_hifi}
    return {k: str(Path(v).resolve()) for k, v in overrides.items() if v is not None}


def apply_run_overrides(case, args):
    smc = {k: v for k, v in {"particles": args.particles, "workers": args.workers}.items() if v is not None}
    if smc:
        data = case.smc.model_dump()
        data.update(smc)
        if "particles" in smc:
            data["ess_min"] = None
        case = case.model_copy(update={"smc": type(case.smc).model_validate(data)})
    if getattr(args, "steps", None) is not None:
        case = case.model_copy(update={"integrator": case.integrator.model_copy(update={"steps_per_cycle": args.steps})})
    return case


def cmd_calibrate(args) -> int:
    case = apply_run_overrides(load_case(args.case, case_overrides(args)), args)
    outcome = calibrate(case, resume=args.resume)
    if outcome.status == "awaiting_handoff":
        logger.info(f"⚠️ Provide {outcome.workspace / 'hifi_response.csv'} and rerun with --resume")
    else:
        run2 = outcome.report["run2"]
        logger.info(f"📊 Run 2 MAP {np.round(run2['map'], 4).tolist()}, mean {np.round(run2['mean'], 4).tolist()}")
    return outcome.exit_code


def parse_axis(text: str) -> np.ndarray:
    try:
        lo, hi, n = text.split(":")
        return np.linspace(float(lo), float(hi), int(n))
    except ValueError:
        raise argparse.ArgumentTypeError(f"axis must be lower:upper:points, got '{text}'")


def cmd_grid_posterior(args) -> int:
    case = load_case(args.case, case_overrides(args))
    model = load_model(args.model or case.model)
    ws = Path(case.workspace)
    ws.mkdir(parents=True, exist_ok=True)
    _, noise = prepare_observations(case, model, ws)
    evaluator = LpnObservationModel(model, coupling=case.coupling, integrator=case.integrator)
    if len(args.axis) != evaluator.dim:
        raise SystemExit(f"need {evaluator.dim} --axis options, got {len(args.axis)}")
    prior = make_prior(case, evaluator) if args.with_prior else None
    grid = grid_posterior(evaluator, args.axis, noise, prior)
    grid.to_frame(evaluator.parameter_names()).to_csv(args.out, index=False, float_format="%.12g")
    logger.info(f"✅ Grid posterior written to {args.out}, argmax {np.round(grid.argmax(), 4).tolist()}")
    return EXIT_OK


def cmd_metrics(args) -> int:
    model = load_model(args.model)
    report = error_metrics(read_trajectory(args.low), read_trajectory(args.high), model)
    print(json.dumps(report.to_dict(), indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="0D blood-flow solver and Windkessel calibration")
    parser.add_argument("--log-level", default=config.LOG_LEVEL)
    sub = parser.add_subparsers(dest="command", required=True)

    def integrator_flags(p):
        p.add_argument("--steps", type=int, help="time steps per cardiac cycle")
        p.add_argument("--dt", type=float, help="time step in seconds, overrides --steps")
        p.add_argument("--cycles", "--cycles-max", dest="cycles_max", type=int, help="maximum number of cycles")
        p.add_argument("--rho-inf", type=float)

    p = sub.add_parser("simulate", help="run a model to its periodic state")
    p.add_argument("model_path", nargs="?", metavar="model")
    p.add_argument("--model", help="LPN model JSON")
    p.add_argument("--out", default="trajectory.csv")
    p.add_argument("--deriv-out")
    p.add_argument("--strict", action="store_true", help="fail if no periodic state is reached")
    integrator_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("optimize", help="fit element parameters to an observed trajectory")
    p.add_argument("model_path", nargs="?", metavar="model")
    p.add_argument("trajectory_path", nargs="?", metavar="trajectory")
    p.add_argument("--model", help="LPN model JSON")
    p.add_argument("--obs", help="observed trajectory CSV")
    p.add_argument("--obs-deriv", "--derivatives", dest="derivatives",
                   help="CSV of time derivatives matching the trajectory")
    p.add_argument("--resample", type=int, help="spline resampling points per cycle (default 100)")
    p.add_argument("--freeze", nargs="*", help="field names (S) or parameter names (branch1.S)")
    p.add_argument("--lower-bound", type=float, help="clip exported parameters at this value")
    p.add_argument("--no-row-scaling", action="store_true")
    p.add_argument("--out", default="optimized_model.json")
    integrator_flags(p)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("calibrate", help="two-run SMC calibration with LM model optimization")
    p.add_argument("case")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--surrogate-hifi", help="0D model standing in for the high-fidelity solver")
    p.add_argument("--workspace")
    p.add_argument("--particles", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--steps", type=int, help="time steps per cardiac cycle")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("grid-posterior", help="evaluate the posterior on a parameter grid")
    p.add_argument("case")
    p.add_argument("--axis", type=parse_axis, action="append", required=True, help="lower:upper:points")
    p.add_argument("--model", help="model file to use instead of the case model")
    p.add_argument("--with-prior", action="store_true")
    p.add_argument("--workspace")
    p.add_argument("--out", default="grid_posterior.csv")
    p.set_defaults(func=cmd_grid_posterior, surrogate_hifi=None)

    p = sub.add_parser("metrics", help="pressure and flow errors of a 0D trajectory")
    p.add_argument("model")
    p.add_argument("low", help="0D trajectory CSV")
    p.add_argument("high", help="reference trajectory CSV")
    p.set_defaults(func=cmd_metrics)
    return parser


def resolve_inputs(parser, args):
    """Accept input files either positionally or through --model and --obs"""
    if args.command in ("simulate", "optimize"):
        args.model = args.model or args.model_path
        if args.model is None:
            parser.error(f"{args.command} needs a model file (--model)")
    if args.command == "optimize":
        args.trajectory = args.obs or args.trajectory_path
        if args.trajectory is None:
            parser.error("optimize needs an observed trajectory (--obs)")
    return args


def main(argv=None) -> int:
    parser = build_parser()
    args = resolve_inputs(parser, parser.parse_args(argv))
    logging.basicConfig(level=args.log_level.upper())
    try:
        return args.func(args)
    except (LpnError, ValidationError, OSError, json.JSONDecodeError) as e:
        logger.error(f"❌ {e}")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
