#!/usr/bin/env python3
"""
Boundary-condition generalization study.

Optimizes the element parameters of a 0D model against a reference model at
one set of boundary conditions, then compares geometric and optimized models
against the reference on randomly perturbed boundary conditions (inflow and
every Windkessel Rp, Rd, C scaled by independent U(0.8, 1.2) factors).

    python cross_validate.py sample_models/bifurcation.json sample_models/bifurcation_hifi.json --variations 10
"""

import argparse
import logging

import pandas as pd

from services import config
from services.errors import LpnError
from services.forward_solver import IntegratorConfig, run_cycles
from services.inverse_lm import LmConfig, ObservationSet, optimize_with_forward_check
from services.lpn_model import (
    LpnModel,
    load_model_spec,
    perturb_boundary_conditions,
    spec_with_params,
)
from services.pipeline import error_metrics

logging.basicConfig(level=config.LOG_LEVEL)
logger = logging.getLogger(__name__)


def with_boundary_conditions(spec, source):
    """Copy of spec carrying the inflow and Windkessels of source"""
    spec = spec.model_copy(deep=True)
    spec.boundary_conditions = source.boundary_conditions.model_copy(deep=True)
    return spec


def cross_validate(model_path, reference_path, variations=10, seed=0, low=0.8, high=1.2, cfg=None):
    cfg = cfg or IntegratorConfig()
    geometric_spec = load_model_spec(model_path)
    reference_spec = load_model_spec(reference_path)

    # fit once, at the unperturbed boundary conditions
    model = LpnModel.from_spec(geometric_spec)
    reference = run_cycles(LpnModel.from_spec(reference_spec), cfg=cfg).trajectory
    obs = ObservationSet.from_trajectory(reference, model, 100, True, model.period)
    report = optimize_with_forward_check(model, model.alpha_geometric, obs, LmConfig(), cfg)
    optimized_spec = spec_with_params(model, report.alpha)
    logger.info(f"✅ Optimized at the reference boundary conditions ({report.iterations} LM iterations)")

    rows = []
    for k in range(variations):
        perturbed = perturb_boundary_conditions(reference_spec, low, high, seed=seed + k)
        try:
            ref_model = LpnModel.from_spec(perturbed)
            ref = run_cycles(ref_model, cfg=cfg).trajectory
            for label, spec in (("geometric", geometric_spec), ("optimized", optimized_spec)):
                lpn = LpnModel.from_spec(with_boundary_conditions(spec, perturbed))
                traj = run_cycles(lpn, cfg=cfg).trajectory
                errors = error_metrics(traj, ref, lpn)
                rows.append({"variation": k, "model": label, "eps_p_max": errors.eps_p_max,
                             "eps_q_max": errors.eps_q_max})
        except LpnError as e:
            logger.warning(f"⚠️ Variation {k} skipped: {e}")

    frame = pd.DataFrame(rows)
    if not frame.empty:
        summary = frame.groupby("model")[["eps_p_max", "eps_q_max"]].median()
        logger.info(f"📊 Median errors over {variations} variations:\n{summary}")
    return frame


def main():
    parser = argparse.ArgumentParser(description="generalization of optimized 0D models to new boundary conditions")
    parser.add_argument("model", help="geometric 0D model")
    parser.add_argument("reference", help="reference model standing in for the high-fidelity solver")
    parser.add_argument("--variations", type=int, default=10)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--steps", type=int, default=config.STEPS_PER_CYCLE)
    parser.add_argument("--out", default="cross_validation.csv")
    args = parser.parse_args()

    frame = cross_validate(args.model, args.reference, args.variations, args.seed,
                           cfg=IntegratorConfig(steps_per_cycle=args.steps))
    frame.to_csv(args.out, index=False, float_format="%.6g")
    print(f"Results written to {args.out}")


if __name__ == "__main__":
    main()
