#!/usr/bin/env python3
"""
polyvar command line.

Usage:
    polyvar simulate   --config config/fou-h055.yaml --n 4096 --out results
    polyvar estimate   --config config/oufou-estimation.yaml --input results/path.csv
    polyvar cumulants  --config config/fgn-h07.yaml
    polyvar bounds     --config config/fgn-h07.yaml
    polyvar rate-study --config config/fou-h055.yaml --workers 8

Exit codes:
    0 success, 2 invalid input or configuration, 3 numerical failure

Environment variables:
    POLYVAR_LOG_DIR: directory of polyvar.log (default logs)
    POLYVAR_SEED, POLYVAR_OUT_DIR, POLYVAR_WORKERS, POLYVAR_EXPERIMENT_NAME
    MLFLOW_TRACKING_URI: tracking server for rate studies with tracking.mlflow
"""

import argparse
import json
import logging
import os
import sys

import pandas as pd

from .config import ExperimentConfig, json_default, resolve_config
from .cov_models import finite_diff_kernel
from .errors import NumericError, PolyvarError, ValidationError
from .estimators import estimate_path
from .exact_sampler import SamplePath, sample_model
from .mc_harness import run_experiment
from .rate_bounds import bound_report
from .variation_stats import (
    align_poly,
    exact_var_U,
    finite_diff_path,
    quad_cumulants,
    u_limit,
    variation_report,
)

logger = logging.getLogger("polyvar")


def setup_logging(verbose: bool = False) -> None:
    log_dir = os.getenv("POLYVAR_LOG_DIR", "logs")
    os.makedirs(log_dir, exist_ok=True)
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s - %(levelname)s - %(message)s",
        handlers=[
            logging.FileHandler(os.path.join(log_dir, "polyvar.log")),
            logging.StreamHandler(),
        ],
    )


def parse_args(argv=None):
    parser = argparse.ArgumentParser(
        prog="polyvar",
        description="Polynomial variations of Gaussian sequences: bounds, estimators, rate studies",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="YAML or JSON experiment file")
    common.add_argument("--seed", type=int, default=None, help="Master seed (overrides file)")
    common.add_argument("--out", type=str, default=None, help="Output directory (overrides file)")
    common.add_argument("--workers", type=int, default=None, help="Worker processes for rate studies")
    common.add_argument("--verbose", action="store_true", help="Debug logging")

    sub = parser.add_subparsers(dest="command", required=True)
    simulate = sub.add_parser("simulate", parents=[common], help="Draw one exact sample path")
    simulate.add_argument("--n", type=int, default=None, help="Path length (default: largest grid n)")
    simulate.add_argument("--replication", type=int, default=0, help="Replication substream")
    simulate.add_argument("--stationary", action="store_true", help="Skip the start-at-zero correction")

    estimate = sub.add_parser("estimate", parents=[common], help="Estimate drift parameters from a path CSV")
    estimate.add_argument("--input", type=str, default=None, help="Path CSV (index, value[, sigma_value])")

    cumulants = sub.add_parser("cumulants", parents=[common], help="Exact variances and cumulants over the n grid")
    cumulants.add_argument("--input", type=str, default=None, help="Also report Q, U, F of this path CSV")

    sub.add_parser("bounds", parents=[common], help="Berry-Esseen constants and bounds over the n grid")
    sub.add_parser("rate-study", parents=[common], help="Monte Carlo rate study")
    return parser.parse_args(argv)


def _output_path(config: ExperimentConfig, suffix: str) -> str:
    os.makedirs(config.out_dir, exist_ok=True)
    return os.path.join(config.out_dir, f"{config.run_name}_{suffix}")


def _diff_order(config: ExperimentConfig) -> int:
    return config.p if config.mode == "finite_diff" else 0


def _i0(config: ExperimentConfig) -> int:
    return config.i0 if config.mode == "trimmed" else 0


def cmd_simulate(config: ExperimentConfig, args) -> int:
    model = config.model.build()
    n = args.n or config.n_grid[-1]
    stationary = args.stationary or config.mode == "stationary"
    path = sample_model(model, n, config.seed, stationary=stationary, replication=args.replication)
    out = _output_path(config, "path.csv")
    path.to_csv(out)
    logger.info(f"Sampled {model.label()} n={n} seed={config.seed} -> {out}")
    print(f"✅ Path written to {out}")
    return 0


def cmd_estimate(config: ExperimentConfig, args) -> int:
    source = args.input or config.input_path
    if not source:
        raise ValidationError("estimate needs --input or input.path")
    model = config.model.build()
    path = SamplePath.from_csv(source, model)
    result = estimate_path(
        path,
        model.variant,
        model.H,
        kind=config.poly.kind,
        q=config.poly.q,
        i0=_i0(config),
        diff_order=_diff_order(config),
        branch=config.branch,
        fd_mode=config.fd_mode,
        two_stage=config.two_stage,
        kappa=config.kappa,
    )
    text = json.dumps(result.to_dict(), indent=2, default=json_default)
    out = _output_path(config, "estimate.json")
    with open(out, "w") as f:
        f.write(text)
    print(text)
    print(f"✅ Estimate written to {out}")
    return 0


def cmd_cumulants(config: ExperimentConfig, args) -> int:
    model = config.model.build()
    kernel = model.kernel()
    if _diff_order(config):
        kernel = finite_diff_kernel(kernel, _diff_order(config))
    poly = align_poly(config.poly.build(kernel.r0), kernel.r0)

    if args.input or config.input_path:
        path = SamplePath.from_csv(args.input or config.input_path, model)
        if _diff_order(config):
            path = finite_diff_path(path, _diff_order(config))
        report = variation_report(path.values[_i0(config):], poly, kernel, float(poly.coeffs[0]))
        print(report.to_json(_output_path(config, "variation.json")))

    limit = u_limit(poly, kernel)
    rows = []
    for n in config.n_grid:
        cum = quad_cumulants(kernel, n)
        rows.append(
            {
                "n": n,
                "var_U_exact": exact_var_U(poly, kernel, n),
                "u_limit": None if limit.diverges else limit.value,
                **cum.to_dict(),
            }
        )
    frame = pd.DataFrame.from_records(rows)
    out = _output_path(config, "cumulants.csv")
    frame.to_csv(out, index=False, float_format="%.12g")
    print(frame.to_string(index=False))
    print(f"✅ Cumulants written to {out}")
    return 0


def cmd_bounds(config: ExperimentConfig, args) -> int:
    model = config.model.build()
    poly = config.poly.build(model.kernel().r0)
    reports = [
        bound_report(poly, model, n, config.normalization, _i0(config), _diff_order(config))
        for n in config.n_grid
    ]
    frame = pd.DataFrame.from_records([r.to_dict() for r in reports])
    out = _output_path(config, "bounds.csv")
    frame.to_csv(out, index=False, float_format="%.12g")
    print(frame.to_string(index=False))
    print(f"✅ Bounds written to {out}")
    return 0


def cmd_rate_study(config: ExperimentConfig, args) -> int:
    result = run_experiment(config)
    fit = result.fit
    print(result.to_frame().to_string(index=False))
    if fit is None:
        print("⚠️ No slope fitted (Wasserstein distance not requested or grid too short)")
        return 0
    print(
        f"✅ {result.run_name}: slope {fit.slope:.4f} "
        f"[{fit.ci95[0]:.4f}, {fit.ci95[1]:.4f}], predicted {result.predicted_class} "
        f"({result.predicted_slope})"
    )
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "cumulants": cmd_cumulants,
    "bounds": cmd_bounds,
    "rate-study": cmd_rate_study,
}


def main(argv=None) -> int:
    args = parse_args(argv)
    setup_logging(args.verbose)
    try:
        config = resolve_config(args.config, seed=args.seed, out_dir=args.out, workers=args.workers)
        return COMMANDS[args.command](config, args)
    except ValidationError as e:
        logger.error(f"Invalid input: {e}")
        print(f"❌ {e}", file=sys.stderr)
        return e.exit_code
    except NumericError as e:
        logger.error(f"Numerical failure: {e}")
        print(f"❌ {e}", file=sys.stderr)
        return e.exit_code
    except PolyvarError as e:
        logger.error(f"{e}")
        print(f"❌ {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    exit(main())
