"""
Command line front end.

    python -m elimpute impute   --data d.csv --columns c.txt --seed 1 [--kappa 20] [--out d.imputed]
    python -m elimpute fit      --data d.csv --columns c.txt --estfun mean --seed 1 [--calibration bootstrap]
    python -m elimpute simulate --scenario corr-b --n 100 --R 100 --B 400 --seed 1 [--out study.csv]

Exit codes: 0 success, 2 invalid input, 3 numerical failure.
"""
import argparse
import logging
import sys
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from . import __version__
from .baselines import complete_case_ols, complete_case_sample, fisher_z_interval, weighted_gmm, wgmm_ci_normal
from .config import configure_logging, get_settings
from .dataset import Dataset, load_csv, validate_conditions
from .el_core import mele
from .errors import DataValidationError, ElMissingError
from .estimating_functions import available_estfuns, get_estfun
from .imputation import ExtendedSample, impute
from .inference import bootstrap_calibrate, chisq_mix_calibrate, ci_normal, estimate_asymptotics, fixed_kappa_gammas
from .kernel_smoothing import KernelSpec, select_bandwidth
from .schemas import CalibrationResult, RunConfig
from .simulation import METHODS, format_report, make_scenario, run_study
from .storage import calibration_items, format_key_values, write_extended_sample, write_fit_report, write_study_report

logger = logging.getLogger(__name__)


def _bandwidth(text: str):
    if text == "auto":
        return text
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bandwidth must be 'auto' or a number, got {text!r}") from None


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _method_list(text: str) -> List[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="elimpute",
        description="Empirical likelihood with kernel multiple imputation for data missing at random",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--kappa", type=int, default=20, help="imputations per missing row")
    common.add_argument("--bandwidth", type=_bandwidth, default="auto", help="'auto' or a positive number")
    common.add_argument("--bandwidth-rule", dest="bandwidth_rule", default="halve", choices=["halve", "higher-order"])
    common.add_argument("--kernel-order", dest="kernel_order", type=int, default=2, choices=[2, 4, 6])
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--jobs", type=int, default=None, help="worker processes (default EL_MISSING_JOBS)")
    common.add_argument("--out", default=None)

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", required=True, help="CSV file with a header row, NA marks missing y")
    data.add_argument("--columns", required=True, help="column config, one 'name = x|y[:binary]' per line")

    sub.add_parser("impute", parents=[common, data], help="draw kappa donors per missing row")

    fit = sub.add_parser("fit", parents=[common, data], help="estimate theta and confidence intervals")
    fit.add_argument("--method", default="nimpute", choices=list(METHODS))
    fit.add_argument("--estfun", default="mean", help=f"one of {', '.join(available_estfuns())}")
    fit.add_argument("--calibration", default="bootstrap", choices=["normal", "chisq-mix", "bootstrap"])
    fit.add_argument("--alpha", type=float, default=0.05)
    fit.add_argument("--B", type=int, default=400)
    fit.add_argument("--M", type=int, default=100000)
    fit.add_argument("--coords", type=_int_list, default=None, help="profile only these coordinates")
    fit.add_argument("--fixed-kappa", dest="fixed_kappa", action="store_true",
                     help="report Gamma diagonals for the sample kappa next to the kappa -> infinity limit")

    simulate = sub.add_parser("simulate", parents=[common], help="Monte Carlo study of a scenario")
    simulate.add_argument("--scenario", required=True)
    simulate.add_argument("--n", type=int, default=200)
    simulate.add_argument("--R", type=int, default=100)
    simulate.add_argument("--B", type=int, default=400)
    simulate.add_argument("--alpha", type=float, default=0.05)
    simulate.add_argument("--methods", type=_method_list, default=None)
    simulate.add_argument("--no-intervals", dest="intervals", action="store_false")
    simulate.add_argument("--truth-draws", dest="truth_draws", type=int, default=10_000_000)
    return parser


def _kernel(cfg: RunConfig, data: Dataset) -> KernelSpec:
    order = cfg.kernel_order
    if cfg.bandwidth != "auto":
        return KernelSpec(bandwidth=float(cfg.bandwidth), order=order)
    if cfg.bandwidth_rule == "higher-order":
        order = max(order, 4)
    return KernelSpec(bandwidth=select_bandwidth(data, cfg.bandwidth_rule, order), order=order)


def cmd_impute(cfg: RunConfig) -> int:
    data = load_csv(cfg.data, cfg.columns)
    kernel = _kernel(cfg, data)
    conditions = validate_conditions(data, kernel)
    es = impute(data, kernel, cfg.kappa, seed=cfg.seed, jobs=cfg.jobs)
    out = cfg.out or f"{cfg.data}.imputed"
    write_extended_sample(es, out, cfg.data, cfg.columns)

    items = [
        ("n", data.n), ("n_complete", data.n_complete), ("bandwidth", kernel.bandwidth),
        ("kernel_order", kernel.order), ("kappa", cfg.kappa), ("extended_sample", out),
    ]
    items += [(f"warning.{k}", message) for k, message in enumerate(conditions.warnings)]
    sys.stdout.write(format_key_values(items))
    return 0


def _calibrate(cfg: RunConfig, es: ExtendedSample, g, fit, kernel: Optional[KernelSpec]) -> CalibrationResult:
    if cfg.calibration == "bootstrap":
        return bootstrap_calibrate(es, g, fit, B=cfg.B, alpha=cfg.alpha, seed=cfg.seed, jobs=cfg.jobs, coords=cfg.coords)
    asym = estimate_asymptotics(es, g, fit.theta_hat, kernel)
    if cfg.calibration == "normal":
        return ci_normal(fit, asym, cfg.alpha)
    return chisq_mix_calibrate(es, g, fit, asym, alpha=cfg.alpha, M=cfg.M, seed=cfg.seed, coords=cfg.coords)


def _linreg_table(cfg: RunConfig, data: Dataset, result: CalibrationResult) -> str:
    """Side-by-side EL and complete-case OLS estimates, plus the Fisher z correlation interval"""
    ols = complete_case_ols(data, cfg.alpha)
    rows = data.complete_index
    r = float(np.corrcoef(data.x[rows, 0], data.y[rows, 0])[0, 1])
    fisher = fisher_z_interval(r, len(rows), cfg.alpha)
    lines = [f"{'parameter':<10} {'EL estimate':>12} {'EL interval':>24} {'OLS estimate':>13} {'t interval':>24}"]
    for j, name in enumerate(("intercept", "slope")):
        try:
            el = result.interval(name)
            el_text = f"({el.lower:.4f}, {el.upper:.4f})"
        except KeyError:
            el_text = "-"
        ci = ols.intervals[j]
        lines.append(
            f"{name:<10} {result.estimate[j]:>12.4f} {el_text:>24} {ols.estimate[j]:>13.4f} "
            f"{f'({ci.lower:.4f}, {ci.upper:.4f})':>24}"
        )
    lines.append(f"complete-case correlation {r:.4f}, Fisher z interval ({fisher.lower:.4f}, {fisher.upper:.4f})")
    return "\n".join(lines)


def cmd_fit(cfg: RunConfig) -> int:
    data = load_csv(cfg.data, cfg.columns)
    g = get_estfun(cfg.estfun, data)
    items: List[Tuple[str, object]] = [("method", cfg.method), ("estfun", g.name), ("n", data.n),
                                       ("n_complete", data.n_complete)]
    if cfg.fixed_kappa and cfg.method != "nimpute":
        raise DataValidationError("--fixed-kappa needs --method nimpute")

    if cfg.method == "wgmm":
        kernel = None if cfg.bandwidth == "auto" else KernelSpec(bandwidth=float(cfg.bandwidth), order=cfg.kernel_order)
        w = weighted_gmm(data, g, kernel)
        items += [(f"theta.{name}", value) for name, value in zip(g.param_names, w.theta_tilde)]
        items += [("objective", w.objective), ("propensity_clamped", w.propensity.clamp_fraction)]
        items += calibration_items(wgmm_ci_normal(w, cfg.alpha))
        if cfg.out:
            write_fit_report(cfg.out, items)
        else:
            sys.stdout.write(format_key_values(items))
        return 0

    kernel = None
    if cfg.method == "nimpute":
        kernel = _kernel(cfg, data)
        validate_conditions(data, kernel)
        es = impute(data, kernel, cfg.kappa, seed=cfg.seed, jobs=cfg.jobs)
        items += [("kappa", cfg.kappa), ("bandwidth", kernel.bandwidth), ("kernel_order", kernel.order)]
    elif cfg.method == "complete":
        es = complete_case_sample(data)
    else:
        es = ExtendedSample.from_complete(data)

    fit = mele(es, g, seed=cfg.seed or 0, jobs=cfg.jobs)
    items += [(f"theta.{name}", value) for name, value in zip(g.param_names, fit.theta_hat)]
    items += [("logelr", fit.logelr), ("converged", fit.converged), ("q2_norm", fit.q2_norm)]
    if cfg.fixed_kappa:
        gammas = fixed_kappa_gammas(es, g, fit.theta_hat, kernel)
        items += [(f"{key}.{j}", matrix[j, j]) for key, matrix in gammas.items() for j in range(g.r)]
    result = _calibrate(cfg, es, g, fit, kernel)
    items += calibration_items(result)

    table = _linreg_table(cfg, data, result) if g.name == "linreg" else None
    if cfg.out:
        write_fit_report(cfg.out, items, table)
    else:
        sys.stdout.write(format_key_values(items))
        if table:
            sys.stdout.write("".join(f"# {line}\n" for line in table.splitlines()))
    return 0


def cmd_simulate(cfg: RunConfig) -> int:
    scenario = make_scenario(cfg.scenario, cfg.n)
    report = run_study(
        scenario,
        methods=cfg.methods or list(METHODS),
        R=cfg.R,
        B=cfg.B,
        kappa=cfg.kappa,
        seed=cfg.seed,
        alpha=cfg.alpha,
        calibration="bootstrap" if cfg.intervals else "none",
        bandwidth_rule=cfg.bandwidth_rule,
        kernel_order=max(cfg.kernel_order, 4),
        truth_draws=cfg.truth_draws,
        jobs=cfg.jobs,
    )
    if cfg.out:
        text_path = cfg.out.rsplit(".", 1)[0] + ".txt" if cfg.out.endswith(".csv") else cfg.out + ".txt"
        write_study_report(report, cfg.out, text_path)
    else:
        sys.stdout.write(format_report(report))
    return 0


COMMANDS = {"impute": cmd_impute, "fit": cmd_fit, "simulate": cmd_simulate}


def main(argv: Optional[Sequence[str]] = None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    options = {key: value for key, value in vars(args).items() if value is not None}
    options.setdefault("jobs", get_settings().default_jobs)
    try:
        cfg = RunConfig(**options)
        return COMMANDS[cfg.subcommand](cfg)
    except ValidationError as e:
        message = "; ".join(err["msg"] for err in e.errors())
        print(f"error: {message}", file=sys.stderr)
        return 2
    except ElMissingError as e:
        logger.debug("Command failed", exc_info=True)
        diagnostics = getattr(e, "diagnostics", None)
        print(f"error: {e}" + (f" {diagnostics}" if diagnostics else ""), file=sys.stderr)
        return e.exit_code
