"""``agebif`` command line: critical point, branch continuation and invariant suites.

Exit codes: 0 success, 2 the model violates a structural hypothesis,
1 parse or numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import warnings
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .ageprop import (
    Discretization,
    NonCommutingError,
    PositivityError,
    PreconditionError,
    PropagationError,
    SpectralError,
    find_lambda0,
    rq_curve,
)
from .analysis import check_growth_condition, subcriticality_report, transversality_check
from .checks import run_suite
from .config import ConfigError, RunConfig, load_config
from .equilibrium import MissingDerivativeError, continue_branch, tangent_at_critical
from .expr import CoefficientEvaluationError, ExpressionSyntaxError
from .io import write_csv, write_json
from .model import validate
from .spatial import EigenSolverError, PecletError

log = logging.getLogger("agebif")

EXIT_OK, EXIT_FAIL, EXIT_PRECONDITION = 0, 1, 2

NUMERICAL_ERRORS = (
    SpectralError,
    PositivityError,
    PropagationError,
    EigenSolverError,
    PecletError,
    CoefficientEvaluationError,
    MissingDerivativeError,
    NonCommutingError,
    ArithmeticError,
    np.linalg.LinAlgError,
)


class _Precondition(Exception):
    pass


class Run:
    """Shared state of one command: summary document and output directory."""

    def __init__(self, command: str, out: Path, quiet: bool):
        self.command = command
        self.out = out
        self.quiet = quiet
        self.summary = {
            "command": command,
            "lambda0": None,
            "sigma1": None,
            "verdict": "n/a",
            "status": "error",
            "message": "",
            "grid": None,
            "model": None,
            "model_hash": None,
            "version": __version__,
        }

    def say(self, text: str):
        if not self.quiet:
            print(text)

    def finish(self, code: int, message: str = "") -> int:
        self.summary["exit_code"] = code
        if message:
            self.summary["message"] = message
        if code == EXIT_OK:
            self.summary["status"] = "ok"
        elif code == EXIT_PRECONDITION:
            self.summary["status"] = "precondition-failed"
        write_json(self.out / "summary.json", self.summary)
        if code != EXIT_OK:
            print(f"agebif {self.command}: {message}", file=sys.stderr)
        return code


def _threads() -> int:
    raw = os.environ.get("AGEBIF_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _setup(cfg: RunConfig, run: Run):
    model = cfg.model.build()
    run.summary["model"] = model.describe()
    run.summary["model_hash"] = model.hash()
    report = validate(model)
    if not report.passed:
        raise _Precondition("model invariants violated: " + "; ".join(str(v) for v in report.violations))
    d = cfg.discretization
    disc = Discretization(model, d.n, d.M, d.scheme)
    run.summary["grid"] = {
        "n": d.n,
        "M": d.M,
        "scheme": d.scheme,
        "h_x": disc.grid.h,
        "h_a": disc.ages.h,
        "active_nodes": disc.grid.size,
        "length": model.length,
        "max_age": model.max_age,
    }
    run.summary["sigma1"] = disc.sigma1
    return disc


def _critical(cfg: RunConfig, run: Run, disc: Discretization):
    growth = check_growth_condition(disc)
    run.summary["r_Q0"] = growth.r0
    run.summary["k0_closed_form"] = growth.k0
    run.summary["growth_condition"] = {"name": growth.condition, "holds": growth.holds}
    if not growth.holds:
        raise _Precondition(growth.message())
    lam0, res = find_lambda0(disc)
    run.summary["lambda0"] = lam0
    run.summary["eigen_residual"] = res.residual
    lambdas = np.linspace(0.0, 2 * lam0, cfg.output.rq_points)
    rows = rq_curve(disc, lambdas, workers=_threads())
    write_csv(run.out / "rq_curve.csv", ["lambda", "r", "iterations"], rows)
    x = disc.grid.x_active
    write_csv(run.out / "eigenvector.csv", ["x", "B"], zip(x, res.vector))
    run.say(f"sigma1  = {disc.sigma1:.10g}")
    run.say(f"r(Q_0)  = {growth.r0:.10g}")
    run.say(f"lambda0 = {lam0:.10g}")
    return lam0, res


def _guarded(run: Run, body) -> int:
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            body()
    except _Precondition as exc:
        return run.finish(EXIT_PRECONDITION, str(exc))
    except PreconditionError as exc:
        return run.finish(EXIT_PRECONDITION, str(exc))
    except (ExpressionSyntaxError, ConfigError) as exc:
        return run.finish(EXIT_FAIL, str(exc))
    except NUMERICAL_ERRORS as exc:
        return run.finish(EXIT_FAIL, f"{type(exc).__name__}: {exc}")
    except ValueError as exc:
        return run.finish(EXIT_FAIL, str(exc))
    return run.finish(EXIT_OK)


def cmd_critical(cfg: RunConfig, run: Run) -> int:
    def body():
        disc = _setup(cfg, run)
        _critical(cfg, run, disc)
        run.summary["verdict"] = "bifurcation point"

    return _guarded(run, body)


def cmd_branch(cfg: RunConfig, run: Run) -> int:
    def body():
        disc = _setup(cfg, run)
        lam0, res = _critical(cfg, run, disc)
        if disc.scheme != "implicit-euler":
            # the equilibrium residual marches age with implicit Euler; use its own critical point
            disc = Discretization(disc.model, disc.n, disc.M)
            lam0, res = find_lambda0(disc)
            run.summary["branch_scheme"] = {"scheme": "implicit-euler", "lambda0": lam0}
        T = tangent_at_critical(disc, lam0, res.vector)
        c = cfg.continuation
        diagram = continue_branch(
            disc, lam0, T, c.eps_max, c.steps,
            newton_tol=c.newton_tol, initial_step=c.initial_step, max_step=c.max_step,
            allow_fd=c.allow_fd,
        )
        rows = [
            (p.eps, p.lam, p.l2_norm, p.sup_norm, p.min_entry, p.residual_norm, p.newton_iters)
            for p in diagram.points
        ]
        write_csv(
            run.out / "branch.csv",
            ["eps", "lambda", "l2_norm_u", "sup_norm_u", "min_u", "residual", "newton_iters"],
            rows,
        )
        sub = subcriticality_report(disc, diagram)
        diagram.verdict = sub.verdict
        pos = diagram.positive()
        run.summary["verdict"] = sub.verdict
        run.summary["subcritical"] = sub.subcritical
        run.summary["branch"] = {
            "points": len(diagram.points),
            "positive_points": len(pos),
            "negative_points": len(diagram.negative()),
            "terminations": diagram.terminations,
            "all_positive_nonnegative": all(p.physical for p in pos),
            "max_lambda_positive": max((p.lam for p in pos), default=None),
            "continuation": diagram.metadata,
        }
        run.summary["subcriticality"] = sub.as_dict()
        try:
            tr = transversality_check(disc, lam0, res.vector)
            run.summary["transversality"] = tr.as_dict()
        except (NonCommutingError, ValueError) as exc:
            run.summary["transversality"] = {"skipped": str(exc)}
        run.say(f"branch: {len(diagram.points)} points ({len(pos)} with eps > 0), verdict {sub.verdict}")

    return _guarded(run, body)


def cmd_validate(cfg: RunConfig, run: Run) -> int:
    failed = []

    def body():
        disc = _setup(cfg, run)
        run.summary["family"] = cfg.family
        results = run_suite(disc)
        table = [(r.name, "pass" if r.passed else "fail", r.detail) for r in results]
        write_csv(run.out / "validate.csv", ["invariant", "result", "detail"], table)
        run.summary["invariants"] = {r.name: {"passed": r.passed, "detail": r.detail} for r in results}
        for r in results:
            run.say(r.line())
        failed.extend(r.name for r in results if not r.passed)
        run.summary["verdict"] = "pass" if not failed else "fail"
        if failed:
            raise ValueError("failed invariants: " + ", ".join(failed))

    code = _guarded(run, body)
    return EXIT_FAIL if code == EXIT_PRECONDITION else code


COMMANDS = {"critical": cmd_critical, "branch": cmd_branch, "validate": cmd_validate}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI run configuration")
    common.add_argument("--family", help="built-in test family instead of a config model")
    common.add_argument("--out", type=Path, help="output directory (overrides the config)")
    common.add_argument("--n", type=int, help="spatial intervals")
    common.add_argument("--M", type=int, help="age steps")
    common.add_argument("--mode", choices=("standard", "holling-tanner"))
    common.add_argument("--sign", choices=("+", "-"), help="Holling-Tanner reaction sign")
    common.add_argument("--quiet", action="store_true")

    parser = argparse.ArgumentParser(prog="agebif", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"agebif {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("critical", parents=[common], help="critical intensity and r(Q_lambda) curve")
    sub.add_parser("branch", parents=[common], help="continue the bifurcating branch")
    sub.add_parser("validate", parents=[common], help="run the invariant suites")
    return parser


def _load(args) -> RunConfig:
    if args.config is not None:
        cfg = load_config(args.config)
    else:
        cfg = RunConfig()
    if args.family is not None:
        from .families import get_family

        fam = get_family(args.family)
        cfg = RunConfig(fam.model, fam.discretization, cfg.continuation, cfg.output, fam.name)
    sign = None if args.sign is None else (1 if args.sign == "+" else -1)
    cfg = cfg.with_overrides(n=args.n, M=args.M, mode=args.mode, sign=sign, out=args.out)
    cfg.check()
    return cfg


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    out = args.out if args.out is not None else Path("out")
    try:
        cfg = _load(args)
        out = Path(cfg.output.directory)
    except (ConfigError, ExpressionSyntaxError, ValueError) as exc:
        run = Run(args.command, out, args.quiet)
        return run.finish(EXIT_FAIL, str(exc))
    run = Run(args.command, out, args.quiet)
    snapshot = cfg.as_dict()
    snapshot["output"].pop("directory", None)
    run.summary["config"] = snapshot
    return COMMANDS[args.command](cfg, run)


if __name__ == "__main__":
    sys.exit(main())
