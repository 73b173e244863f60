"""Command-line interface: ``fpr <subcommand> ...``.

Exit status is 0 on success, 1 on invalid input or usage, 2 when the
equilibrium oracle or a required convergence fails.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .dynamics import DynamicsConfig, default_initial_bids, run_dynamics, validate_liveness
from .equilibrium import compute_equilibrium, genericity_check, verify_equilibrium
from .errors import ConfigError, InvalidInputError, MarketError, OracleFailureError
from .harness import SCHEDULE_KINDS, ExperimentConfig, build_schedule, report_rows, run_ensemble, write_report
from .market import bid_violations, generate_random_market, validate_market
from .serialization import (
    read_bids,
    read_market,
    write_bids,
    write_certificate,
    write_market,
    write_trajectory,
)

EXIT_OK, EXIT_INVALID, EXIT_ORACLE = 0, 1, 2

log = logging.getLogger("fisher_prd")


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; 2 is reserved for oracle failures here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _load_market(path):
    market = read_market(path)
    report = validate_market(market)
    if not report.ok:
        raise InvalidInputError("invalid market: " + "; ".join(report.violations))
    for w in report.warnings:
        log.warning("%s", w)
    return market


def _print_residuals(cert) -> None:
    for name, value in cert.residuals.items():
        print(f"{name}: {value:.3e}")
    print(f"acyclic: {cert.acyclic}")
    print(f"accepted: {cert.accepted}")


def cmd_generate(args) -> int:
    market = generate_random_market(args.n, args.m, args.seed)
    write_market(market, args.out)
    return EXIT_OK


def cmd_run(args) -> int:
    market = _load_market(args.market)
    spec = {"kind": "file", "file": args.schedule} if Path(args.schedule).suffix == ".json" else {"kind": args.schedule}
    if spec["kind"] not in SCHEDULE_KINDS:
        raise ConfigError(f"unknown schedule {args.schedule!r}; use one of {SCHEDULE_KINDS[:-1]} or a .json file")
    if args.T is not None:
        spec["T"] = args.T
    if spec["kind"] == "random-subset" and args.T is None:
        raise ConfigError("random-subset schedules need --T")
    schedule = build_schedule(spec, market.n, args.steps, args.seed)
    if args.require_T is not None and not validate_liveness(schedule, args.require_T):
        raise ConfigError(f"schedule is not {args.require_T}-live")
    config = DynamicsConfig(rule=args.rule, max_steps=args.steps, tolerance=args.tolerance,
                            record_every=args.record_every)
    cert = None
    if not args.no_oracle:
        cert = compute_equilibrium(market, seed=args.seed)
    traj = run_dynamics(market, default_initial_bids(market), schedule, config, certificate=cert)
    write_trajectory(traj, args.out)
    if args.bids_out:
        write_bids(traj.final_bids, args.bids_out)
    print(f"steps: {traj.steps}")
    print(f"converged: {traj.converged}")
    if cert is not None:
        print(f"final price error: {traj.price_errors[-1]:.3e}")
    if args.require_convergence and not traj.converged:
        log.error("run did not converge within %d steps", traj.steps)
        return EXIT_ORACLE
    return EXIT_OK


def cmd_verify(args) -> int:
    market = _load_market(args.market)
    b = read_bids(args.bids)
    if b.shape != (market.n, market.m):
        raise InvalidInputError(f"bids have shape {b.shape}, market is {(market.n, market.m)}")
    problems = bid_violations(b, market, tol=args.tol)
    for p in problems:
        log.warning("%s", p)
    cert = verify_equilibrium(b, market, tol=args.tol)
    if args.out:
        write_certificate(cert, args.out)
    _print_residuals(cert)
    return EXIT_OK if cert.accepted else EXIT_INVALID


def cmd_solve(args) -> int:
    market = _load_market(args.market)
    cert = compute_equilibrium(market, tol=args.tol, seed=args.seed)
    cert.generic_verdict = genericity_check(market).status
    write_certificate(cert, args.out)
    _print_residuals(cert)
    return EXIT_OK


def cmd_ensemble(args) -> int:
    config = ExperimentConfig.load(args.config).to_dict() if args.config else ExperimentConfig().to_dict()
    overrides = {
        ("market", "n"): args.n, ("market", "m"): args.m, ("market", "file"): args.market,
        ("schedule", "kind"): args.schedule, ("schedule", "T"): args.T,
        ("dynamics", "rule"): args.rule, ("dynamics", "max_steps"): args.steps,
        ("dynamics", "tolerance"): args.tolerance, ("dynamics", "record_every"): args.record_every,
        ("ensemble", "size"): args.size, ("ensemble", "seed"): args.seed,
        ("ensemble", "workers"): args.workers, ("output", "dir"): args.out_dir,
    }
    for (section, key), value in overrides.items():
        if value is not None:
            config[section][key] = value
    summary = run_ensemble(ExperimentConfig.from_dict(config))
    ok = len(summary.runs) - summary.failures
    print(f"runs: {len(summary.runs)} ok: {ok} failures: {summary.failures}")
    return EXIT_ORACLE if summary.failures else EXIT_OK


def cmd_report(args) -> int:
    rows = report_rows(args.inputs)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            write_report(rows, fh)
    else:
        try:
            write_report(rows, sys.stdout)
        except BrokenPipeError:
            # reader closed early, as with `| head`; silence the flush at exit
            os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fpr", description="Proportional response dynamics in linear Fisher markets.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="sample a random market")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("run", help="run one trajectory")
    p.add_argument("--market", required=True)
    p.add_argument("--rule", default="prd")
    p.add_argument("--schedule", default="round-robin",
                   help="round-robin, synchronous, random-subset, random-sequential, or a schedule .json file")
    p.add_argument("--T", type=int, help="liveness bound for random-subset schedules")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=100_000)
    p.add_argument("--tolerance", type=float, default=1e-9)
    p.add_argument("--record-every", type=int, default=1)
    p.add_argument("--require-T", type=int, help="fail unless the schedule is T-live")
    p.add_argument("--require-convergence", action="store_true")
    p.add_argument("--no-oracle", action="store_true", help="skip the equilibrium oracle (no distance column)")
    p.add_argument("--bids-out")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify", help="check a bid profile against the equilibrium conditions")
    p.add_argument("--market", required=True)
    p.add_argument("--bids", required=True)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--out")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("solve", help="certify the equilibrium of a market")
    p.add_argument("--market", required=True)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("ensemble", help="run an ensemble of trajectories")
    p.add_argument("--config")
    p.add_argument("--n", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--market")
    p.add_argument("--schedule", choices=SCHEDULE_KINDS[:-1])
    p.add_argument("--T", type=int)
    p.add_argument("--rule")
    p.add_argument("--steps", type=int)
    p.add_argument("--tolerance", type=float)
    p.add_argument("--record-every", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("report", help="merge CSV outputs into a long-format table")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except OracleFailureError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ORACLE
    except (MarketError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


cli_dispatch = main

if __name__ == "__main__":
    sys.exit(main())
