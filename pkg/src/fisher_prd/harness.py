"""Experiment configuration, ensemble execution and aggregation.

An ensemble samples (or loads) one market per run, certifies its
equilibrium, runs the configured dynamic against it and writes a trajectory
CSV per run plus ``aggregate.csv`` with cross-run means and ``runs.csv``
with per-run outcomes.
"""

from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import (
    ActivationSchedule,
    DynamicsConfig,
    default_initial_bids,
    make_random_sequential_schedule,
    make_random_subset_schedule,
    make_round_robin_schedule,
    make_synchronous_schedule,
    run_dynamics,
    validate_liveness,
)
from .equilibrium import compute_equilibrium, genericity_check
from .errors import ConfigError, InvalidInputError, OracleFailureError
from .market import MarketInstance, generate_random_market, validate_market
from .serialization import (
    format_real,
    read_json,
    read_market,
    read_schedule,
    read_trajectory,
    write_trajectory,
)

log = logging.getLogger(__name__)

SCHEDULE_KINDS = ("round-robin", "synchronous", "random-subset", "random-sequential", "file")
CONVERGENCE_TARGET = 1e-6
# genericity is a per-run diagnostic here; pairs and triples of entries suffice
GENERICITY_BUDGET = 10_000


@dataclass
class ExperimentConfig:
    """Everything an ensemble needs.

    ``market`` is ``{"file": path}`` or ``{"n": .., "m": .., "seed": ..}``;
    a fixed seed or file gives every run the same market, while ``seed:
    null`` draws a fresh market per run. ``schedule`` has ``kind`` (one of
    :data:`SCHEDULE_KINDS`), ``T`` for random subsets, ``seed`` (``null``
    for per-run seeds) and ``file`` for stored schedules.
    """

    market: dict = field(default_factory=lambda: {"n": 10, "m": 10, "seed": None})
    schedule: dict = field(default_factory=lambda: {"kind": "random-sequential", "seed": None})
    dynamics: dict = field(default_factory=dict)
    ensemble: dict = field(default_factory=lambda: {"size": 1, "seed": 0})
    output: dict = field(default_factory=lambda: {"dir": "out"})

    def __post_init__(self):
        for name in ("market", "schedule", "dynamics", "ensemble", "output"):
            if not isinstance(getattr(self, name), dict):
                raise ConfigError(f"config section {name!r} must be an object")
        size = self.ensemble.get("size", 1)
        if not isinstance(size, int) or size < 1:
            raise ConfigError("ensemble size must be a positive integer")
        if "file" in self.market:
            if not Path(self.market["file"]).is_file():
                raise ConfigError(f"market file {self.market['file']} does not exist")
        elif not all(isinstance(self.market.get(k), int) and self.market[k] >= 1 for k in ("n", "m")):
            raise ConfigError("market section needs a file or positive integers n and m")
        kind = self.schedule.get("kind", "random-sequential")
        if kind not in SCHEDULE_KINDS:
            raise ConfigError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
        if kind == "file" and not Path(self.schedule.get("file", "")).is_file():
            raise ConfigError(f"schedule file {self.schedule.get('file')} does not exist")
        if kind == "random-subset" and not (isinstance(self.schedule.get("T"), int) and self.schedule["T"] >= 1):
            raise ConfigError("random-subset schedules need an integer T >= 1")
        unknown = set(self.dynamics) - {"rule", "max_steps", "tolerance", "record_every"}
        if unknown:
            raise ConfigError(f"unknown dynamics keys {sorted(unknown)}")
        self.dynamics_config()  # validates

    def dynamics_config(self) -> DynamicsConfig:
        return DynamicsConfig(**self.dynamics)

    @classmethod
    def from_dict(cls, data) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(data) - {"market", "schedule", "dynamics", "ensemble", "output"}
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        defaults = cls.__dataclass_fields__
        kwargs = {k: data.get(k, defaults[k].default_factory()) for k in defaults}
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            data = read_json(path)
        except InvalidInputError as exc:
            raise ConfigError(str(exc)) from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)


def run_seeds(master: int, index: int) -> tuple[int, int, int]:
    """Market, schedule and oracle seeds of run ``index``."""
    state = np.random.SeedSequence([master, index]).generate_state(3)
    return tuple(int(s) for s in state)


def build_schedule(spec: dict, n: int, steps: int, seed: int) -> ActivationSchedule:
    kind = spec.get("kind", "random-sequential")
    if kind == "round-robin":
        return make_round_robin_schedule(n, steps)
    if kind == "synchronous":
        return make_synchronous_schedule(n, steps)
    if kind == "random-subset":
        return make_random_subset_schedule(n, steps, spec["T"], seed)
    if kind == "random-sequential":
        return make_random_sequential_schedule(n, steps, seed)
    if kind == "file":
        s = read_schedule(spec["file"], n)
        T = spec.get("T") or s.liveness_T
        if T is not None and not validate_liveness(s, T):
            raise ConfigError(f"schedule file is not {T}-live")
        return s
    raise ConfigError(f"unknown schedule kind {kind!r}")


@dataclass
class RunResult:
    index: int
    market_seed: int | None
    schedule_seed: int
    status: str
    steps: int = 0
    converged: bool = False
    steps_to_target: int | None = None
    generic_verdict: str | None = None
    columns: dict | None = field(default=None, repr=False)


def _market_for(config: ExperimentConfig, seed: int) -> tuple[MarketInstance, int | None]:
    spec = config.market
    if "file" in spec:
        return read_market(spec["file"]), None
    market_seed = spec["seed"] if spec.get("seed") is not None else seed
    return generate_random_market(spec["n"], spec["m"], market_seed), market_seed


def _execute(config: ExperimentConfig, index: int) -> RunResult:
    master = config.ensemble.get("seed", 0)
    market_seed, schedule_seed, oracle_seed = run_seeds(master, index)
    if config.schedule.get("seed") is not None:
        schedule_seed = config.schedule["seed"]
    market, market_seed = _market_for(config, market_seed)
    report = validate_market(market)
    if not report.ok:
        raise InvalidInputError("invalid market: " + "; ".join(report.violations))
    dyn = config.dynamics_config()
    schedule = build_schedule(config.schedule, market.n, dyn.max_steps, schedule_seed)
    try:
        cert = compute_equilibrium(market, seed=oracle_seed)
    except OracleFailureError as exc:
        log.warning("run %d: %s", index, exc)
        return RunResult(index, market_seed, schedule_seed, "oracle-failure")
    verdict = genericity_check(market, max_subsets=GENERICITY_BUDGET).status
    cert.generic_verdict = verdict
    traj = run_dynamics(market, default_initial_bids(market), schedule, dyn, certificate=cert)
    traj.distance_is_upper_bound = verdict == "non-generic"
    out_dir = Path(config.output.get("dir", "out"))
    write_trajectory(traj, out_dir / f"run_{index:04d}.csv")
    columns = {"t": traj.t, "potential": traj.potential, "nsw": traj.nsw, "distance": traj.distance}
    return RunResult(
        index, market_seed, schedule_seed, "ok", traj.steps, traj.converged,
        traj.steps_to(CONVERGENCE_TARGET), verdict, columns,
    )


@dataclass
class EnsembleSummary:
    """Per-run outcomes and cross-run mean curves.

    Mean curves are aligned by record index and have the length of the
    longest successful run; shorter runs contribute their terminal value past
    their end, and ``padded_fraction`` gives the share of runs padded at
    each row.
    """

    runs: list
    t: np.ndarray
    means: dict
    padded_fraction: np.ndarray
    failures: int

    @property
    def convergence_steps(self) -> list:
        return [r.steps_to_target for r in self.runs if r.status == "ok"]


def aggregate(results: list) -> tuple[np.ndarray, dict, np.ndarray]:
    ok = [r for r in results if r.status == "ok"]
    if not ok:
        return np.zeros(0, dtype=int), {k: np.zeros(0) for k in ("potential", "nsw", "distance")}, np.zeros(0)
    longest = max(ok, key=lambda r: r.columns["t"].size)
    length = longest.columns["t"].size
    means, padded = {}, np.zeros(length)
    for metric in ("potential", "nsw", "distance"):
        stack = np.empty((len(ok), length))
        for k, r in enumerate(ok):
            col = r.columns[metric]
            stack[k, : col.size] = col
            stack[k, col.size:] = col[-1]
        means[metric] = stack.mean(axis=0)
    for r in ok:
        padded[r.columns["t"].size:] += 1
    return longest.columns["t"].copy(), means, padded / len(ok)


def _workers(config: ExperimentConfig, size: int) -> int:
    workers = int(config.ensemble.get("workers", os.cpu_count() or 1))
    cap = os.environ.get("FPR_WORKERS")
    if cap:
        try:
            workers = min(workers, int(cap))
        except ValueError as exc:
            raise ConfigError(f"FPR_WORKERS must be an integer, got {cap!r}") from exc
    return max(1, min(workers, size))


def run_ensemble(config: ExperimentConfig) -> EnsembleSummary:
    """Execute every run of the ensemble and write its output files.

    Runs execute in a process pool capped by ``ensemble.workers`` and the
    ``FPR_WORKERS`` environment variable. Each run derives its seeds from the
    master seed and its index alone, so results do not depend on the pool.
    """
    size = config.ensemble.get("size", 1)
    out_dir = Path(config.output.get("dir", "out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    workers = _workers(config, size)
    if workers == 1:
        results = [_execute(config, k) for k in range(size)]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_execute, [config] * size, range(size)))
    t, means, padded = aggregate(results)
    summary = EnsembleSummary(
        runs=results, t=t, means=means, padded_fraction=padded,
        failures=sum(r.status != "ok" for r in results),
    )
    write_aggregate(summary, out_dir / "aggregate.csv")
    write_runs(results, out_dir / "runs.csv")
    return summary


def write_aggregate(summary: EnsembleSummary, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "potential", "nsw", "distance", "padded_fraction"])
        for k in range(summary.t.size):
            w.writerow(
                [str(int(summary.t[k]))]
                + [format_real(summary.means[m][k]) for m in ("potential", "nsw", "distance")]
                + [format_real(summary.padded_fraction[k])]
            )


def write_runs(results: list, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "market_seed", "schedule_seed", "status", "steps", "converged",
                    "steps_to_target", "generic_verdict"])
        for r in results:
            w.writerow([r.index, "" if r.market_seed is None else r.market_seed, r.schedule_seed,
                        r.status, r.steps, int(r.converged),
                        "" if r.steps_to_target is None else r.steps_to_target,
                        r.generic_verdict or ""])


def read_aggregate(path) -> dict:
    try:
        with Path(path).open(newline="") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError as exc:
        raise InvalidInputError(f"no such file: {path}") from exc
    if not rows or rows[0] != ["t", "potential", "nsw", "distance", "padded_fraction"]:
        raise InvalidInputError(f"{path}: not an aggregate CSV")
    vals = np.array([[float(x) for x in r] for r in rows[1:]], dtype=float).reshape(-1, 5)
    out = {"t": vals[:, 0].astype(int)}
    for k, name in enumerate(rows[0][1:], start=1):
        out[name] = vals[:, k]
    return out


# --------------------------------------------------------------------------
# report


def report_rows(paths) -> list[tuple]:
    """Long-format ``(source, t, metric, value)`` rows from aggregate or
    trajectory CSVs."""
    rows = []
    for path in paths:
        path = Path(path)
        try:
            with path.open(newline="") as fh:
                header = next(csv.reader(fh), [])
        except FileNotFoundError as exc:
            raise InvalidInputError(f"no such file: {path}") from exc
        if header and header[-1] == "padded_fraction":
            data = read_aggregate(path)
            metrics = ["potential", "nsw", "distance", "padded_fraction"]
        else:
            data = read_trajectory(path)
            metrics = ["potential", "nsw", "distance"]
            for j in range(data["prices"].shape[1]):
                data[f"price_{j}"] = data["prices"][:, j]
                metrics.append(f"price_{j}")
        for k, t in enumerate(data["t"]):
            for metric in metrics:
                rows.append((path.name, int(t), metric, float(data[metric][k])))
    return rows


def write_report(rows, out) -> None:
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["source", "t", "metric", "value"])
    for source, t, metric, value in rows:
        w.writerow([source, t, metric, format_real(value)])
