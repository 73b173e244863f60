"""Update rules, activation schedules and the trajectory runner.

Two update rules act on a bid profile:

* proportional response (PRD): every activated buyer rebids its budget in
  proportion to the utility each good delivered at the current bids;
* best response (BR) in the associated game, computed by the prefix scan
  over goods sorted by ``a_ij / theta_ij`` (water-filling).

An adversary picks which buyers update at each step. ``ActivationSchedule``
records those choices and the liveness bound ``T`` they respect.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateStateError, InvalidInputError
from .market import MarketInstance, allocate, as_bids, as_subset, bid_violations

log = logging.getLogger(__name__)

PRD = "prd"
BR = "br"
_RULE_ALIASES = {
    "prd": PRD,
    "proportional-response": PRD,
    "proportional_response": PRD,
    "br": BR,
    "best-response": BR,
    "best_response": BR,
}


# --------------------------------------------------------------------------
# proportional response


def _prd_rows(b: np.ndarray, p: np.ndarray, idx: np.ndarray, market: MarketInstance) -> np.ndarray:
    rows = b[idx]
    x = np.zeros_like(rows)
    np.divide(rows, p, out=x, where=rows > 0)
    gains = market.valuations[idx] * x
    u = gains.sum(axis=1)
    if np.any(u <= 0):
        bad = idx[u <= 0].tolist()
        raise DegenerateStateError(f"activated buyers {bad} have zero utility")
    budgets = market.budgets[idx]
    new = gains * (budgets / u)[:, None]
    # rescale so each row sums to its budget exactly; a no-op up to rounding
    new *= (budgets / new.sum(axis=1))[:, None]
    return new


def prd_step(b, v, market: MarketInstance) -> np.ndarray:
    """Apply proportional response for the buyers in ``v``; others keep their bids.

    Activated rows become ``B_i * a_ij * x_ij / u_i``.
    """
    b = as_bids(b, market)
    idx = as_subset(v, market.n)
    out = b.copy()
    if idx.size:
        out[idx] = _prd_rows(b, b.sum(axis=0), idx, market)
    return out


# --------------------------------------------------------------------------
# best response


@dataclass(frozen=True)
class BestResponse:
    """Outcome of the prefix scan for one buyer.

    Attributes:
        bids: the best-response bid row.
        c_star: the common bang-per-buck level on the purchased goods.
        order: goods with positive valuation in scan order.
        prefix_values: ``c_s`` for each prefix of ``order``.
        theta: the pre-prices the response was computed against.
    """

    bids: np.ndarray
    c_star: float
    order: np.ndarray
    prefix_values: np.ndarray
    theta: np.ndarray

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.bids > 0)


def scan_order(a: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Goods with ``a_j > 0`` sorted for the prefix scan.

    Goods nobody else bids on (``theta_j == 0``) come first by descending
    ``a_j``; the rest follow by descending ``a_j / theta_j``. Equal keys keep
    index order.
    """
    goods = np.flatnonzero(a > 0)
    free = goods[theta[goods] == 0]
    priced = goods[theta[goods] > 0]
    free = free[np.argsort(-a[free], kind="stable")]
    priced = priced[np.argsort(-(a[priced] / theta[priced]), kind="stable")]
    return np.concatenate([free, priced])


def water_fill(a, theta, budget: float) -> BestResponse:
    """Best response of a buyer with valuations ``a`` and budget ``budget``.

    Args:
        a: valuation row.
        theta: pre-prices, the other buyers' total bids on each good.
        budget: the buyer's budget.

    Returns:
        The unique maximizer ``(a_j / c* - theta_j)^+`` with ``c*`` the largest
        prefix value ``sum a / (budget + sum theta)`` along :func:`scan_order`.
    """
    a = np.asarray(a, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if a.shape != theta.shape or a.ndim != 1:
        raise InvalidInputError("valuations and pre-prices must be equal-length vectors")
    if budget <= 0:
        raise InvalidInputError("budget must be positive")
    order = scan_order(a, theta)
    if order.size == 0:
        raise InvalidInputError("buyer values no good")
    prefix = np.cumsum(a[order]) / (budget + np.cumsum(theta[order]))
    c_star = float(prefix.max())
    bids = np.zeros_like(a)
    interest = a > 0
    bids[interest] = np.maximum(a[interest] / c_star - theta[interest], 0.0)
    return BestResponse(bids=bids, c_star=c_star, order=order, prefix_values=prefix, theta=theta)


def pre_prices(i: int, b: np.ndarray) -> np.ndarray:
    """Other buyers' total bids on each good."""
    return np.delete(b, i, axis=0).sum(axis=0)


def best_response_detail(i: int, b, market: MarketInstance) -> BestResponse:
    if not 0 <= i < market.n:
        raise InvalidInputError(f"buyer index {i} out of range for n={market.n}")
    b = as_bids(b, market)
    return water_fill(market.valuations[i], pre_prices(i, b), float(market.budgets[i]))


def best_response(i: int, b, market: MarketInstance) -> np.ndarray:
    """Buyer ``i``'s best-response bid row in the associated game."""
    return best_response_detail(i, b, market).bids


def br_step(b, i: int, market: MarketInstance) -> np.ndarray:
    """Replace row ``i`` of ``b`` by its best response."""
    b = as_bids(b, market)
    out = b.copy()
    out[i] = best_response(i, b, market)
    return out


# --------------------------------------------------------------------------
# schedules


@dataclass(frozen=True)
class ActivationSchedule:
    """Buyer subsets activated at each step.

    Attributes:
        n: number of buyers the schedule refers to.
        steps: one tuple of buyer indices per step.
        liveness_T: the liveness bound the schedule promises, if any.
    """

    n: int
    steps: tuple
    liveness_T: int | None = None

    def __post_init__(self):
        seen = {}
        steps = []
        for raw in self.steps:
            key = tuple(raw)
            step = seen.get(key)
            if step is None:
                step = tuple(sorted({int(i) for i in key}))
                if step and (step[0] < 0 or step[-1] >= self.n):
                    raise InvalidInputError(
                        f"step {step} references a buyer outside 0..{self.n - 1}"
                    )
                seen[key] = step
            steps.append(step)
        steps = tuple(steps)
        if self.liveness_T is not None and self.liveness_T < 1:
            raise InvalidInputError("liveness_T must be a positive integer")
        object.__setattr__(self, "steps", steps)

    def __len__(self):
        return len(self.steps)


def _absence_runs(s: ActivationSchedule) -> np.ndarray:
    # longest run of consecutive steps without each buyer
    last = [-1] * s.n
    longest = [0] * s.n
    for t, step in enumerate(s.steps):
        for i in step:
            if t - last[i] - 1 > longest[i]:
                longest[i] = t - last[i] - 1
            last[i] = t
    return np.maximum(np.array(longest), len(s.steps) - 1 - np.array(last))


def validate_liveness(s: ActivationSchedule, T: int) -> bool:
    """True iff every buyer appears in every full window of ``T`` consecutive steps."""
    if T < 1:
        return False
    return bool(np.all(_absence_runs(s) < T))


def minimal_liveness(s: ActivationSchedule) -> int:
    """Smallest ``T`` for which ``s`` passes :func:`validate_liveness`."""
    return int(_absence_runs(s).max()) + 1


def make_round_robin_schedule(n: int, steps: int) -> ActivationSchedule:
    """Sequential schedule activating buyer ``t mod n`` at step ``t``."""
    if n < 1:
        raise InvalidInputError("need at least one buyer")
    return ActivationSchedule(n=n, steps=tuple((t % n,) for t in range(steps)), liveness_T=n)


def make_synchronous_schedule(n: int, steps: int) -> ActivationSchedule:
    """Every buyer at every step (``T = 1``)."""
    everyone = tuple(range(n))
    return ActivationSchedule(n=n, steps=(everyone,) * steps, liveness_T=1)


def _steps_from_masks(masks: np.ndarray) -> tuple:
    # one tuple per distinct row, shared across the steps that repeat it
    n = masks.shape[1]
    codes = masks.astype(np.int64) @ (np.int64(1) << np.arange(n, dtype=np.int64)) if n < 63 else None
    if codes is None:
        return tuple(tuple(np.flatnonzero(row).tolist()) for row in masks)
    table = {int(c): tuple(np.flatnonzero(masks[k]).tolist())
             for c, k in zip(*np.unique(codes, return_index=True))}
    return tuple(table[c] for c in codes.tolist())


def make_random_subset_schedule(n: int, steps: int, T: int, seed: int) -> ActivationSchedule:
    """Uniformly random nonempty subsets, patched to be ``T``-live.

    A buyer left out of ``T - 1`` consecutive steps is forced into the next one.
    """
    if T < 1:
        raise InvalidInputError("T must be at least 1")
    if n < 1:
        raise InvalidInputError("need at least one buyer")
    rng = np.random.default_rng(seed)
    masks = rng.random((steps, n)) < 0.5
    empty = np.flatnonzero(~masks.any(axis=1))
    while empty.size:
        masks[empty] = rng.random((empty.size, n)) < 0.5
        empty = empty[~masks[empty].any(axis=1)]
    for i in range(n):
        # within each gap (s, e) between activations, force s + T, s + 2T, ...
        marks = np.concatenate([[-1], np.flatnonzero(masks[:, i]), [steps]])
        starts, ends = marks[:-1], marks[1:]
        count = np.maximum((ends - starts - 1) // T, 0)
        if count.any():
            base = np.repeat(starts, count)
            k = np.arange(count.sum()) - np.repeat(np.cumsum(count) - count, count) + 1
            masks[base + k * T, i] = True
    return ActivationSchedule(n=n, steps=_steps_from_masks(masks), liveness_T=T)


def make_random_sequential_schedule(n: int, steps: int, seed: int) -> ActivationSchedule:
    """One buyer per step: a fresh random permutation of all buyers every ``n`` steps.

    Consecutive rounds can place a buyer at the end and then the start, so the
    guaranteed liveness bound is ``2n - 1``.
    """
    rng = np.random.default_rng(seed)
    rounds = -(-steps // n)
    order = np.concatenate([rng.permutation(n) for _ in range(rounds)])[:steps]
    return ActivationSchedule(n=n, steps=tuple((int(i),) for i in order), liveness_T=2 * n - 1)


# --------------------------------------------------------------------------
# runner


@dataclass(frozen=True)
class DynamicsConfig:
    """Settings for :func:`run_dynamics`.

    ``tolerance`` bounds the max-norm bid change over one liveness window;
    Bid snapshots are kept at recorded steps that are multiples of
    ``snapshot_every`` (``None`` keeps none).
    """

    rule: str = PRD
    max_steps: int = 100_000
    tolerance: float = 1e-9
    record_every: int = 1
    snapshot_every: int | None = None

    def __post_init__(self):
        rule = _RULE_ALIASES.get(str(self.rule).lower())
        if rule is None:
            raise ConfigError(f"unknown update rule {self.rule!r}")
        object.__setattr__(self, "rule", rule)
        if self.max_steps < 1:
            raise ConfigError("max_steps must be at least 1")
        if not self.tolerance > 0:
            raise ConfigError("tolerance must be positive")
        if self.record_every < 1:
            raise ConfigError("record_every must be at least 1")
        if self.snapshot_every is not None and self.snapshot_every < 1:
            raise ConfigError("snapshot_every must be at least 1")


@dataclass
class Trajectory:
    """Metrics recorded along one run.

    Row ``k`` of each array belongs to step ``t[k]``; the state at step ``t``
    is the profile after ``t`` updates.
    """

    rule: str
    t: np.ndarray
    prices: np.ndarray
    potential: np.ndarray
    nsw: np.ndarray
    utilities: np.ndarray
    distance: np.ndarray
    final_bids: np.ndarray
    steps: int
    converged: bool
    window: int
    final_bid_change: float
    final_price_change: float
    snapshots: list = field(default_factory=list)
    price_errors: np.ndarray | None = None
    distance_is_upper_bound: bool = False

    @property
    def final_prices(self) -> np.ndarray:
        return self.final_bids.sum(axis=0)

    def price_error(self, reference_prices) -> np.ndarray:
        """Max-norm price distance to ``reference_prices`` at each recorded step."""
        return np.abs(self.prices - np.asarray(reference_prices)[None, :]).max(axis=1)

    def steps_to(self, target: float, reference_prices=None) -> int | None:
        """First step from which the max-norm price error stays within ``target``.

        Uses the per-step error trace when the run had a certificate, else the
        recorded prices against ``reference_prices``. ``None`` if never reached.
        """
        if reference_prices is None:
            if self.price_errors is None:
                raise InvalidInputError("run had no certificate; pass reference_prices")
            err, ts = self.price_errors, np.arange(self.price_errors.size)
        else:
            err, ts = self.price_error(reference_prices), self.t
        bad = np.flatnonzero(err > target)
        if bad.size == 0:
            return int(ts[0])
        if bad[-1] + 1 >= err.size:
            return None
        return int(ts[bad[-1] + 1])


def default_initial_bids(market: MarketInstance) -> np.ndarray:
    """Each budget spread evenly over the goods its buyer values."""
    interest = market.interest
    counts = interest.sum(axis=1)
    if np.any(counts == 0):
        raise InvalidInputError("a buyer values no good")
    return np.where(interest, (market.budgets / counts)[:, None], 0.0)


class _Recorder:
    def __init__(self, market, reference_bids, snapshot_every):
        self.market = market
        self.log_a = np.log(np.where(market.interest, market.valuations, 1.0))
        self.reference = reference_bids
        self.snapshot_every = snapshot_every
        self.rows = []
        self.snapshots = []

    def __call__(self, t, b, p):
        x = allocate(b, p)
        u = (self.market.valuations * x).sum(axis=1)
        pos = p > 0
        phi = float((b * self.log_a).sum() + p.sum() - (p[pos] * np.log(p[pos])).sum())
        nsw = float(np.exp(self.market.budgets @ np.log(u))) if np.all(u > 0) else 0.0
        dist = np.nan if self.reference is None else float(np.linalg.norm(b - self.reference))
        self.rows.append((t, p.copy(), phi, nsw, u, dist))
        if self.snapshot_every and t % self.snapshot_every == 0:
            self.snapshots.append((t, b.copy()))

    def columns(self):
        t, prices, phi, nsw, u, dist = zip(*self.rows)
        return (np.array(t), np.array(prices), np.array(phi), np.array(nsw),
                np.array(u), np.array(dist))


def run_dynamics(
    market: MarketInstance,
    b0,
    schedule: ActivationSchedule,
    config: DynamicsConfig,
    certificate=None,
    require_positive: bool = True,
    repeat: bool = False,
) -> Trajectory:
    """Run the configured update rule along ``schedule``.

    The run stops after ``config.max_steps`` steps, at the end of the schedule,
    or once the max-norm bid change over a full liveness window is within
    ``config.tolerance``. The window is ``schedule.liveness_T``, or the
    smallest bound the schedule actually satisfies when none is declared.

    Args:
        market: the market.
        b0: feasible initial bids; for proportional response also positive
            wherever the valuation is.
        schedule: activated subsets per step.
        config: rule, budgets and tolerances.
        certificate: optional equilibrium certificate (anything with a
            ``bids`` attribute); enables the distance column.
        require_positive: enforce the positivity precondition for
            proportional response. Continuing a run whose tiny bids have
            underflowed to zero needs this off.
        repeat: restart the schedule from its first step after its last, so
            only ``config.max_steps`` bounds the run. The caller is
            responsible for liveness across the wrap-around.
    """
    b = as_bids(b0, market).copy()
    problems = bid_violations(b, market)
    if problems:
        raise InvalidInputError("initial bids infeasible: " + "; ".join(problems))
    if require_positive and config.rule == PRD and np.any(market.interest & (b <= 0)):
        # a zero bid stays zero under proportional response
        raise InvalidInputError("initial bids must be positive wherever the valuation is")
    if schedule.n != market.n:
        raise InvalidInputError(f"schedule is for {schedule.n} buyers, market has {market.n}")
    if config.rule == BR and any(len(s) != 1 for s in schedule.steps):
        raise ConfigError("best-response dynamics need exactly one activated buyer per step")

    if len(schedule) == 0:
        raise InvalidInputError("empty schedule")
    window = schedule.liveness_T or minimal_liveness(schedule)
    horizon = config.max_steps if repeat else min(config.max_steps, len(schedule))
    period = len(schedule)
    reference = None if certificate is None else as_bids(certificate.bids, market)
    record = _Recorder(market, reference, config.snapshot_every)

    p = b.sum(axis=0)
    record(0, b, p)
    if reference is not None:
        ref_p = reference.sum(axis=0)
        errors = np.empty(horizon + 1)
        errors[0] = np.abs(p - ref_p).max()
    anchor_b, anchor_p = b.copy(), p.copy()
    bid_change = price_change = np.inf
    converged = False
    t = 0
    while t < horizon:
        step = schedule.steps[t % period]
        if step:
            if config.rule == PRD:
                idx = np.fromiter(step, dtype=int, count=len(step))
                b[idx] = _prd_rows(b, p, idx, market)
            else:
                i = step[0]
                b[i] = water_fill(market.valuations[i], pre_prices(i, b), market.budgets[i]).bids
            p = b.sum(axis=0)
        t += 1
        if reference is not None:
            errors[t] = np.abs(p - ref_p).max()
        if t % config.record_every == 0:
            record(t, b, p)
        if t % window == 0:
            bid_change = float(np.abs(b - anchor_b).max())
            price_change = float(np.abs(p - anchor_p).max())
            anchor_b[...] = b
            anchor_p[...] = p
            if bid_change <= config.tolerance:
                converged = True
                break
    if record.rows[-1][0] != t:
        record(t, b, p)
    log.debug("%s run stopped at step %d (converged=%s, change=%.3e)",
              config.rule, t, converged, bid_change)

    ts, prices, phi, nsw, u, dist = record.columns()
    return Trajectory(
        rule=config.rule,
        t=ts,
        prices=prices,
        potential=phi,
        nsw=nsw,
        utilities=u,
        distance=dist,
        final_bids=b,
        steps=t,
        converged=converged,
        window=window,
        final_bid_change=bid_change,
        final_price_change=price_change,
        snapshots=record.snapshots,
        price_errors=None if reference is None else errors[: t + 1],
    )
