"""Linear Fisher market data model and the trading-post mechanism.

Bid profiles, prices and allocations are plain numpy arrays: bids and
allocations are ``(n, m)`` float arrays, prices are length-``m`` arrays.
``MarketInstance`` carries the budgets and valuations and is immutable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import InvalidInputError, UndefinedRatioError

# input hygiene vs. accumulated floating-point drift on derived quantities
INPUT_TOL = 1e-12
DERIVED_TOL = 1e-10


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class MarketInstance:
    """A linear Fisher market with unit supply of every good.

    Attributes:
        budgets: length-n array of buyer budgets ``B_i``.
        valuations: ``(n, m)`` array of valuations ``a_ij``.
    """

    budgets: np.ndarray
    valuations: np.ndarray

    def __post_init__(self):
        budgets = _frozen(self.budgets)
        valuations = _frozen(self.valuations)
        if budgets.ndim != 1 or budgets.size == 0:
            raise InvalidInputError("budgets must be a non-empty 1-d array")
        if valuations.ndim != 2 or valuations.shape[0] != budgets.size or valuations.shape[1] == 0:
            raise InvalidInputError(
                f"valuations must have shape ({budgets.size}, m), got {valuations.shape}"
            )
        if not (np.all(np.isfinite(budgets)) and np.all(np.isfinite(valuations))):
            raise InvalidInputError("budgets and valuations must be finite")
        object.__setattr__(self, "budgets", budgets)
        object.__setattr__(self, "valuations", valuations)

    @property
    def n(self) -> int:
        return self.budgets.size

    @property
    def m(self) -> int:
        return self.valuations.shape[1]

    @cached_property
    def interest(self) -> np.ndarray:
        """Boolean mask of strictly positive valuations."""
        mask = self.valuations > 0
        mask.setflags(write=False)
        return mask

    def __eq__(self, other):
        if not isinstance(other, MarketInstance):
            return NotImplemented
        return np.array_equal(self.budgets, other.budgets) and np.array_equal(
            self.valuations, other.valuations
        )

    def __hash__(self):
        return hash((self.budgets.tobytes(), self.valuations.tobytes(), self.valuations.shape))


@dataclass
class ValidationReport:
    """Result of :func:`validate_market`.

    ``violations`` is empty iff the market satisfies every invariant;
    ``warnings`` flag legal but degenerate situations.
    """

    violations: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_market(market: MarketInstance) -> ValidationReport:
    """Report every violated market invariant."""
    report = ValidationReport()
    B, A = market.budgets, market.valuations

    if np.any(B <= 0):
        bad = np.flatnonzero(B <= 0).tolist()
        report.violations.append(f"non-positive budget for buyers {bad}")
    if abs(B.sum() - 1.0) > INPUT_TOL:
        report.violations.append(f"budget normalization: budgets sum to {B.sum()!r}, expected 1")
    if np.any(A < 0):
        report.violations.append("negative valuation entries")
    row_sums = A.sum(axis=1)
    off = np.flatnonzero(np.abs(row_sums - 1.0) > INPUT_TOL)
    if off.size:
        report.violations.append(f"valuation normalization: rows {off.tolist()} do not sum to 1")
    idle = np.flatnonzero(~np.any(A > 0, axis=1))
    if idle.size:
        report.violations.append(f"idle buyer: buyers {idle.tolist()} value no good")
    dead = np.flatnonzero(~np.any(A > 0, axis=0))
    if dead.size:
        report.violations.append(f"dead good: goods {dead.tolist()} are valued by no buyer")

    interested = (A > 0).sum(axis=0)
    for i in range(market.n):
        support = np.flatnonzero(A[i] > 0)
        if support.size == 1 and interested[support[0]] == 1:
            report.warnings.append(
                f"degenerate competition: buyer {i} is the only buyer of its only good {support[0]}"
            )
    return report


def as_bids(b, market: MarketInstance) -> np.ndarray:
    """Coerce ``b`` to a float ``(n, m)`` array, checking dimensions only."""
    arr = np.asarray(b, dtype=float)
    if arr.shape != (market.n, market.m):
        raise InvalidInputError(
            f"bid profile has shape {arr.shape}, market is {(market.n, market.m)}"
        )
    return arr


def bid_violations(b, market: MarketInstance, tol: float = DERIVED_TOL) -> list[str]:
    """List the ways ``b`` fails to be a feasible bid profile for ``market``."""
    b = as_bids(b, market)
    problems = []
    if np.any(b < 0):
        problems.append("negative bids")
    dev = np.abs(b.sum(axis=1) - market.budgets)
    if np.any(dev > tol):
        problems.append(f"row budgets violated by up to {dev.max():.3e}")
    if np.any((b > 0) & ~market.interest):
        problems.append("positive bid on a zero-valued good")
    return problems


def compute_prices(b, market: MarketInstance) -> np.ndarray:
    """Price of each good: the total money bid on it."""
    b = as_bids(b, market)
    return b.sum(axis=0)


def allocate(b, p) -> np.ndarray:
    """Split each good among its bidders in proportion to their bids."""
    b = np.asarray(b, dtype=float)
    p = np.asarray(p, dtype=float)
    if b.ndim != 2 or p.shape != (b.shape[1],):
        raise InvalidInputError(f"price vector of shape {p.shape} does not match bids {b.shape}")
    x = np.zeros_like(b)
    np.divide(b, p, out=x, where=b > 0)
    return x


def utilities(x, market: MarketInstance) -> np.ndarray:
    """Vector of buyer utilities ``u_i = sum_j a_ij x_ij``."""
    x = as_bids(x, market)
    return (market.valuations * x).sum(axis=1)


def buyer_utility(i: int, x, market: MarketInstance) -> float:
    if not 0 <= i < market.n:
        raise InvalidInputError(f"buyer index {i} out of range for n={market.n}")
    x = as_bids(x, market)
    return float(market.valuations[i] @ x[i])


def bang_per_buck(i: int, j: int, p, market: MarketInstance) -> float:
    """Value per unit of money, ``a_ij / p_j``."""
    if not (0 <= i < market.n and 0 <= j < market.m):
        raise InvalidInputError(f"index ({i}, {j}) out of range")
    pj = float(p[j])
    if pj <= 0:
        raise UndefinedRatioError(f"bang-per-buck undefined: price of good {j} is {pj}")
    return float(market.valuations[i, j]) / pj


def nash_social_welfare(x, market: MarketInstance, return_flag: bool = False):
    """Budget-weighted geometric mean of utilities, ``prod_i u_i ** B_i``.

    Evaluated in log space. When some buyer has zero utility the welfare is 0
    and the allocation is degenerate; pass ``return_flag=True`` to get
    ``(value, degenerate)`` instead of the bare value.
    """
    u = utilities(x, market)
    degenerate = bool(np.any(u <= 0))
    if degenerate:
        value = 0.0
    else:
        value = float(np.exp(np.dot(market.budgets, np.log(u))))
    return (value, degenerate) if return_flag else value


def generate_random_market(n: int, m: int, seed: int) -> MarketInstance:
    """Sample valuations and budgets uniformly on (0, 1), then normalize.

    Valuation rows are scaled to sum to one and budgets to total one.
    """
    if n < 1 or m < 1:
        raise InvalidInputError("need at least one buyer and one good")
    rng = np.random.default_rng(seed)
    low = np.nextafter(0.0, 1.0)
    valuations = rng.uniform(low, 1.0, size=(n, m))
    budgets = rng.uniform(low, 1.0, size=n)
    valuations /= valuations.sum(axis=1, keepdims=True)
    budgets /= budgets.sum()
    return MarketInstance(budgets=budgets, valuations=valuations)


def as_subset(v, n: int) -> np.ndarray:
    """Sorted unique buyer indices of an activated subset, range-checked."""
    idx = np.unique(np.asarray(list(v), dtype=int))
    if idx.size and (idx[0] < 0 or idx[-1] >= n):
        raise InvalidInputError(f"buyer subset {idx.tolist()} out of range for n={n}")
    return idx
