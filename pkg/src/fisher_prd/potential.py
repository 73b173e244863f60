"""Potential function of the associated game and its geometry.

All logarithms are natural and ``0 * ln 0`` is taken as 0, which keeps the
potential continuous on the closed bid simplex.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidInputError, UndefinedRatioError
from .market import MarketInstance, as_bids, as_subset


def _xlogy(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # x * ln(y) with the x == 0 terms dropped
    logs = np.log(y, out=np.zeros(np.broadcast(x, y).shape), where=x != 0)
    return x * logs


def _checked(b, market: MarketInstance) -> np.ndarray:
    b = as_bids(b, market)
    if np.any((b > 0) & ~market.interest):
        raise InvalidInputError("positive bid on a good the buyer values at zero")
    return b


def _price_term(p: np.ndarray) -> float:
    # sum_j p_j (1 - ln p_j)
    return float(p.sum() - _xlogy(p, p).sum())


def potential(b, market: MarketInstance) -> float:
    """Exact potential ``sum_ij b_ij ln a_ij + sum_j p_j (1 - ln p_j)``."""
    b = _checked(b, market)
    p = b.sum(axis=0)
    return float(_xlogy(b, market.valuations).sum()) + _price_term(p)


def associated_utility(i: int, b, market: MarketInstance) -> float:
    """Associated utility of buyer ``i``: the potential with only row ``i`` in the first sum."""
    if not 0 <= i < market.n:
        raise InvalidInputError(f"buyer index {i} out of range for n={market.n}")
    b = _checked(b, market)
    p = b.sum(axis=0)
    return float(_xlogy(b[i], market.valuations[i]).sum()) + _price_term(p)


def associated_utility_prime(i: int, b, market: MarketInstance) -> float:
    """The alternative associated utility ``sum_j a_ij ln p_j``.

    Its partial derivative in ``b_ij`` is the bang-per-buck ``a_ij / p_j``.
    """
    if not 0 <= i < market.n:
        raise InvalidInputError(f"buyer index {i} out of range for n={market.n}")
    b = as_bids(b, market)
    p = b.sum(axis=0)
    a = market.valuations[i]
    if np.any((a > 0) & (p <= 0)):
        raise UndefinedRatioError(f"buyer {i} values a good with zero price")
    return float(_xlogy(a, p).sum())


def potential_gradient(b, market: MarketInstance, rows=None) -> np.ndarray:
    """Partial derivatives ``ln(a_ij / p_j)`` of the potential.

    Entries with ``a_ij == 0`` hold ``-inf`` as a sentinel; arithmetic code
    should mask them with ``market.interest``. With ``rows`` given, only those
    buyers' rows are returned and only their goods need positive prices.
    """
    b = as_bids(b, market)
    p = b.sum(axis=0)
    idx = np.arange(market.n) if rows is None else as_subset(rows, market.n)
    a = market.valuations[idx]
    interest = a > 0
    if np.any(interest & (p <= 0)):
        raise UndefinedRatioError("gradient references a good with zero price")
    grad = np.full(a.shape, -np.inf)
    safe_p = np.where(p > 0, p, 1.0)
    np.log(np.divide(a, safe_p), out=grad, where=interest)
    return grad


def kl_divergence(x, y) -> float:
    """Generalized KL divergence ``sum_k x_k ln(x_k / y_k)`` over any shape.

    Returns ``inf`` when some ``x_k > 0`` meets ``y_k == 0``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise InvalidInputError(f"shape mismatch {x.shape} vs {y.shape}")
    pos = x > 0
    if np.any(pos & (y <= 0)):
        return float("inf")
    ratio = np.ones_like(x)
    np.divide(x, y, out=ratio, where=pos)
    return float(_xlogy(x, ratio).sum())


def linearized_potential(b, b_ref, v, market: MarketInstance) -> float:
    """First-order expansion of the potential in the coordinates of subset ``v``.

    ``b`` and ``b_ref`` are full profiles that must agree outside ``v``; the
    expansion is taken around ``b_ref``.
    """
    b = _checked(b, market)
    b_ref = _checked(b_ref, market)
    idx = as_subset(v, market.n)
    rest = np.setdiff1d(np.arange(market.n), idx)
    if not np.array_equal(b[rest], b_ref[rest]):
        raise InvalidInputError("profiles differ outside the activated subset")
    grad = potential_gradient(b_ref, market, rows=idx)
    interest = market.interest[idx]
    step = (b[idx] - b_ref[idx])[interest]
    return potential(b_ref, market) + float(np.dot(grad[interest], step))
