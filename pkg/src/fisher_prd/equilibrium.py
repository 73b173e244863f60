"""Equilibrium verification, the cross-validated oracle, and support-graph analysis."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import (
    DynamicsConfig,
    Trajectory,
    default_initial_bids,
    make_random_sequential_schedule,
    make_synchronous_schedule,
    run_dynamics,
)
from .errors import InvalidInputError, OracleFailureError
from .market import MarketInstance, allocate, as_bids, utilities
from .potential import potential

log = logging.getLogger(__name__)

SUPPORT_THRESHOLD = 1e-8
GENERICITY_TOL = 1e-12


# --------------------------------------------------------------------------
# support graph


@dataclass(frozen=True)
class SupportGraph:
    """Bipartite buyer/good graph with an edge for every bid above a threshold.

    Vertices are ``("buyer", i)`` and ``("good", j)``.
    """

    n: int
    m: int
    edges: tuple

    def adjacency(self) -> dict:
        adj = {("buyer", i): [] for i in range(self.n)}
        adj.update({("good", j): [] for j in range(self.m)})
        for i, j in self.edges:
            adj[("buyer", i)].append(("good", j))
            adj[("good", j)].append(("buyer", i))
        return adj


def support_graph(b, threshold: float = SUPPORT_THRESHOLD) -> SupportGraph:
    if threshold < 0:
        raise InvalidInputError("threshold must be non-negative")
    b = np.asarray(b, dtype=float)
    if b.ndim != 2:
        raise InvalidInputError("bid profile must be a 2-d array")
    n, m = b.shape
    edges = tuple((int(i), int(j)) for i, j in zip(*np.nonzero(b > threshold)))
    return SupportGraph(n=n, m=m, edges=edges)


def find_cycle(g: SupportGraph) -> list | None:
    """One cycle of ``g`` as a vertex list (closing edge implied), or ``None``.

    Depth-first search from vertices in index order, buyers first.
    """
    adj = g.adjacency()
    parent = {}
    for root in adj:
        if root in parent:
            continue
        parent[root] = None
        stack = [(root, iter(adj[root]))]
        on_path = {root}
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                stack.pop()
                on_path.discard(node)
                continue
            if nxt == parent[node]:
                continue
            if nxt in on_path:
                cycle = [node]
                while cycle[-1] != nxt:
                    cycle.append(parent[cycle[-1]])
                return cycle[::-1]
            if nxt not in parent:
                parent[nxt] = node
                on_path.add(nxt)
                stack.append((nxt, iter(adj[nxt])))
    return None


def cycle_log_ratio(cycle, market: MarketInstance) -> float:
    """Sum of ``ln a`` along a buyer/good cycle, alternating sign per edge.

    Edges leaving a buyer subtract ``ln a_ij``, edges entering a buyer add it.
    The result is zero on the support of an equilibrium, since each buyer's
    bang-per-buck is constant on the goods it buys and the prices cancel.
    """
    total = 0.0
    k = len(cycle)
    for pos in range(k):
        u, w = cycle[pos], cycle[(pos + 1) % k]
        if u[0] == "buyer":
            total -= np.log(market.valuations[u[1], w[1]])
        else:
            total += np.log(market.valuations[w[1], u[1]])
    return float(total)


# --------------------------------------------------------------------------
# genericity


@dataclass(frozen=True)
class GenericityVerdict:
    """Outcome of :func:`genericity_check`.

    ``status`` is ``"generic"``, ``"non-generic"`` or ``"inconclusive"``;
    ``witness`` holds two distinct entry sets with equal valuation products.
    """

    status: str
    witness: tuple | None = None
    searched_size: int = 0

    @property
    def generic(self) -> bool:
        return self.status == "generic"


def _subset_budget_size(count: int, cap: int, max_subsets: int) -> int:
    total, k = 0, 0
    while k < cap:
        nxt = total + math.comb(count, k + 1)
        if nxt > max_subsets:
            break
        total, k = nxt, k + 1
    return k


def genericity_check(
    market: MarketInstance,
    max_subset_size: int = 6,
    max_subsets: int = 200_000,
    tol: float = GENERICITY_TOL,
) -> GenericityVerdict:
    """Search for a multiplicative equality among positive valuations.

    Two distinct entry sets with equal products reduce to a disjoint pair
    with equal log sums, or to a set whose product is one next to any other
    entry. The search enumerates entry sets up to ``max_subset_size``
    entries, further capped so at most ``max_subsets`` sets are built; the
    verdict is ``"inconclusive"`` when the cap left some sizes unexplored.
    """
    entries = [tuple(map(int, e)) for e in zip(*np.nonzero(market.valuations > 0))]
    logs = np.log(np.array([market.valuations[e] for e in entries]))
    count = len(entries)
    if count <= 1:
        return GenericityVerdict("generic", None, count)

    ones = np.flatnonzero(np.abs(logs) <= tol)
    if ones.size and max_subset_size >= 2:
        e = int(ones[0])
        other = 0 if e != 0 else 1
        witness = (tuple(sorted([entries[e], entries[other]])), (entries[other],))
        return GenericityVerdict("non-generic", witness, 2)

    size = _subset_budget_size(count, min(max_subset_size, count - 1), max_subsets)
    combos, sums = [], []
    for k in range(1, size + 1):
        idx = np.array(list(itertools.combinations(range(count), k)), dtype=int)
        combos.extend(map(tuple, idx))
        sums.append(logs[idx].sum(axis=1))
    best = None
    if combos:
        sums = np.concatenate(sums)
        order = np.argsort(sums, kind="stable")
        s = sums[order]
        for lo in range(s.size - 1):
            hi = lo + 1
            while hi < s.size and s[hi] - s[lo] <= tol:
                c1, c2 = combos[order[lo]], combos[order[hi]]
                if not set(c1) & set(c2):
                    pair = tuple(sorted([tuple(entries[q] for q in c1), tuple(entries[q] for q in c2)]))
                    key = (len(c1) + len(c2), pair)
                    if best is None or key < best[0]:
                        best = (key, pair)
                hi += 1
    if best is not None:
        return GenericityVerdict("non-generic", best[1], size)
    complete = size >= min(max_subset_size, count - 1) and max_subset_size >= count
    return GenericityVerdict("generic" if complete else "inconclusive", None, size)


# --------------------------------------------------------------------------
# certificates


@dataclass
class EquilibriumCertificate:
    """Definition-level check of a bid profile.

    Attributes:
        bids: the checked profile.
        prices: its prices.
        utilities: buyer utilities at those prices.
        residuals: largest violations of ``clearing``, ``budget`` and
            ``optimality`` (bang-per-buck) conditions.
        acyclic: whether the support graph has no cycle.
        methods_agree: outcome of the PRD/BR price cross-check, ``None`` when
            no cross-check was run.
        tol: acceptance tolerance on every residual.
        generic_verdict: genericity status of the market, when computed.
        edges: number of edges of the support graph.
    """

    bids: np.ndarray
    prices: np.ndarray
    utilities: np.ndarray
    residuals: dict
    acyclic: bool
    methods_agree: bool | None
    tol: float
    generic_verdict: str | None = None
    edges: int = 0
    potential: float = float("nan")
    trajectories: dict = field(default_factory=dict, repr=False)

    @property
    def accepted(self) -> bool:
        return all(r <= self.tol for r in self.residuals.values()) and self.methods_agree is not False


def verify_equilibrium(
    b, market: MarketInstance, tol: float = 1e-6, support_threshold: float = SUPPORT_THRESHOLD
) -> EquilibriumCertificate:
    """Measure how far ``b`` is from a market equilibrium.

    Bids above ``support_threshold`` count as purchases: on those the
    bang-per-buck ``a_ij / p_j`` must equal ``u_i / B_i``; everywhere it must
    not exceed it.
    """
    b = as_bids(b, market)
    p = b.sum(axis=0)
    x = allocate(b, p)
    u = utilities(x, market)
    priced = p > 0

    clearing = float(np.abs(x[:, priced].sum(axis=0) - 1.0).max()) if priced.any() else 0.0
    if not priced.all():
        clearing = max(clearing, 1.0)
    budget = float(np.abs(b.sum(axis=1) - market.budgets).max())

    a = market.valuations
    with np.errstate(divide="ignore", invalid="ignore"):
        bpb = np.where(a > 0, a / np.where(priced, p, 0.0)[None, :], 0.0)
    level = (u / market.budgets)[:, None]
    gap = bpb - level
    optimality = float(np.maximum(gap, 0.0).max())
    supported = b > support_threshold
    if supported.any():
        optimality = max(optimality, float(np.abs(gap[supported]).max()))

    g = support_graph(b, support_threshold)
    try:
        phi = potential(b, market)
    except InvalidInputError:
        phi = float("nan")
    return EquilibriumCertificate(
        bids=b.copy(),
        prices=p,
        utilities=u,
        residuals={"clearing": clearing, "budget": budget, "optimality": optimality},
        acyclic=find_cycle(g) is None,
        methods_agree=None,
        tol=tol,
        edges=len(g.edges),
        potential=phi,
    )


def _converge(market, b0, schedule, config, verify_tol):
    # keep tightening until the endpoint passes the residual check with a
    # hundredfold margin, so the reference sits well inside the tolerance
    traj = run_dynamics(market, b0, schedule, config, repeat=True)
    cert = verify_equilibrium(traj.final_bids, market, verify_tol / 100)
    tighten = config.tolerance
    while traj.converged and not cert.accepted and tighten > 1e-15:
        tighten /= 10
        cfg = DynamicsConfig(
            rule=config.rule, max_steps=config.max_steps, tolerance=tighten,
            record_every=config.record_every,
        )
        traj = run_dynamics(
            market, traj.final_bids, schedule, cfg, require_positive=False, repeat=True
        )
        cert = verify_equilibrium(traj.final_bids, market, verify_tol / 100)
    return traj, verify_equilibrium(traj.final_bids, market, verify_tol)


def compute_equilibrium(
    market: MarketInstance,
    tol: float = 1e-6,
    seed: int = 0,
    max_steps: int = 200_000,
    record_every: int = 100,
) -> EquilibriumCertificate:
    """Certify an equilibrium by running two independent dynamics.

    Synchronous proportional response and sequential best response (buyers
    in random rounds drawn from ``seed``) both start from uniform bids and
    run until their bid change over a liveness window is below ``tol / 10``.
    The best-response endpoint is returned when both endpoints pass
    :func:`verify_equilibrium` and their prices agree within ``tol``.

    Raises:
        OracleFailureError: a run did not converge within ``max_steps`` or the
            endpoints could not be certified.
    """
    b0 = default_initial_bids(market)
    runs = {}
    certs = {}
    plans = {
        "prd": make_synchronous_schedule(market.n, 1),
        "br": make_random_sequential_schedule(market.n, 1000 * market.n, seed),
    }
    for rule, schedule in plans.items():
        config = DynamicsConfig(rule=rule, max_steps=max_steps, tolerance=tol / 10,
                                record_every=record_every)
        runs[rule], certs[rule] = _converge(market, b0, schedule, config, tol)
        if not runs[rule].converged:
            raise OracleFailureError(
                f"{rule} dynamics did not converge within {max_steps} steps", runs
            )

    agree = bool(np.abs(runs["prd"].final_prices - runs["br"].final_prices).max() <= tol)
    cert = certs["br"]
    cert.methods_agree = agree and certs["prd"].accepted and certs["br"].accepted
    cert.trajectories = runs
    if not cert.accepted:
        raise OracleFailureError(
            "dynamics endpoints failed the equilibrium check or disagree in prices",
            runs,
            cert,
        )
    return cert


def distance_to_profile(b, b_star) -> float:
    """Entrywise Euclidean distance between two bid profiles."""
    b = np.asarray(b, dtype=float)
    b_star = np.asarray(b_star, dtype=float)
    if b.shape != b_star.shape:
        raise InvalidInputError(f"shape mismatch {b.shape} vs {b_star.shape}")
    return float(np.linalg.norm(b - b_star))
