import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import markets, random_profile
from fisher_prd.errors import InvalidInputError, UndefinedRatioError
from fisher_prd.market import MarketInstance, generate_random_market
from fisher_prd.potential import (
    associated_utility,
    associated_utility_prime,
    kl_divergence,
    linearized_potential,
    potential,
    potential_gradient,
)

mpmath.mp.dps = 40


def phi_mp(b, a, rows=None):
    """High-precision potential with 0 ln 0 = 0; ``rows`` limits the first sum."""
    n, m = len(b), len(b[0])
    rows = range(n) if rows is None else rows
    total = mpmath.mpf(0)
    for i in rows:
        for j in range(m):
            if b[i][j] != 0:
                total += mpmath.mpf(b[i][j]) * mpmath.log(mpmath.mpf(a[i][j]))
    for j in range(m):
        pj = mpmath.fsum(mpmath.mpf(b[i][j]) for i in range(n))
        if pj != 0:
            total += pj * (1 - mpmath.log(pj))
    return total


def test_potential_examples(sym, uniform_bids, diagonal_bids):
    uniform = potential(uniform_bids, sym)
    diag = potential(diagonal_bids, sym)
    assert uniform == pytest.approx(0.77686, abs=1e-5)
    assert diag == pytest.approx(1.47001, abs=1e-5)
    assert diag == pytest.approx(math.log(0.8) + 2 * 0.5 * (1 - math.log(0.5)), abs=1e-15)
    assert diag > uniform


def test_potential_matches_high_precision_oracle():
    rng = np.random.default_rng(11)
    for k in range(20):
        market = generate_random_market(int(rng.integers(1, 7)), int(rng.integers(1, 7)), k)
        b = random_profile(market, rng, interior=False)
        assert potential(b, market) == pytest.approx(float(phi_mp(b.tolist(), market.valuations.tolist())), abs=1e-13)


def test_potential_rejects_bid_on_worthless_good():
    market = MarketInstance(budgets=[0.5, 0.5], valuations=[[1.0, 0.0], [0.5, 0.5]])
    with pytest.raises(InvalidInputError):
        potential([[0.25, 0.25], [0.25, 0.25]], market)
    # the zero bid there is fine
    assert math.isfinite(potential([[0.5, 0.0], [0.25, 0.25]], market))


def test_associated_utility_examples(sym, uniform_bids):
    assert associated_utility(0, uniform_bids, sym) == pytest.approx(1.23501, abs=1e-5)
    expected = 0.25 * (math.log(0.8) + math.log(0.2)) + 1 + math.log(2)
    assert associated_utility(0, uniform_bids, sym) == pytest.approx(expected, abs=1e-15)
    single = MarketInstance(budgets=[1.0], valuations=[[1.0]])
    assert associated_utility(0, [[1.0]], single) == pytest.approx(1.0 * math.log(1.0) + 1)
    with pytest.raises(InvalidInputError):
        associated_utility(5, uniform_bids, sym)


def test_associated_utility_prime(sym, uniform_bids):
    assert associated_utility_prime(0, uniform_bids, sym) == pytest.approx(math.log(0.5), abs=1e-15)
    single = MarketInstance(budgets=[1.0], valuations=[[1.0]])
    assert associated_utility_prime(0, [[1.0]], single) == 0.0
    with pytest.raises(UndefinedRatioError):
        associated_utility_prime(0, [[0.5, 0.0], [0.5, 0.0]], sym)


def test_gradient_examples(sym, uniform_bids):
    g = potential_gradient(uniform_bids, sym)
    assert g[0, 0] == pytest.approx(0.47000, abs=1e-5)
    assert g[0, 0] == pytest.approx(math.log(1.6), abs=1e-15)
    # p_j = a_ij gives a zero entry
    market = MarketInstance(budgets=[0.5, 0.5], valuations=[[0.5, 0.5], [0.5, 0.5]])
    assert potential_gradient(uniform_bids, market)[1, 1] == 0.0


def test_gradient_sentinel_and_errors():
    market = MarketInstance(budgets=[0.5, 0.5], valuations=[[1.0, 0.0], [0.5, 0.5]])
    g = potential_gradient([[0.5, 0.0], [0.25, 0.25]], market)
    assert g[0, 1] == -np.inf and np.isfinite(g[1]).all()
    with pytest.raises(UndefinedRatioError):
        potential_gradient([[0.5, 0.0], [0.5, 0.0]], market)
    # only the requested rows need priced goods
    assert potential_gradient([[0.5, 0.0], [0.5, 0.0]], market, rows=[0]).shape == (1, 2)


def test_gradient_against_central_differences():
    # the potential extends smoothly off the simplex, so single-coordinate
    # differences are valid; evaluate them in high precision
    rng = np.random.default_rng(5)
    h = mpmath.mpf("1e-6")
    worst = 0.0
    for k in range(25):
        market = generate_random_market(int(rng.integers(1, 5)), int(rng.integers(1, 5)), 100 + k)
        b = random_profile(market, rng)
        g = potential_gradient(b, market)
        a = market.valuations.tolist()
        for i in range(market.n):
            for j in range(market.m):
                up = [[mpmath.mpf(v) for v in row] for row in b.tolist()]
                dn = [row[:] for row in up]
                up[i][j] += h
                dn[i][j] -= h
                fd = float((phi_mp(up, a) - phi_mp(dn, a)) / (2 * h))
                scale = max(abs(g[i, j]), abs(fd))
                # a vanishing gradient (p_j == a_ij) has no relative scale
                err = abs(fd - g[i, j]) / scale if scale > 1e-9 else abs(fd - g[i, j])
                worst = max(worst, err)
    assert worst <= 1e-6


def test_kl_divergence():
    assert kl_divergence([0.3, 0.7], [0.3, 0.7]) == 0.0
    assert kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-15)
    assert kl_divergence([0.5, 0.5], [1.0, 0.0]) == math.inf
    assert kl_divergence([0.0, 1.0], [0.0, 1.0]) == 0.0
    with pytest.raises(InvalidInputError):
        kl_divergence([1.0], [0.5, 0.5])


def test_linearized_potential_examples(sym, uniform_bids, diagonal_bids):
    assert linearized_potential(uniform_bids, uniform_bids, [0, 1], sym) == pytest.approx(potential(uniform_bids, sym))
    # uniform -> diagonal keeps prices at (0.5, 0.5), so the expansion is exact
    lin = linearized_potential(diagonal_bids, uniform_bids, [0, 1], sym)
    assert lin == pytest.approx(potential(diagonal_bids, sym), abs=1e-15)
    assert kl_divergence(diagonal_bids.sum(0), uniform_bids.sum(0)) == 0.0
    with pytest.raises(InvalidInputError):
        linearized_potential(diagonal_bids, uniform_bids, [0], sym)


@settings(max_examples=200, deadline=None)
@given(markets(), st.integers(0, 2**32 - 1))
def test_exact_potential_property(market, seed):
    rng = np.random.default_rng(seed)
    b = random_profile(market, rng, interior=False)
    i = int(rng.integers(market.n))
    dev = b.copy()
    dev[i] = random_profile(market, rng, interior=False)[i]
    d_phi = potential(dev, market) - potential(b, market)
    d_u = associated_utility(i, dev, market) - associated_utility(i, b, market)
    assert abs(d_phi - d_u) <= 1e-9


@settings(max_examples=200, deadline=None)
@given(markets(), st.integers(0, 2**32 - 1))
def test_decomposition_and_contraction(market, seed):
    rng = np.random.default_rng(seed)
    ref = random_profile(market, rng)
    v = np.flatnonzero(rng.random(market.n) < 0.5)
    if v.size == 0:
        v = np.array([int(rng.integers(market.n))])
    b = ref.copy()
    b[v] = random_profile(market, rng, interior=False)[v]
    p, p_ref = b.sum(0), ref.sum(0)
    lhs = potential(b, market)
    rhs = linearized_potential(b, ref, v, market) - kl_divergence(p, p_ref)
    assert abs(lhs - rhs) <= 1e-9
    d_bids = kl_divergence(b[v], ref[v])
    assert kl_divergence(p, p_ref) <= d_bids + 1e-12
    # with no other bidders the prices are the moved bids and the two coincide
    if v.size < market.n and np.abs(b[v] - ref[v]).max() > 1e-12:
        assert kl_divergence(p, p_ref) < d_bids


def test_potential_bounded_by_equilibrium():
    from fisher_prd.equilibrium import compute_equilibrium

    rng = np.random.default_rng(3)
    for seed in range(3):
        market = generate_random_market(4, 5, seed)
        top = compute_equilibrium(market).potential
        for _ in range(300):
            assert potential(random_profile(market, rng, interior=False), market) <= top + 1e-8
