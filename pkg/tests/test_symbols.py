import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pdlab import symbols as sb
from pdlab import system as sy
from pdlab.errors import DimensionMismatch

SWAP = np.array([[0, 1], [1, 0]], dtype=complex)


def random_symbol(rng, d=2, n=1, terms=3):
    out = {}
    for _ in range(terms):
        alpha = tuple(int(a) for a in rng.integers(0, 3, n))
        e = float(rng.integers(0, 3))
        c = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
        out[(alpha, int(e))] = sy.RationalMF([(e, c)])
    return sb.PolySymbol(d, n, out)


def test_identity_product():
    rng = np.random.default_rng(0)
    p = random_symbol(rng)
    q = sb.poly_mul(p, sb.PolySymbol.identity(2, 1))
    for t, x in [(1.0, 0.3), (5.0, -2.0)]:
        assert np.allclose(sb.poly_eval(q, t, [x]), sb.poly_eval(p, t, [x]), rtol=1e-14)


def test_monomial_product():
    c = np.array([[1, 2], [3, 4]], dtype=complex)
    d = np.array([[0, 1], [1, 1]], dtype=complex)
    q = sb.poly_mul(sb.PolySymbol.monomial((1,), c), sb.PolySymbol.monomial((1,), d))
    assert list(q.terms) == [((2,), 0)]
    assert np.allclose(q.terms[((2,), 0)](0.0), c @ d)
    assert q.declared_order == 2


def test_identity_evaluates_to_identity():
    p = sb.PolySymbol.identity(3, 2)
    assert np.array_equal(sb.poly_eval(p, 7.0, [0.3, -4.0]), np.eye(3))


def test_single_term_evaluation():
    c = np.array([[1, 2], [3, 4]])
    p = sb.PolySymbol.monomial((1,), c)
    assert np.array_equal(sb.poly_eval(p, 1.0, [2.0]), 2 * c)


def test_eval_matches_direct_summation():
    rng = np.random.default_rng(1)
    p = random_symbol(rng, d=3, n=2, terms=3)
    for _ in range(20):
        t = rng.uniform(0, 50)
        xi = rng.normal(size=2)
        direct = sum(c(t) * xi[0] ** a[0] * xi[1] ** a[1] for (a, _), c in p.terms.items())
        got = sb.poly_eval(p, t, xi)
        assert np.linalg.norm(got - direct) <= 1e-12 * max(1, np.linalg.norm(direct))


def test_batched_eval():
    rng = np.random.default_rng(2)
    p = random_symbol(rng, n=2)
    xi = rng.normal(size=(5, 2))
    batch = sb.poly_eval(p, 2.0, xi)
    for k in range(5):
        assert np.allclose(batch[k], sb.poly_eval(p, 2.0, xi[k]))


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        sb.poly_add(sb.PolySymbol.identity(2, 1), sb.PolySymbol.identity(3, 1))


def test_truncation_goes_to_tail():
    p = sb.PolySymbol.monomial((2,), SWAP)
    q = sb.poly_mul(p, p, kmax=3)
    assert not q.terms
    assert q.tail is not None and list(q.tail.terms) == [((4,), 0)]
    assert q.declared_order == 4
    assert np.allclose(sb.poly_eval(q, 1.0, [0.5]), 0.5**4 * np.eye(2))
    assert not sb.poly_eval(q, 1.0, [0.5], tail=False).any()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_distributive_law(seed):
    rng = np.random.default_rng(seed)
    p, q, r = (random_symbol(rng) for _ in range(3))
    lhs = sb.poly_mul(sb.poly_add(p, q), r, kmax=3)
    rhs = sb.poly_add(sb.poly_mul(p, r, kmax=3), sb.poly_mul(q, r, kmax=3))
    for _ in range(20):
        t, x = rng.uniform(0, 10), rng.uniform(-1, 1)
        a, b = sb.poly_eval(lhs, t, [x]), sb.poly_eval(rhs, t, [x])
        assert np.linalg.norm(a - b) <= 1e-10 * max(1.0, np.linalg.norm(a))


def test_bdiag_split_scalar_blocks():
    m = np.array([[1, 2], [3, 4]])
    dg, off = sb.bdiag_split(sb.PolySymbol.monomial((0,), m))
    assert np.array_equal(sb.poly_eval(dg, 0, [1.0]), [[1, 0], [0, 4]])
    assert np.array_equal(sb.poly_eval(off, 0, [1.0]), [[0, 2], [3, 0]])


def test_bdiag_split_recovers_and_is_idempotent():
    rng = np.random.default_rng(3)
    p = random_symbol(rng, d=3)
    dg, off = sb.bdiag_split(p)
    for t, x in [(1.0, 0.2), (3.0, 1.5)]:
        assert np.array_equal(sb.poly_eval(sb.poly_add(dg, off), t, [x]), sb.poly_eval(p, t, [x]))
    dd, do = sb.bdiag_split(dg)
    assert np.array_equal(sb.poly_eval(dd, 2.0, [0.7]), sb.poly_eval(dg, 2.0, [0.7]))
    assert not sb.poly_eval(do, 2.0, [0.7]).any()


def test_block_diagonal_input_unchanged():
    p = sb.PolySymbol.monomial((1,), np.diag([1.0, 2.0, 3.0]))
    dg, off = sb.bdiag_split(p)
    assert np.array_equal(sb.poly_eval(dg, 1.0, [2.0]), sb.poly_eval(p, 1.0, [2.0]))
    assert not sb.poly_eval(off, 1.0, [2.0]).any()


def test_time_derivative_raises_class():
    p = sb.PolySymbol.monomial((1,), sy.RationalMF([(1, np.eye(2))]), ell=1)
    dp = sb.poly_dt(p)
    assert list(dp.terms) == [((1,), 2)]
    assert np.allclose(sb.poly_eval(dp, 3.0, [2.0]), -2.0 / 16 * np.eye(2))


def test_zone_membership():
    z = sb.Zone.from_c(0.5)
    assert z.t0 == 2.0
    assert z.contains(2.0, [0.5]) and not z.contains(1.9, [0.1]) and not z.contains(5.0, [0.6])
    with pytest.raises(ValueError):
        sb.Zone(c=0.5, t0=1.0)


@pytest.mark.parametrize("m", [1, 2, 3])
def test_estimate_order_monomial(m):
    p = sb.PolySymbol.monomial((m,), SWAP)
    fit = sb.estimate_order(p, sb.Zone.from_c(0.5))
    assert fit.s_exponent == pytest.approx(m, abs=1e-6)
    assert fit.diag_exponent == pytest.approx(m, abs=1e-3)


def test_estimate_order_zero_symbol():
    fit = sb.estimate_order(sb.PolySymbol.zero(2, 1), sb.Zone.from_c(0.5))
    assert math.isinf(fit.s_exponent) and math.isinf(fit.t_exponent)


def test_estimate_order_counts_time_decay():
    # xi (1 + t)^-1 has zone order 2: one from xi, one from t
    p = sb.PolySymbol.monomial((1,), sy.RationalMF([(1, SWAP)]), ell=1)
    fit = sb.estimate_order(p, sb.Zone.from_c(0.5))
    assert fit.s_exponent == pytest.approx(1.0, abs=1e-6)
    assert fit.t_exponent == pytest.approx(1.0, abs=0.01)
    # (1 + t) vs t on the ray t = 1/s costs a little at s ~ c/10
    assert fit.diag_exponent == pytest.approx(2.0, abs=0.05)


def test_order_bookkeeping_on_square():
    r1 = sb.PolySymbol.monomial((1,), 1j * SWAP)
    sq = sb.poly_mul(r1, r1)
    assert sq.declared_order == 2
    fit = sb.estimate_order(sq, sb.Zone.from_c(0.5))
    assert fit.s_exponent == pytest.approx(2.0, abs=1e-6)
    assert sb.order_diagnostic(sq, sy.default_t_grid())["ok"]


def test_order_diagnostic_flags_slow_coefficient():
    p = sb.PolySymbol(2, 1, {((0,), 0): np.eye(2)}, declared_order=2)
    assert not sb.order_diagnostic(p, sy.default_t_grid())["ok"]
    q = sb.PolySymbol(2, 1, {((0,), 2): sy.RationalMF([(2, np.eye(2))])}, declared_order=2)
    assert sb.order_diagnostic(q, sy.default_t_grid())["ok"]


def test_dump_symbol_json():
    p = sb.PolySymbol.monomial((1,), 1j * SWAP)
    doc = json.loads(sb.dump_symbol(p, [1.0, 2.0]))
    assert doc["terms"][0]["alpha"] == [1]
    assert doc["terms"][0]["samples"][1]["C"][0][1] == [0.0, 1.0]


def test_jet_symbol_product_and_derivative():
    f = sy.RationalMF([(1, SWAP)])
    t = 2.0
    a = sb.JetSymbol({((1,), 1): f.jet(t, 3)}, 1, 3)
    b = a @ a
    assert list(b.terms) == [((2,), 2)]
    # d/dt of (1+t)^-2 I
    assert np.allclose(b.dt().terms[((2,), 3)][0], -2 * (1 + t) ** -3 * np.eye(2))
    assert b.dt().J == 2


def test_jet_symbol_prunes_zeros_and_splits():
    z = np.zeros((1, 2, 2))
    s = sb.JetSymbol({((0,), 0): z, ((1,), 0): np.array([[[1, 2], [3, 4]]], complex)}, 1, 0)
    assert list(s.terms) == [((1,), 0)]
    dg, off = s.bdiag_split()
    assert np.array_equal(dg.evaluate([1.0]), [[1, 0], [0, 4]])
    assert np.array_equal(off.evaluate([2.0]), [[0, 4], [6, 0]])
