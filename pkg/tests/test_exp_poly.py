"""Closure, exactness, and bookkeeping of the exponential-polynomial algebra."""

import json
import math

import mpmath as mp
import pytest
from hypothesis import given
from hypothesis import strategies as st

from chisum.exp_poly import EqualRates, ExpPolySum, Term, convolve_sums
from chisum.precision_math import BigReal

mp.mp.dps = 50

BITS = 192


def mk(terms, bits=BITS):
    return ExpPolySum(terms, precision_bits=bits)


def mp_eval(sum_, x):
    total = mp.mpf(0)
    for t in sum_.terms:
        total += mp.mpf(t.coeff.to_decimal().replace("e", "E")) * mp.e ** (
            mp.mpf(t.rate.to_decimal().replace("e", "E")) * x
        ) * mp.mpf(x) ** t.power
    return total


# strategy for small well-conditioned sums: distinct rates, modest coefficients
rates = st.lists(
    st.floats(min_value=-8.0, max_value=-0.05),
    min_size=1,
    max_size=3,
    unique_by=lambda r: round(r, 2),
)
coeffs = st.floats(min_value=-5.0, max_value=5.0).filter(lambda c: abs(c) > 1e-3)


@st.composite
def sums(draw):
    terms = []
    for rate in draw(rates):
        for power in range(draw(st.integers(min_value=1, max_value=3))):
            terms.append((draw(coeffs), rate, power))
    return mk(terms)


def test_evaluate_matches_reference():
    s = mk([(2.0, -1.0, 0), (0.5, -3.0, 2), (-0.25, -0.5, 1)])
    for x in (0.0, 0.7, 2.0, 5.5):
        ref = 2 * mp.e ** (-x) + 0.5 * x**2 * mp.e ** (-3 * x) - 0.25 * x * mp.e ** (-x / 2)
        assert abs(float(s.evaluate(x)) - float(ref)) < 1e-15


def test_evaluate_grid_matches_pointwise():
    s = mk([(1.0, -0.8, 0), (0.3, -2.1, 3)])
    step = 0.01
    grid = s.evaluate_grid(0.0, step, 1500)
    for i in (0, 1, 255, 256, 257, 999, 1499):
        exact = float(s.evaluate(i * step))
        assert grid[i] == pytest.approx(exact, rel=1e-12)


def test_convolution_of_exponentials_closed_form():
    # e^{-ax} * e^{-bx} convolves to (e^{-ax} - e^{-bx})/(b - a)
    f = mk([(1.0, -1.0, 0)])
    g = mk([(1.0, -4.0, 0)])
    conv = f.convolve(g)
    for x in (0.1, 1.0, 3.0):
        ref = (mp.e ** (-x) - mp.e ** (-4 * x)) / 3
        assert abs(float(conv.evaluate(x)) - float(ref)) < 1e-18


def test_convolution_against_numeric_quadrature():
    f = mk([(0.7, -1.3, 1)])
    g = mk([(1.1, -2.9, 2)])
    conv = f.convolve(g)
    for x in (0.5, 1.7):
        ref = mp.quad(
            lambda u: 0.7 * u * mp.e ** (-1.3 * u) * 1.1 * (x - u) ** 2 * mp.e ** (-2.9 * (x - u)),
            [0, x],
        )
        assert abs(float(conv.evaluate(x)) - float(ref)) < 1e-20


def test_equal_rates_rejected_across_operands():
    f = mk([(1.0, -2.0, 0)])
    g = mk([(1.0, -2.0, 1)])
    with pytest.raises(EqualRates):
        f.convolve(g)


def test_repeated_rate_within_one_operand_merges():
    s = mk([(1.0, -2.0, 0), (3.0, -2.0, 0)])
    assert s.term_count == 1
    assert float(s.evaluate(0.0)) == 4.0


@given(sums(), sums())
def test_closure_and_term_count_law(f, g):
    try:
        conv = f.convolve(g)
    except EqualRates:
        return
    assert isinstance(conv, ExpPolySum)
    # rates of the result are exactly the union of the operand rates
    got = {float(r) for r in conv.rates}
    expected = {float(r) for r in f.rates} | {float(r) for r in g.rates}
    assert got <= expected
    # each output block's degree is at most deg f + deg g + 1
    bound = (len(f.rates) + len(g.rates)) * (f.degree + g.degree + 2)
    assert conv.term_count <= bound


@given(sums(), sums())
def test_convolution_commutes(f, g):
    try:
        a = f.convolve(g)
        b = g.convolve(f)
    except EqualRates:
        return
    for x in (0.3, 1.1, 2.6):
        va, vb = a.evaluate(x), b.evaluate(x)
        assert abs(float(va - vb)) <= 1e-40 * max(1.0, abs(float(va)))


@given(sums(), sums(), sums())
def test_convolution_associates(f, g, h):
    try:
        left = f.convolve(g).convolve(h)
        right = f.convolve(g.convolve(h))
    except EqualRates:
        return
    for x in (0.4, 1.9):
        vl, vr = left.evaluate(x), right.evaluate(x)
        assert abs(float(vl - vr)) <= 1e-35 * max(1.0, abs(float(vl)))


@given(sums(), st.floats(min_value=-3.0, max_value=3.0))
def test_scaling_covariance(f, c):
    scaled = f.scale(c)
    cb = BigReal(c, BITS)
    for x in (0.2, 1.4):
        direct = f.evaluate(x) * cb
        diff = abs(scaled.evaluate(x) - direct)
        assert float(diff) <= 1e-40 * max(1.0, abs(float(direct)))


def test_integrate_full_and_partial():
    s = mk([(2.0, -3.0, 1)])
    # int_0^inf 2 x e^{-3x} dx = 2/9
    assert abs(float(s.integrate()) - 2.0 / 9.0) < 1e-30
    ref = mp.quad(lambda u: 2 * u * mp.e ** (-3 * u), [0, mp.mpf("0.8")])
    assert abs(float(s.integrate(0.8)) - float(ref)) < 1e-25


def test_abs_bound_dominates_samples():
    s = mk([(1.5, -1.0, 0), (-2.0, -4.0, 2)])
    bound = float(s.abs_bound(3.0))
    for i in range(31):
        assert abs(float(s.evaluate(i * 0.1))) <= bound + 1e-30


class TestPrune:
    def setup_method(self):
        self.s = mk(
            [(1.0, -1.0, 0), (1e-12, -1.0, 1), (1e-25, -6.0, 2), (0.5, -2.0, 0)]
        )

    def test_slack_covers_dropped_mass(self):
        pruned, slack = self.s.prune(4.0, drop_bits=30)
        for i in range(41):
            x = i * 0.1
            diff = abs(float(self.s.evaluate(x) - pruned.evaluate(x)))
            assert diff <= float(slack) * (1 + 1e-12)

    def test_monotone_in_drop_bits(self):
        loose, slack_loose = self.s.prune(4.0, drop_bits=30)
        tight, slack_tight = self.s.prune(4.0, drop_bits=90)
        assert loose.term_count <= tight.term_count
        assert float(slack_loose) >= float(slack_tight)
        assert float(slack_loose) >= 0.0

    def test_empty_sum_prunes_to_itself(self):
        empty = mk([])
        pruned, slack = empty.prune(1.0)
        assert pruned.is_empty()
        assert float(slack) == 0.0


def test_json_round_trip_is_exact():
    s = mk([(1 / 3, -1.7, 2), (-2.5e-80, -0.33, 0)], bits=256)
    again = ExpPolySum.from_json(s.to_json())
    assert again.precision_bits == s.precision_bits
    assert again == s
    # the serialized form is valid JSON with decimal strings, not floats
    doc = json.loads(s.to_json())
    assert isinstance(doc, dict)


def test_term_ordering_rates_descending():
    s = mk([(1.0, -5.0, 0), (1.0, -0.5, 0), (1.0, -2.0, 0)])
    listed = [float(r) for r in s.rates]
    assert listed == sorted(listed, reverse=True)


def test_convolve_sums_helper_matches_method():
    f = mk([(1.2, -1.1, 1)])
    g = mk([(0.8, -2.3, 0)])
    assert convolve_sums(f, g) == f.convolve(g)


def test_term_dataclass_fields():
    t = Term(BigReal(2, 64), BigReal(-1, 64), 3)
    assert t.power == 3
    assert float(t.coeff) == 2.0
