"""Certified builds: order selection, sandwich bounds, and query contracts."""

import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chisum.certified_density import (
    BudgetUnreachable,
    DomainError,
    GridMismatch,
    WeightList,
    build,
    cdf_bounds,
    numeric_convolve,
    pair_density_exact,
    pdf_bounds,
    select_order,
    simpson_mass,
    simpson_prefix,
)
from chisum.oracles import quad_convolve_density

mp.mp.dps = 40


def as_mp(v) -> mp.mpf:
    return mp.mpf(v.to_decimal().replace("e", "E"))


def mp_pair_density(a, b, x, dof=1):
    """Independent closed form for the two-summand density (odd dof).

    Everything is lifted to mpf before any arithmetic; a float product
    like rate*x would poison the exponent at the 1e-17 level, which is
    visible next to certified bounds.
    """
    a, b, x = mp.mpf(a), mp.mpf(b), mp.mpf(x)
    nu = (dof - 1) // 2
    rate = -(a + b) / (4 * a * b)
    s = (b - a) / (4 * a * b)
    c = (
        mp.factorial(nu)
        / mp.factorial(dof - 1)
        * (4 * a * b) ** (-mp.mpf(dof) / 2)
        * ((b - a) / (8 * a * b)) ** (-nu)
    )
    return c * x**nu * mp.e ** (rate * x) * mp.besseli(nu, s * x)


class TestWeightList:
    def test_rejects_nonpositive_weight(self):
        with pytest.raises(DomainError):
            WeightList((1.0, -2.0))
        with pytest.raises(DomainError):
            WeightList((0.0,))

    def test_rejects_even_dof(self):
        with pytest.raises(DomainError):
            WeightList((1.0, 2.0), dof=2)

    def test_rejects_empty(self):
        with pytest.raises(DomainError):
            WeightList(())

    def test_len_and_mean(self):
        wl = WeightList((1.0, 2.0, 3.0), dof=3)
        assert len(wl) == 3


class TestPairDensity:
    @pytest.mark.parametrize("a,b", [(1.0, 2.0), (0.3, 5.0), (2.0, 2.5)])
    @pytest.mark.parametrize("x", [0.2, 1.0, 4.0])
    def test_matches_reference(self, a, b, x):
        got = float(pair_density_exact(a, b, x, dof=1))
        assert got == pytest.approx(float(mp_pair_density(a, b, x)), rel=1e-13)

    def test_dof_three(self):
        got = float(pair_density_exact(1.0, 3.0, 2.0, dof=3))
        assert got == pytest.approx(float(mp_pair_density(1, 3, 2, dof=3)), rel=1e-13)

    def test_normalized(self):
        mass = mp.quad(lambda u: mp_pair_density(1.0, 2.0, u), [0, 10, mp.inf])
        assert abs(float(mass) - 1.0) < 1e-13

    def test_degenerate_pair_rejected(self):
        with pytest.raises(DomainError):
            pair_density_exact(2.0, 2.0, 1.0)


class TestBuildSymbolic:
    """Even summand counts stay entirely in the exact algebra."""

    def test_two_term_bracket_and_width(self):
        # the reference itself carries ~1e-38 error at 40 digits, so leave
        # that much slop when checking the certified bracket contains it
        eps = mp.mpf("1e-35")
        dens = build(WeightList((1.0, 2.0)), r_max=1e-8, x_max=8.0)
        for i in range(1, 20):
            x = 0.4 * i
            lo, hi = pdf_bounds(dens, x)
            exact = mp_pair_density(1.0, 2.0, x)
            assert as_mp(lo) <= exact * (1 + eps)
            assert as_mp(hi) >= exact * (1 - eps)
            assert float(hi - lo) / float(lo) <= 1.2e-8

    def test_four_term_brackets_reference(self):
        # reference: 1D quadrature of the two exact pair densities at 40
        # digits.  The certified bracket can be far tighter than float64
        # (width ~5e-23 at x=1), so the quadrature helper is checked
        # against the reference at its own accuracy instead of against
        # the bracket.
        ws = (0.5, 1.0, 2.0, 4.0)
        dens = build(WeightList(ws), r_max=1e-6, x_max=20.0)
        for x in (1.0, 4.0, 9.0, 15.0):
            lo, hi = pdf_bounds(dens, x)
            truth = mp.quad(
                lambda u: mp_pair_density(0.5, 1.0, u)
                * mp_pair_density(2.0, 4.0, mp.mpf(x) - u),
                [0, x / 2, x],
            )
            assert as_mp(lo) <= truth <= as_mp(hi)
            q = float(quad_convolve_density(ws, x))
            assert abs(q / float(truth) - 1.0) < 5e-12

    def test_equal_weights_handled_by_merge_or_jitter(self):
        # [w, w] has equal rates; the builder must still certify it.
        # 2*(chi2_1 + chi2_1) = 2*chi2_2 has the closed form e^(-x/4)/4,
        # which the merged-gamma path reproduces almost exactly, so the
        # reference needs both extra digits and an error allowance.
        eps = mp.mpf("1e-35")
        dens = build(WeightList((2.0, 2.0)), r_max=1e-6, x_max=12.0)
        for x in (1.0, 3.0, 7.0):
            lo, hi = pdf_bounds(dens, x)
            with mp.workdps(60):
                exact = mp.e ** (-mp.mpf(x) / 4) / 4
            assert as_mp(lo) <= exact * (1 + eps)
            assert as_mp(hi) >= exact * (1 - eps)

    def test_cdf_bounds_monotone_and_capped(self):
        dens = build(WeightList((1.0, 2.0)), r_max=1e-6, x_max=10.0)
        prev_hi = 0.0
        for t in (0.5, 1.0, 2.0, 5.0, 9.0):
            lo, hi = cdf_bounds(dens, t)
            assert 0.0 <= float(lo) <= float(hi) <= 1.0
            assert float(hi) >= prev_hi
            prev_hi = float(lo)

    def test_cdf_at_zero(self):
        dens = build(WeightList((1.0, 2.0)), r_max=1e-6)
        lo, hi = cdf_bounds(dens, 0.0)
        assert float(lo) == 0.0 and float(hi) == 0.0


class TestBuildGridPath:
    """Odd counts route the last factor through product integration."""

    def test_three_term_brackets_quadrature(self):
        ws = (1.0, 2.0, 3.0)
        dens = build(WeightList(ws), r_max=1e-4, x_max=15.0)
        for x in (0.5, 2.0, 6.0, 11.0):
            lo, hi = pdf_bounds(dens, x)
            q = float(quad_convolve_density(ws, x))
            assert float(lo) <= q <= float(hi), x

    def test_single_weight_is_exact_chi2(self):
        dens = build(WeightList((0.125,)), r_max=1e-6, x_max=2.0)
        lo, hi = cdf_bounds(dens, 1.0)
        exact = mp.erf(mp.sqrt(mp.mpf(1) / (2 * mp.mpf("0.125"))))
        assert float(lo) <= float(exact) <= float(hi)
        assert float(hi - lo) / float(lo) < 1e-15

    def test_single_weight_dof1_pdf_unbounded_at_zero(self):
        dens = build(WeightList((1.0,)), r_max=1e-6, x_max=4.0)
        with pytest.raises(DomainError):
            pdf_bounds(dens, 0.0)

    def test_explicit_grid_step_validated(self):
        with pytest.raises(DomainError):
            build(WeightList((1.0, 1.0, 2.0)), x_max=4.0, grid_step=3.0)

    def test_unreachable_budget_raises(self):
        # a budget no truncation order can meet must raise, not return a
        # silently degraded plan
        dens = build(WeightList((1.0, 2.0)), r_max=1e-4, x_max=6.0)
        with pytest.raises(BudgetUnreachable):
            select_order(dens.plan.pairs[0], 6.0, 1e-30, max_order=6)


class TestQueryContracts:
    def test_query_outside_window_rejected(self):
        dens = build(WeightList((1.0, 2.0)), r_max=1e-4, x_max=5.0)
        with pytest.raises(DomainError):
            pdf_bounds(dens, 5.5)
        with pytest.raises(DomainError):
            pdf_bounds(dens, -0.1)
        with pytest.raises(DomainError):
            cdf_bounds(dens, 6.0)

    def test_r_max_domain(self):
        with pytest.raises(DomainError):
            build(WeightList((1.0, 2.0)), r_max=0.0)
        with pytest.raises(DomainError):
            build(WeightList((1.0, 2.0)), r_max=1.0)


class TestOrderSelection:
    def test_orders_grow_as_budget_shrinks(self):
        ws = WeightList((1.0, 2.0))
        loose = build(ws, r_max=1e-2, x_max=6.0)
        tight = build(ws, r_max=1e-10, x_max=6.0)
        assert max(tight.plan.orders) > max(loose.plan.orders)

    def test_plan_kappas_fit_budget(self):
        plan = build(WeightList((1.0, 2.0, 3.0, 4.0)), r_max=1e-6, x_max=10.0).plan
        assert len(plan.orders) == len(plan.pairs)
        kappas = [float(k) for k in plan.kappas]
        assert all(k >= 0 for k in kappas)
        # the per-pair certified kappas must fit inside the overall budget
        total = 1.0
        for k in kappas:
            total *= 1.0 + k
        assert total - 1.0 <= 1e-6 * 1.03

    def test_select_order_grows_with_budget(self):
        pair = build(WeightList((1.0, 2.0)), r_max=1e-4, x_max=6.0).plan.pairs[0]
        loose = select_order(pair, 6.0, 1e-3)
        tight = select_order(pair, 6.0, 1e-12)
        assert tight > loose >= 0
        assert tight % 2 == loose % 2 == 0


class TestRealizedError:
    @pytest.mark.parametrize("r_max", [1e-2, 1e-5])
    def test_budget_honored_at_cdf_query(self, r_max):
        dens = build(WeightList((0.8, 1.7)), r_max=r_max, x_max=6.0)
        lo, hi = cdf_bounds(dens, 1.0)
        assert float((hi - lo) / lo) <= 1.1 * r_max


class TestNumericHelpers:
    def test_simpson_mass_quadratic_exact(self):
        xs = np.linspace(0.0, 2.0, 201)
        vals = 3.0 * xs**2
        assert simpson_mass(vals, xs[1] - xs[0]) == pytest.approx(8.0, rel=1e-12)

    def test_simpson_prefix_final_matches_mass(self):
        xs = np.linspace(0.0, 1.0, 101)
        vals = np.exp(-xs)
        pre = simpson_prefix(vals, 0.01)
        assert pre[-1] == pytest.approx(simpson_mass(vals, 0.01), rel=1e-12)
        assert np.all(np.diff(pre) >= 0)

    def test_numeric_convolve_exponentials(self):
        h = 5e-4
        xs = np.arange(0, 8, h)
        f = np.exp(-xs)
        g = 2 * np.exp(-2 * xs)
        conv = numeric_convolve(f, g, h, normalize=False)
        x = 2.0
        idx = int(round(x / h))
        ref = 2 * (math.exp(-x) - math.exp(-2 * x))
        assert conv[idx] == pytest.approx(ref, rel=1e-7)

    def test_numeric_convolve_shape_mismatch(self):
        with pytest.raises(GridMismatch):
            numeric_convolve(np.ones(10), np.ones(11), 0.1)


@settings(max_examples=12)
@given(
    st.lists(
        st.floats(min_value=0.2, max_value=5.0),
        min_size=2,
        max_size=4,
        unique_by=lambda w: round(w, 1),
    ),
    st.floats(min_value=0.1, max_value=0.9),
)
def test_property_quadrature_inside_bounds(ws, frac):
    """Any even-count build must sandwich the brute-force density.

    The sandwich holds up to the quadrature helper's own float64 error:
    pointwise brackets can be orders of magnitude tighter than the overall
    budget, so a bare inclusion test would flag the reference, not the build.
    """
    if len(ws) % 2 == 1:
        ws = ws + [6.0]
    wl = WeightList(tuple(ws))
    x_max = 2.0 * sum(ws)
    dens = build(wl, r_max=1e-4, x_max=x_max)
    x = frac * x_max
    lo, hi = pdf_bounds(dens, x)
    q = float(quad_convolve_density(tuple(ws), x))
    assert float(lo) * (1.0 - 5e-12) <= q <= float(hi) * (1.0 + 5e-12)
