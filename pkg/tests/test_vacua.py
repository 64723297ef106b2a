"""Tests for the landscape-statistics layer.

Covers the Marchenko-Pastur quantile weights, the certified sum
probability, the analytic mass-term density, the negative-mass tail
estimate, and the two scaling-law fits.
"""

import math

import mpmath as mp
import numpy as np
import pytest

from chisum.certified_density import DomainError
from chisum.vacua import (
    FullMassEstimate,
    MpWeights,
    SweepRow,
    fit,
    full_mass_tail,
    linlog_crossing,
    mc_full_mass,
    mp_cdf,
    mp_pdf,
    mp_quantile_weights,
    p_n,
    t_term_pdf,
)

mp.mp.dps = 40


class TestMpLaw:
    def test_density_midpoint(self):
        # f(2) = sqrt(2 * 2) / (4 pi) = 1 / (2 pi)
        assert mp_pdf(2.0) == pytest.approx(1.0 / (2.0 * math.pi), rel=1e-15)

    def test_density_vanishes_off_support(self):
        assert mp_pdf(0.0) == 0.0
        assert mp_pdf(4.0) == 0.0
        assert mp_pdf(-0.5) == 0.0
        assert mp_pdf(4.5) == 0.0

    def test_cdf_endpoints(self):
        assert mp_cdf(0.0) == 0.0
        assert mp_cdf(4.0) == 1.0
        assert mp_cdf(-1.0) == 0.0
        assert mp_cdf(9.0) == 1.0

    def test_cdf_matches_quadrature(self):
        for x in (0.4, 1.3, 3.1):
            ref = mp.quad(lambda u: mp.mpf(mp_pdf(float(u))), [0, 0.05, x])
            assert mp_cdf(x) == pytest.approx(float(ref), abs=1e-12)

    def test_cdf_small_x_expansion(self):
        # near zero the CDF behaves as 2 sqrt(x) / pi
        x = 1e-8
        assert mp_cdf(x) == pytest.approx(2.0 * math.sqrt(x) / math.pi, rel=1e-4)


class TestQuantileWeights:
    def test_smallest_case_is_single_edge_weight(self):
        mw = mp_quantile_weights(2)
        assert mw.lambdas == (4.0,)
        assert mw.weights == (0.125,)

    def test_quantile_targets_hit(self):
        mw = mp_quantile_weights(6)
        for k, lam in enumerate(mw.lambdas[:-1]):
            b = k + 2
            assert mp_cdf(lam) == pytest.approx(b / 6.0, abs=1e-15)
        assert mw.lambdas[-1] == 4.0

    def test_weights_are_reciprocal_scaled_quantiles(self):
        mw = mp_quantile_weights(9)
        for lam, w in zip(mw.lambdas, mw.weights):
            assert w == pytest.approx(1.0 / (9.0 * lam), rel=1e-15)
        assert all(a > b for a, b in zip(mw.weights, mw.weights[1:]))

    def test_weight_list_uses_dof_one(self):
        wl = mp_quantile_weights(5).weight_list()
        assert wl.dof == 1
        assert len(wl.weights) == 4

    def test_cached(self):
        assert mp_quantile_weights(12) is mp_quantile_weights(12)

    def test_validation(self):
        with pytest.raises(DomainError):
            mp_quantile_weights(1)
        with pytest.raises(DomainError):
            MpWeights(N=3, lambdas=(1.0,), weights=(0.1,))
        with pytest.raises(DomainError):
            MpWeights(N=3, lambdas=(2.0, 1.0), weights=(0.1, 0.2))
        with pytest.raises(DomainError):
            MpWeights(N=3, lambdas=(1.0, 4.5), weights=(0.1, 0.05))


class TestSumProbability:
    def test_n2_brackets_closed_form(self):
        # single weight 1/8: P(chi^2_1 / 8 <= 1) = erf(2)
        row = p_n(2)
        ref = float(mp.log(mp.erf(mp.mpf(2))))
        assert row.log_p_lo <= ref <= row.log_p_hi
        assert row.rel_err <= 0.05

    def test_frozen_midpoint_n6(self):
        row = p_n(6, 1e-3)
        mid = 0.5 * (row.log_p_lo + row.log_p_hi)
        assert mid == pytest.approx(-0.5372063128514881, rel=1e-9)
        assert row.rel_err <= 1.1e-3

    def test_budget_tightens_bounds(self):
        loose = p_n(8, 0.05)
        tight = p_n(8, 1e-4)
        assert tight.rel_err <= 1.1e-4
        assert tight.rel_err < loose.rel_err
        # tightening must narrow, not shift: the tight interval sits inside
        assert loose.log_p_lo <= tight.log_p_lo
        assert tight.log_p_hi <= loose.log_p_hi

    def test_row_invariant(self):
        with pytest.raises(DomainError):
            SweepRow(N=4, log_p_lo=-1.0, log_p_hi=-2.0, rel_err=0.1, seconds=0.0)


class TestMassTermDensity:
    def test_frozen_value(self):
        assert t_term_pdf(8, 0.9) == pytest.approx(0.7621335314973603, rel=1e-13)

    @pytest.mark.parametrize(
        "N,x",
        [(8, 0.2), (8, 0.9), (8, 2.5), (20, 3.0), (100, 0.015)],
    )
    def test_matches_direct_convolution(self, N, x):
        # reference: numeric convolution of Gamma(N/2, N/2) with a centered
        # normal of width 2/N, no shared code with the implementation
        Nv = mp.mpf(N)
        s = 2 / Nv

        def gamma_pdf(u):
            return (Nv / 2) ** (Nv / 2) * u ** (Nv / 2 - 1) * mp.e ** (-Nv * u / 2) / mp.gamma(Nv / 2)

        ref = mp.quad(
            lambda u: gamma_pdf(u)
            * mp.e ** (-((mp.mpf(x) - u) ** 2) / (2 * s * s))
            / (s * mp.sqrt(2 * mp.pi)),
            [0, max(x, 0.5), max(2 * x, 3)],
        )
        assert t_term_pdf(N, x) == pytest.approx(float(ref), rel=1e-10)

    def test_unit_mass(self):
        total = mp.quad(
            lambda u: mp.mpf(t_term_pdf(8, float(u))), [-1.5, 0.0, 1.0, 2.0, 6.0, 12.0]
        )
        assert abs(float(total) - 1.0) < 1e-9

    def test_negative_arguments_supported(self):
        # the normal smearing pushes mass below zero; the density must be
        # finite and positive there
        val = t_term_pdf(6, -0.2)
        assert 0.0 < val < 1.0


class TestFullMassTail:
    def test_frozen_value_and_note(self):
        est = full_mass_tail(6, grid_step=5e-3)
        assert isinstance(est, FullMassEstimate)
        assert est.value == pytest.approx(0.4932622272850229, rel=1e-10)
        assert "uncertified" in est.note

    def test_grid_step_validated(self):
        with pytest.raises(DomainError):
            full_mass_tail(6, grid_step=0.5)
        with pytest.raises(DomainError):
            full_mass_tail(6, grid_step=0.0)

    def test_mc_reference_reproducible(self):
        a = mc_full_mass(6, 20_000, 5)
        b = mc_full_mass(6, 20_000, 5)
        assert a.value == b.value == 0.49235
        assert a.std_error == pytest.approx(0.0035351200651463025, rel=1e-12)

    def test_estimate_consistent_with_mc(self):
        est = full_mass_tail(6, grid_step=5e-3)
        ref = mc_full_mass(6, 20_000, 5)
        assert abs(est.value - ref.value) < 3.5 * ref.std_error


class TestFits:
    @staticmethod
    def rows_from(ns, fn):
        rows = []
        for n in ns:
            y = fn(n)
            rows.append(
                SweepRow(N=int(n), log_p_lo=y, log_p_hi=y, rel_err=0.0, seconds=0.0)
            )
        return rows

    def test_linlog_recovers_parameters(self):
        ns = np.arange(4, 44, 4)
        rows = self.rows_from(ns, lambda n: math.log(2.0 + n) - 0.7 - 0.34 * n)
        res = fit(rows, "LINLOG")
        assert res.params["a"] == pytest.approx(2.0, abs=1e-3)
        assert res.params["c"] == pytest.approx(0.7, abs=1e-3)
        assert res.params["d"] == pytest.approx(0.34, abs=1e-4)
        assert max(abs(r) for r in res.residuals) < 1e-8

    def test_power_recovers_parameters(self):
        ns = np.arange(4, 44, 4)
        rows = self.rows_from(ns, lambda n: -0.31 * n**1.01)
        res = fit(rows, "POWER")
        assert res.params["c"] == pytest.approx(0.31, abs=1e-3)
        assert res.params["p"] == pytest.approx(1.01, abs=1e-3)
        assert max(abs(r) for r in res.residuals) < 1e-8

    def test_model_discrimination(self):
        # on LINLOG-generated data the POWER law must fit visibly worse
        ns = np.arange(4, 84, 4)
        rows = self.rows_from(ns, lambda n: math.log(2.0 + n) - 0.7 - 0.34 * n)
        good = fit(rows, "LINLOG")
        bad = fit(rows, "POWER")
        assert max(abs(r) for r in bad.residuals) > 10 * max(
            max(abs(r) for r in good.residuals), 1e-12
        )

    def test_case_insensitive_model_name(self):
        ns = np.arange(4, 24, 4)
        rows = self.rows_from(ns, lambda n: -0.3 * n)
        assert fit(rows, "power").model == fit(rows, "POWER").model

    def test_too_few_rows(self):
        rows = self.rows_from([4, 8], lambda n: -0.3 * n)
        with pytest.raises(DomainError):
            fit(rows, "POWER")
        rows = self.rows_from([4, 8, 12], lambda n: -0.3 * n)
        with pytest.raises(DomainError):
            fit(rows, "LINLOG")

    def test_unknown_model(self):
        rows = self.rows_from([4, 8, 12, 16], lambda n: -0.3 * n)
        with pytest.raises(DomainError):
            fit(rows, "EXP")

    def test_noisy_recovery_with_errors(self):
        rng = np.random.default_rng(99)
        ns = np.arange(4, 104, 4)
        rows = self.rows_from(
            ns,
            lambda n: math.log(2.0 + n) - 0.7 - 0.34 * n + rng.normal(0.0, 0.01),
        )
        res = fit(rows, "LINLOG")
        assert res.params["d"] == pytest.approx(0.34, abs=0.01)
        assert res.std_errors["d"] > 0.0


class TestCrossing:
    def test_frozen_value(self):
        assert linlog_crossing(0.35) == pytest.approx(3312.57, abs=0.01)

    def test_satisfies_defining_equation(self):
        n = linlog_crossing(0.34)
        lhs = math.log(n) - 0.34 * n
        assert lhs == pytest.approx(-500.0 * math.log(10.0), rel=1e-10)

    def test_monotone_in_slope(self):
        assert linlog_crossing(0.40) < linlog_crossing(0.30)
