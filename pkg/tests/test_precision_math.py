"""Arbitrary-precision scalar layer: BigReal semantics and series kernels."""

import math

import mpmath as mp
import pytest
from hypothesis import given
from hypothesis import strategies as st

from chisum.precision_math import (
    DEFAULT_PRECISION_BITS,
    MIN_PRECISION_BITS,
    BigReal,
    NonConvergence,
    bessel_I,
    bessel_I_derivative,
    gauss_legendre_rule,
    kummer_1f1,
)

mp.mp.dps = 60


def as_mp(x: BigReal) -> mp.mpf:
    return mp.mpf(x.to_decimal().replace("e", "E"))


def rel_diff(got: BigReal, ref) -> float:
    ref = mp.mpf(ref)
    if ref == 0:
        return abs(float(as_mp(got)))
    return float(abs(as_mp(got) - ref) / abs(ref))


class TestBigReal:
    def test_default_precision(self):
        assert BigReal(1).precision_bits == DEFAULT_PRECISION_BITS

    def test_minimum_precision_enforced(self):
        with pytest.raises(ValueError):
            BigReal(1, MIN_PRECISION_BITS - 1)

    def test_result_precision_is_max_of_operands(self):
        a = BigReal(1, 64)
        b = BigReal(1, 192)
        assert (a + b).precision_bits == 192
        assert (a * b).precision_bits == 192
        assert (b / a).precision_bits == 192

    def test_comparisons_are_exact(self):
        third = BigReal(1, 256) / 3
        assert third < BigReal("0.33333333333333333334", 256)
        assert third > BigReal("0.33333333333333333333", 256)
        assert BigReal(2, 64) == BigReal(2, 512)

    def test_tiny_value_round_trip(self):
        # probabilities like e^-700 must survive serialization
        tiny = (BigReal(-700, 256)).exp()
        again = BigReal(tiny.to_decimal(), 256)
        assert again == tiny
        assert float(tiny) == 0.0 or float(tiny) > 0  # float may underflow, value must not
        assert tiny > BigReal(0, 256)

    def test_log_requires_positive(self):
        with pytest.raises(ValueError):
            BigReal(0, 64).log()
        with pytest.raises(ValueError):
            BigReal(-2, 64).log()

    def test_sqrt_requires_nonnegative(self):
        with pytest.raises(ValueError):
            BigReal(-1, 64).sqrt()

    @pytest.mark.parametrize("x", [0.3, 1.0, 4.7, 25.0])
    def test_unary_functions_match_mpmath(self, x):
        v = BigReal(x, 256)
        assert rel_diff(v.exp(), mp.exp(x)) < 1e-70
        assert rel_diff(v.log(), mp.log(x)) < 1e-70
        assert rel_diff(v.sqrt(), mp.sqrt(x)) < 1e-70
        assert rel_diff(v.erf(), mp.erf(x)) < 1e-70

    @given(st.floats(min_value=-1e12, max_value=1e12, allow_nan=False))
    def test_decimal_round_trip(self, x):
        v = BigReal(x, 128)
        assert BigReal(v.to_decimal(), 128) == v

    @given(
        st.floats(min_value=-1e6, max_value=1e6, allow_nan=False),
        st.floats(min_value=-1e6, max_value=1e6, allow_nan=False),
    )
    def test_add_and_mul_commute(self, x, y):
        a, b = BigReal(x, 128), BigReal(y, 128)
        assert a + b == b + a
        assert a * b == b * a


class TestKummer:
    @pytest.mark.parametrize(
        "a,b,z",
        [
            (0.5, 1.5, 2.0),
            (2.0, 0.5, 7.3),
            (1.5, 3.0, -4.0),
            (0.25, 0.75, -30.0),
            (5.0, 1.5, 40.0),
        ],
    )
    def test_matches_mpmath(self, a, b, z):
        res = kummer_1f1(a, b, z, 192)
        assert rel_diff(res.value, mp.hyp1f1(a, b, z)) < 1e-45
        assert res.terms_used > 0

    def test_truncation_bound_covers_reference(self):
        res = kummer_1f1(0.5, 1.5, 12.0, 128)
        ref = mp.hyp1f1(mp.mpf("0.5"), mp.mpf("1.5"), 12)
        assert abs(as_mp(res.value) - ref) <= float(as_mp(res.truncation_bound)) + 1e-30

    def test_nonpositive_integer_b_rejected(self):
        with pytest.raises(ValueError):
            kummer_1f1(1.0, -2.0, 1.0)


class TestBesselI:
    @pytest.mark.parametrize("nu", [0, 1, 3])
    @pytest.mark.parametrize("x", [0.1, 1.0, 9.5])
    def test_matches_mpmath(self, nu, x):
        res = bessel_I(nu, x, 192)
        assert rel_diff(res.value, mp.besseli(nu, x)) < 1e-45

    def test_order_zero_at_origin(self):
        assert float(bessel_I(0, 0.0).value) == 1.0
        assert float(bessel_I(2, 0.0).value) == 0.0

    def test_negative_arguments_rejected(self):
        with pytest.raises(ValueError):
            bessel_I(0, -1.0)
        with pytest.raises(ValueError):
            bessel_I(-1, 1.0)

    @given(
        st.integers(min_value=1, max_value=5),
        st.floats(min_value=0.01, max_value=30.0),
    )
    def test_derivatives_of_i0_never_exceed_i0(self, order, x):
        # I_mu < I_0 for mu > 0, and each derivative averages such terms
        deriv = bessel_I_derivative(0, order, x, 128)
        base = bessel_I(0, x, 128)
        assert deriv <= base.value

    def test_first_derivative_is_i1(self):
        d = bessel_I_derivative(0, 1, 2.5, 160)
        assert rel_diff(d, mp.besseli(1, mp.mpf("2.5"))) < 1e-40


class TestGaussLegendre:
    def test_exact_for_polynomials(self):
        # n points integrate degree 2n-1 exactly: check x^5 on [-1, 1] shifted
        nodes, weights = gauss_legendre_rule(3, 128)
        total = BigReal(0, 128)
        for t, w in zip(nodes, weights):
            x = (t + 1)  # map to [0, 2]
            total = total + w * x**5
        # integral of x^5 over [0,2] is 32/3, and dx = dt
        assert rel_diff(total, mp.mpf(32) / 3) < 1e-30

    def test_weights_sum_to_interval_length(self):
        _, weights = gauss_legendre_rule(7, 128)
        total = BigReal(0, 128)
        for w in weights:
            total = total + w
        assert rel_diff(total, 2) < 1e-30

    def test_rejects_empty_rule(self):
        with pytest.raises(ValueError):
            gauss_legendre_rule(0)
