"""Independent ground-truth generators for validating certified envelopes.

Four routes that share no code with the symbolic build: closed-form densities
for two, three, and four summands; brute-force iterated quadrature for up to
eight summands; and seeded Monte Carlo for tail probabilities. Tests compare
the certified bounds against these, never against the build's own algebra.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import gmpy2
import numpy as np
from gmpy2 import mpfr
from numpy.polynomial import chebyshev
from scipy.special import roots_jacobi

from .certified_density import DomainError, WeightList
from .precision_math import (
    DEFAULT_PRECISION_BITS,
    BigReal,
    as_mpfr,
    bessel_I,
    context,
    kummer_1f1,
)


class QuadratureFailure(RuntimeError):
    """The iterated-quadrature oracle did not stabilize."""


# ---------------------------------------------------------------------------
# closed forms


def gamma_sum_density(
    alpha1, beta1, alpha2, beta2, z, precision_bits: int = DEFAULT_PRECISION_BITS
) -> BigReal:
    """Density of the sum of independent Gamma(a1, b1) and Gamma(a2, b2) at z.

        f(z) = b1^a1 b2^a2 / Gamma(a1+a2) * z^{a1+a2-1} e^{-b2 z}
               * 1F1(a1; a1+a2; (b2-b1) z)

    Symmetric under swapping the two factors (Kummer's transformation); with
    b1 = b2 the 1F1 factor is 1 and the sum is Gamma(a1+a2, b).
    """
    bits = precision_bits
    with context(bits + 16):
        a1 = as_mpfr(alpha1, bits + 16)
        b1 = as_mpfr(beta1, bits + 16)
        a2 = as_mpfr(alpha2, bits + 16)
        b2 = as_mpfr(beta2, bits + 16)
        zv = as_mpfr(z, bits + 16)
        if not (a1 > 0 and b1 > 0 and a2 > 0 and b2 > 0):
            raise DomainError("shapes and rates must be positive")
        if zv < 0:
            return BigReal(0, bits)
        hyp = kummer_1f1(a1, a1 + a2, (b2 - b1) * zv, bits + 16).value
        val = (
            b1 ** a1
            * b2 ** a2
            / gmpy2.gamma(a1 + a2)
            * zv ** (a1 + a2 - 1)
            * gmpy2.exp(-b2 * zv)
            * as_mpfr(hyp, bits + 16)
        )
    return BigReal(val, bits)


def _erfi(y: mpfr, bits: int) -> mpfr:
    """erfi(y) = 2y/sqrt(pi) * 1F1(1/2; 3/2; y^2) for y >= 0."""
    with context(bits):
        hyp = kummer_1f1(mpfr(1) / 2, mpfr(3) / 2, y * y, bits).value
        return 2 * y / gmpy2.sqrt(gmpy2.const_pi()) * as_mpfr(hyp, bits)


def _erfi_asymptotic_series(y2: mpfr, bits: int) -> mpfr:
    """S with erfi(y) = e^{y^2}/(sqrt(pi) y) * S, valid for y^2 >> bits.

    Truncating the divergent series at its smallest term leaves a relative
    error of order e^{-y^2}, negligible for y^2 >= 0.8 * bits.
    """
    with context(bits):
        term = mpfr(1)
        total = mpfr(1)
        eps = mpfr(2) ** (-(bits + 8))
        k = 0
        while True:
            nxt = term * (2 * k + 1) / (2 * y2)
            if nxt >= term or term < eps * total:
                return total
            total += nxt
            term = nxt
            k += 1


def _i0_minus_i1_scaled(u: mpfr, bits: int) -> mpfr:
    """(I_0(u) - I_1(u)) * e^{-u} for large u, cancellation-free.

    Works with the exact coefficient differences of the two large-argument
    series I_nu ~ e^u/sqrt(2 pi u) sum_k c_k(nu) u^{-k}, so the leading
    1/(2u) behaviour of the difference is produced directly instead of by
    subtracting two nearly equal values.  Truncated at the smallest term;
    the remainder is far below 2^-bits once u >= 0.75 * bits.
    """
    with context(bits):
        eps = mpfr(2) ** (-(bits + 8))
        c0 = gmpy2.mpq(1, 8)
        c1 = gmpy2.mpq(-3, 8)
        total = mpfr(0)
        prev = None
        inv = 1 / u
        power = inv
        for k in range(1, 4096):
            term = mpfr(c0 - c1) * power
            if prev is not None and abs(term) >= prev:
                break
            total += term
            prev = abs(term)
            if k > 2 and prev < eps * abs(total):
                break
            c0 = -c0 * gmpy2.mpq(-((2 * k + 1) ** 2), 8 * (k + 1))
            c1 = -c1 * gmpy2.mpq(4 - (2 * k + 1) ** 2, 8 * (k + 1))
            power *= inv
        return total / gmpy2.sqrt(2 * gmpy2.const_pi() * u)


def appendix_three_term(a, b, x, precision_bits: int = DEFAULT_PRECISION_BITS) -> BigReal:
    """Density of aX + aY + bZ (X, Y, Z ~ chi^2_1 iid, 0 < a < b) at x.

        f(x) = e^{-x/(2a)} / (2 sqrt(a(b-a))) * erfi(sqrt((b-a) x / (2ab)))

    The constant differs from the usually quoted form by a factor
    (b-a)/(ab); this normalization is the one with unit mass, checked by
    quadrature in the tests.
    """
    bits = precision_bits
    with context(bits + 16):
        av = as_mpfr(a, bits + 16)
        bv = as_mpfr(b, bits + 16)
        xv = as_mpfr(x, bits + 16)
        if not 0 < av < bv:
            raise DomainError("need 0 < a < b")
        if xv <= 0:
            return BigReal(0, bits)
        y2 = (bv - av) * xv / (2 * av * bv)
        front = 1 / (2 * gmpy2.sqrt(av * (bv - av)))
        if y2 >= max(128, (bits + 16) * 0.8):
            # Large argument: e^{-x/(2a)} erfi(y) overflows the ascending
            # series, but the exponents combine exactly to -x/(2b).
            series = _erfi_asymptotic_series(y2, bits + 16)
            val = (
                front
                * gmpy2.exp(-xv / (2 * bv))
                / (gmpy2.sqrt(gmpy2.const_pi() * y2))
                * series
            )
        else:
            arg = gmpy2.sqrt(y2)
            val = front * gmpy2.exp(-xv / (2 * av)) * _erfi(arg, bits + 16)
    return BigReal(val, bits)


def appendix_four_term(a, b, x, precision_bits: int = DEFAULT_PRECISION_BITS) -> BigReal:
    """Density of aX + aY + aZ + bW (chi^2_1 iid, 0 < a < b) at x.

        f(x) = x / (4 a^{3/2} sqrt(b)) * e^{-(a+b)x/(4ab)}
               * (I_0(s x) - I_1(s x)),   s = (b-a)/(4ab)

    Writing the Bessel argument as (a-b)/(4ab) x < 0 turns the difference
    into the sum I_0 + I_1 of the classically quoted form (I_0 even, I_1
    odd); the leading factor x is required for unit mass. Derivable in
    closed form from int_0^x e^v I_0(v) dv = x e^x (I_0(x) - I_1(x)).
    """
    bits = precision_bits
    with context(bits + 16):
        av = as_mpfr(a, bits + 16)
        bv = as_mpfr(b, bits + 16)
        xv = as_mpfr(x, bits + 16)
        if not 0 < av < bv:
            raise DomainError("need 0 < a < b")
        if xv <= 0:
            return BigReal(0, bits)
        s = (bv - av) / (4 * av * bv)
        u = s * xv
        front = xv / (4 * av ** mpfr(1.5) * gmpy2.sqrt(bv))
        if u >= max(96, (bits + 16) * 0.75):
            # Large argument: the Bessel difference cancels to O(1/u) of
            # either term, and e^{-(a+b)x/(4ab)} e^{u} = e^{-x/(2b)} exactly.
            val = (
                front
                * gmpy2.exp(-xv / (2 * bv))
                * _i0_minus_i1_scaled(u, bits + 48)
            )
        else:
            # The subtraction loses about log2(2u) bits; pad generously.
            pad = bits + 64
            i0 = as_mpfr(bessel_I(0, u, pad).value, pad)
            i1 = as_mpfr(bessel_I(1, u, pad).value, pad)
            val = (
                front
                * gmpy2.exp(-(av + bv) * xv / (4 * av * bv))
                * (i0 - i1)
            )
    return BigReal(val, bits)


# ---------------------------------------------------------------------------
# Monte Carlo


@dataclass(frozen=True)
class McEstimate:
    """A Monte Carlo probability estimate with its binomial standard error."""

    value: float
    std_error: float
    samples: int

    def __post_init__(self):
        if self.samples < 10_000:
            raise DomainError("Monte Carlo estimates need at least 10^4 samples")


_MC_CHUNK_SCALARS = 250_000


def mc_tail(w, t: float, samples: int, seed: int, dof: int = 1) -> McEstimate:
    """Empirical P(sum_i w_i X_i <= t), X_i ~ chi^2_dof iid.

    Sampling is chunked over independent Philox streams keyed (seed, chunk),
    so results are reproducible bit-for-bit for a given seed and the chunks
    could be distributed; chi-square draws are sums of squared standard
    normals, keeping the generator contract explicit.
    """
    if isinstance(w, WeightList):
        weights = np.array([float(v) for v in w.weights])
        dof = w.dof
    else:
        weights = np.array([float(v) for v in w])
    if samples < 10_000:
        raise DomainError("need samples >= 10^4")
    n = weights.shape[0]
    chunk = max(1, _MC_CHUNK_SCALARS // max(n * dof, 1))
    hits = 0
    done = 0
    stream = 0
    while done < samples:
        m = min(chunk, samples - done)
        rng = np.random.Generator(np.random.Philox(key=[seed, stream]))
        normals = rng.standard_normal((m, n, dof))
        chis = np.einsum("ijk,ijk->ij", normals, normals)
        z = chis @ weights
        hits += int(np.count_nonzero(z <= t))
        done += m
        stream += 1
    p = hits / samples
    return McEstimate(
        value=p,
        std_error=math.sqrt(p * (1.0 - p) / samples),
        samples=samples,
    )


# ---------------------------------------------------------------------------
# iterated-quadrature oracle


def _chi2_scaled_params(weight: float, dof: int):
    """(alpha, c) with the weight*chi^2_dof density = c * x^alpha e^{-x/(2w)}."""
    alpha = dof / 2.0 - 1.0
    c = (2.0 * weight) ** (-dof / 2.0) / math.gamma(dof / 2.0)
    return alpha, c


def _quad_chain(weights, dof: int, X: float, n_cheb: int, n_gj: int):
    """Chebyshev coefficients of h_n on [0, X], where the density of the
    k-weight partial sum is x^{alpha_k} h_k(x).

    Each convolution step collapses to a Gauss-Jacobi quadrature after the
    substitution u = x t: the factor t^{alpha_k} (1-t)^{dof/2-1} is absorbed
    into the quadrature weight, so the endpoint singularities never meet a
    polynomial rule. h_{k+1} is then refit on a Chebyshev grid.
    """
    beta = dof / 2.0 - 1.0
    # Chebyshev sample points on [0, X]
    k = np.arange(n_cheb + 1)
    xs = (X / 2.0) * (1.0 + np.cos(np.pi * k / n_cheb))
    _, c1 = _chi2_scaled_params(weights[0], dof)
    alpha = dof / 2.0 - 1.0
    h_vals = c1 * np.exp(-xs / (2.0 * weights[0]))
    coeffs = _chebfit_clenshaw(xs, h_vals, X, n_cheb)
    for w_next in weights[1:]:
        nodes, gj_w = roots_jacobi(n_gj, beta, alpha)
        ts = (nodes + 1.0) / 2.0
        scale = 2.0 ** (-(alpha + beta + 1.0))
        _, c_next = _chi2_scaled_params(w_next, dof)
        # evaluate h_k at all (x_i * t_j) in one chebval call
        args = np.outer(xs, ts)
        hk = _chebval_on(args, coeffs, X)
        expf = np.exp(-np.outer(xs, 1.0 - ts) / (2.0 * w_next))
        h_vals = c_next * scale * (hk * expf) @ gj_w
        alpha = alpha + beta + 1.0
        coeffs = _chebfit_clenshaw(xs, h_vals, X, n_cheb)
    return coeffs, alpha


def _chebfit_clenshaw(xs, vals, X: float, n_cheb: int):
    s = 2.0 * xs / X - 1.0
    return chebyshev.chebfit(s, vals, n_cheb)


def _chebval_on(x, coeffs, X: float):
    return chebyshev.chebval(2.0 * np.asarray(x) / X - 1.0, coeffs)


_QUAD_CACHE: dict = {}


def _quad_representation(weights: tuple, dof: int, X: float):
    """Adaptively refined Chebyshev representation for quad_convolve_density."""
    key = (weights, dof, round(X, 12))
    if key in _QUAD_CACHE:
        return _QUAD_CACHE[key]
    probe = np.linspace(X * 1e-3, X, 37)
    prev = None
    best = None
    best_diff = math.inf
    for n_cheb, n_gj in ((96, 96), (192, 192), (384, 384), (768, 768)):
        coeffs, alpha = _quad_chain(weights, dof, X, n_cheb, n_gj)
        vals = probe ** alpha * _chebval_on(probe, coeffs, X)
        if prev is not None:
            peak = float(np.max(np.abs(vals)))
            diff = float(np.max(np.abs(vals - prev))) / max(peak, 1e-300)
            if diff < best_diff:
                best_diff = diff
                best = (coeffs, alpha)
            if diff < 5e-13:
                break
        prev = vals
    else:
        if best_diff > 1e-9:
            raise QuadratureFailure(
                f"iterated quadrature stuck at relative {best_diff:.2e}"
            )
    if best is None:
        best = (coeffs, alpha)
    _QUAD_CACHE[key] = best
    return best


def quad_convolve_density(w, x, dof: int = 1) -> BigReal:
    """Brute-force density of sum_i w_i chi^2_dof at x by iterated quadrature.

    Intended for n <= 8 weights as an independent oracle: no pairing, no
    symbolic algebra, just n-1 numeric convolutions at float64 accuracy
    (~1e-13 relative to the peak). The representation is cached per weight
    list, so sweeping many x values costs one chain.
    """
    if isinstance(w, WeightList):
        weights = tuple(float(v) for v in w.weights)
        dof = w.dof
    else:
        weights = tuple(sorted(float(v) for v in w))
    if len(weights) > 8:
        raise DomainError("quadrature oracle supports at most 8 weights")
    if any(v <= 0 for v in weights):
        raise DomainError("weights must be positive")
    xf = float(x)
    if xf < 0:
        return BigReal(0, 64)
    if xf == 0:
        # alpha_n = n*dof/2 - 1: positive for every multi-weight case
        alpha_n = len(weights) * dof / 2.0 - 1.0
        if alpha_n > 0:
            return BigReal(0, 64)
        raise DomainError("density diverges at 0 for a single chi^2_1 weight")
    # power-of-two domain ladder so nearby queries share one cached chain
    X = 1.0
    while X < xf * 1.05:
        X *= 2.0
    coeffs, alpha = _quad_representation(weights, dof, X)
    val = xf ** alpha * float(_chebval_on(xf, coeffs, X))
    return BigReal(val, 64)
