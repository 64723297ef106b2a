"""Fluctuation probabilities for a random-landscape stability problem.

The smallest mass-matrix eigenvalue of the model splits into a sum term S
(a positive linear combination of N-1 iid chi^2_1 variables, weighted by
inverse Marchenko-Pastur quantiles) and an independent fluctuation term T
(a scaled chi^2_N plus a zero-mean normal, mean 1). This module provides:

* the Marchenko-Pastur density, its closed-form CDF, and the quantile
  weights a_b = 1/(N <lambda_b^2>);
* p_n: the certified probability P(S <= 1) as a bounded pair of logs;
* t_term_pdf: the closed-form density of T (gamma-normal convolution,
  expressed through Kummer functions);
* full_mass_tail: the uncertified sampled-convolution estimate of
  P(S >= T), i.e. the chance the full combination turns negative;
* fit: damped Gauss-Newton fits of log P against N for the two candidate
  laws, POWER (-c N^p) and LINLOG (log(a+N) - c - d N).

Monte Carlo cross-checks for the full-mass estimate live here as well; the
sum-only Monte Carlo oracle is `oracles.mc_tail`.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from functools import lru_cache

import gmpy2
import numpy as np
from gmpy2 import mpfr

from .certified_density import (
    DomainError,
    PrecisionExhausted,
    WeightList,
    build,
    cdf_bounds,
    numeric_convolve,
    pdf_bounds,
    simpson_prefix,
)
from .oracles import McEstimate
from .precision_math import _kummer_raw, as_mpfr, context


class NoConvergence(RuntimeError):
    """The damped Gauss-Newton fit did not converge within its budget."""


# ---------------------------------------------------------------------------
# Marchenko-Pastur weights


def mp_pdf(lam: float, N: int = 2) -> float:
    """Marchenko-Pastur density at lam for aspect-scaled variance 1/N.

    With the variance scaling sigma^2 = 1/N the support is (0, 4) and N
    drops out: f(lam) = sqrt(lam (4 - lam)) / (2 pi lam). The N argument is
    kept for signature symmetry with the quantile routine.
    """
    x = float(lam)
    if not 0.0 < x < 4.0:
        return 0.0
    return math.sqrt(x * (4.0 - x)) / (2.0 * math.pi * x)


def _mp_cdf_mpfr(x, bits: int = 96) -> mpfr:
    """Closed-form MP CDF: (2/pi) asin(sqrt(x)/2) + sqrt(x(4-x))/(2 pi)."""
    with context(bits):
        xv = as_mpfr(x, bits)
        if xv <= 0:
            return mpfr(0)
        if xv >= 4:
            return mpfr(1)
        pi = gmpy2.const_pi()
        return (2 / pi) * gmpy2.asin(gmpy2.sqrt(xv) / 2) + gmpy2.sqrt(
            xv * (4 - xv)
        ) / (2 * pi)


def mp_cdf(x: float) -> float:
    """P(lambda^2 <= x) under the Marchenko-Pastur law on (0, 4)."""
    return float(_mp_cdf_mpfr(x))


@dataclass(frozen=True)
class MpWeights:
    """Quantile eigenvalues and the derived summand weights for one N.

    lambdas[k] is the b'/N quantile of the MP law for b' = k+2, strictly
    increasing with the last entry pinned to the support edge 4; weights[k]
    is 1/(N lambdas[k]), strictly decreasing.
    """

    N: int
    lambdas: tuple
    weights: tuple

    def __post_init__(self):
        if self.N < 2:
            raise DomainError("need N >= 2")
        if len(self.lambdas) != self.N - 1 or len(self.weights) != self.N - 1:
            raise DomainError("expected N-1 quantiles and weights")
        prev = 0.0
        for lam in self.lambdas:
            if not prev < lam <= 4.0:
                raise DomainError("quantiles must increase within (0, 4]")
            prev = lam

    def weight_list(self) -> WeightList:
        return WeightList(self.weights, dof=1)


@lru_cache(maxsize=128)
def mp_quantile_weights(N: int) -> MpWeights:
    """Weights a_b = 1/(N <lambda_b^2>) with CDF(<lambda_b^2>) = b/N, b = 2..N.

    Bisection on [0, 4] at 96-bit arithmetic, 62 halvings (absolute interval
    width 2^-60); the b = N target is CDF = 1, met exactly at the support
    edge, so that quantile is pinned to 4 rather than searched.
    """
    n = int(N)
    if n < 2:
        raise DomainError("need N >= 2")
    lambdas = []
    with context(96):
        for b in range(2, n):
            target = mpfr(b) / n
            lo, hi = mpfr(0), mpfr(4)
            for _ in range(62):
                mid = (lo + hi) / 2
                if _mp_cdf_mpfr(mid) < target:
                    lo = mid
                else:
                    hi = mid
            lambdas.append(float((lo + hi) / 2))
    lambdas.append(4.0)
    weights = tuple(1.0 / (n * lam) for lam in lambdas)
    return MpWeights(N=n, lambdas=tuple(lambdas), weights=weights)


# ---------------------------------------------------------------------------
# certified sum-term probability


@dataclass(frozen=True)
class SweepRow:
    """One certified P(S <= 1) evaluation: log bounds, realized gap, time."""

    N: int
    log_p_lo: float
    log_p_hi: float
    rel_err: float
    seconds: float

    def __post_init__(self):
        if self.log_p_lo > self.log_p_hi:
            raise DomainError("lower log bound exceeds upper")


def p_n(
    N: int,
    R_max: float = 0.05,
    *,
    precision_bits: int = 256,
    grid_step: float | None = None,
) -> SweepRow:
    """Certified bounds on P(S <= 1) for the N-field weight profile.

    Builds the certified density of S = sum a_b X_b over [0, x_max] with
    x_max = max(1.5, min(2 mean, 4)), then reads the CDF bounds at t = 1.
    On PrecisionExhausted (or a vanishing lower bound) the build retries at
    doubled precision, at most twice. Logs are natural.
    """
    t0 = time.monotonic()
    wl = mp_quantile_weights(N).weight_list()
    bits = int(precision_bits)
    last_exc: Exception | None = None
    for _ in range(3):
        try:
            dens = build(
                wl, r_max=R_max, precision_bits=bits, grid_step=grid_step
            )
            lo, hi = cdf_bounds(dens, 1.0)
        except PrecisionExhausted as exc:
            last_exc = exc
            bits *= 2
            continue
        if not lo > type(lo)(0, lo.precision_bits):
            last_exc = PrecisionExhausted("lower CDF bound underflowed to 0")
            bits *= 2
            continue
        rel = float((hi - lo) / lo)
        # the logs stay certified: nudge each float conversion outward
        return SweepRow(
            N=int(N),
            log_p_lo=math.nextafter(float(lo.log()), -math.inf),
            log_p_hi=math.nextafter(float(hi.log()), math.inf),
            rel_err=rel,
            seconds=time.monotonic() - t0,
        )
    raise last_exc if last_exc is not None else PrecisionExhausted("p_n failed")


# ---------------------------------------------------------------------------
# fluctuation-term density


def _kummer_scaled(a, b, w, bits: int) -> mpfr:
    """e^{-w} 1F1(a; b; w) for w >= 0 without forming the e^w blowup.

    Ascending series (all terms positive for a, b > 0) below the switch
    point, large-argument expansion above it:
        e^{-w} 1F1(a;b;w) ~ Gamma(b)/Gamma(a) w^{a-b}
                            sum_k (b-a)_k (1-a)_k / (k! w^k),
    truncated at the smallest term. The dropped algebraic branch of the
    expansion is O(e^{-w}) relative, and the switch point keeps w large
    against both the precision and the Pochhammer scale (terms shrink by
    ~|(b-a)(1-a)|/w per step early on, so w must dominate that product or
    the expansion never settles).
    """
    with context(bits + 32):
        av = as_mpfr(a, bits + 32)
        bv = as_mpfr(b, bits + 32)
        wv = as_mpfr(w, bits + 32)
        gap = max(abs(float(bv - av)), abs(float(1 - av)), 1.0)
        if wv < max(128, 0.75 * bits, 8.0 * gap * gap):
            eps = mpfr(2) ** (-(bits + 16))
            val, _, _, _ = _kummer_raw(av, bv, wv, eps)
            return gmpy2.exp(-wv) * val
        term = mpfr(1)
        total = mpfr(1)
        eps = mpfr(2) ** (-(bits + 8))
        for k in range(4096):
            nxt = term * (bv - av + k) * (1 - av + k) / ((k + 1) * wv)
            if abs(nxt) >= abs(term) or abs(term) < eps * abs(total):
                break
            total += nxt
            term = nxt
        return gmpy2.gamma(bv) / gmpy2.gamma(av) * wv ** (av - bv) * total


def t_term_pdf(N: int, x: float, precision_bits: int = 192) -> float:
    """Density of the fluctuation term T at x (any real x).

    T is the sum of a Gamma(N/2, rate N/2) variable (the squared third
    derivative block, chi^2_N/N) and an independent Normal(0, (2/N)^2)
    (the fourth-derivative block); the convolution closes over Kummer
    functions:

        f(x) = 2^{-N/4-2} N e^{(1-Nx)/2} [ sqrt(2) K1 / Gamma((N+2)/4)
                                           + (Nx-2) K2 / Gamma(N/4) ],
        Ki = e^{-w} 1F1(.; .; w),  w = (Nx-2)^2 / 8,

    where the Gaussian prefactor and the Kummer growth have been combined
    exactly (e^{-N^2 x^2/8} e^w = e^{(1-Nx)/2}). For x below the gamma
    support the two bracket terms cancel to the normal tail; working
    precision is padded by ~1.44 w bits there to absorb it.
    """
    n = int(N)
    if n < 2:
        raise DomainError("need N >= 2")
    xf = float(x)
    bits = int(precision_bits)
    with context(bits):
        nx = n * as_mpfr(xf, bits)
        w = (nx - 2) ** 2 / 8
        if nx < 2:
            bits += int(1.45 * float(w)) + 32
            nx = n * as_mpfr(xf, bits)
            w = (nx - 2) ** 2 / 8
    with context(bits):
        a1 = mpfr(n) / 4
        a2 = mpfr(n + 2) / 4
        k1 = _kummer_scaled(a1, mpfr(1) / 2, w, bits)
        k2 = _kummer_scaled(a2, mpfr(3) / 2, w, bits)
        bracket = gmpy2.sqrt(mpfr(2)) * k1 / gmpy2.gamma(a2) + (nx - 2) * k2 / gmpy2.gamma(a1)
        val = mpfr(2) ** (-mpfr(n) / 4 - 2) * n * gmpy2.exp((1 - nx) / 2) * bracket
    return float(val)


# ---------------------------------------------------------------------------
# full-mass combination


@dataclass(frozen=True)
class FullMassEstimate:
    """Sampled-convolution estimate of P(S >= T); explicitly uncertified."""

    value: float
    note: str = "uncertified: sampled convolution, error heuristic"


def full_mass_tail(N: int, grid_step: float = 2e-3, r_max: float = 1e-3) -> FullMassEstimate:
    """Estimate P(S >= T), the chance the full combination turns negative.

    Shifts T to the nonnegative variable M - T (M a grid-aligned point
    beyond T's bulk), convolves the certified S-density midpoint with the
    sampled density of M - T, and integrates the result above M. The S
    grid runs to mean + 12 sd + 2 so the neglected S-tail (which would
    count fully toward the probability) is orders below the Monte Carlo
    resolution the estimate is checked against.
    """
    n = int(N)
    if n < 2:
        raise DomainError("need N >= 2")
    h = float(grid_step)
    if not (math.isfinite(h) and 0 < h <= 0.05):
        raise DomainError("grid_step must be in (0, 0.05]")

    mw = mp_quantile_weights(n)
    ws = np.array(mw.weights)
    mean_s = float(ws.sum())
    sd_s = float(math.sqrt(2.0 * float((ws**2).sum())))
    q_s = mean_s + 12.0 * sd_s + 2.0

    # M - T spans [0, L_t]: M covers T's upper bulk (gamma mean 1, sd
    # ~ sqrt(2/N)), the extra 20/N covers ten normal widths of T < 0.
    m_shift = h * math.ceil((1.5 + 10.0 * math.sqrt(2.0 / n) + 20.0 / n) / h)
    l_t = m_shift + 20.0 / n

    dens = build(mw.weight_list(), r_max=r_max, x_max=q_s, grid_step=h)
    n_s = int(math.ceil(q_s / h)) + 1
    n_t = int(math.ceil(l_t / h)) + 1
    total = n_s + n_t
    f_s = np.zeros(total)
    for i in range(n_s):
        lo, hi = pdf_bounds(dens, min(i * h, dens.x_max))
        f_s[i] = 0.5 * (float(lo) + float(hi))
    f_t = np.zeros(total)
    for i in range(n_t):
        f_t[i] = t_term_pdf(n, m_shift - i * h)

    w_density = numeric_convolve(f_s, f_t, h, normalize=True)
    prefix = simpson_prefix(w_density, h)
    idx_m = int(round(m_shift / h))
    return FullMassEstimate(value=float(max(prefix[-1] - prefix[idx_m], 0.0)))


_MC_CHUNK_SCALARS = 250_000


def mc_full_mass(N: int, samples: int, seed: int) -> McEstimate:
    """Monte Carlo estimate of P(S >= T) for cross-checking full_mass_tail.

    Chunked over Philox streams keyed (seed, chunk index) like
    oracles.mc_tail; each draw spends N-1 normals on S, N on the chi^2
    part of T, and one on its normal part.
    """
    n = int(N)
    if samples < 10_000:
        raise DomainError("need samples >= 10^4")
    ws = np.array(mp_quantile_weights(n).weights)
    chunk = max(1, _MC_CHUNK_SCALARS // (2 * n))
    hits = 0
    done = 0
    stream = 0
    while done < samples:
        take = min(chunk, samples - done)
        rng = np.random.Generator(np.random.Philox(key=[seed, stream]))
        z = rng.standard_normal((take, n - 1))
        s = (z * z) @ ws
        chi = rng.standard_normal((take, n))
        t = (chi * chi).sum(axis=1) / n + (2.0 / n) * rng.standard_normal(take)
        hits += int(np.count_nonzero(s >= t))
        done += take
        stream += 1
    p = hits / samples
    se = math.sqrt(max(p * (1.0 - p), 1.0 / samples) / samples)
    return McEstimate(value=p, std_error=se, samples=samples)


# ---------------------------------------------------------------------------
# parametric fits


@dataclass(frozen=True)
class FitResult:
    """Converged fit of log P against N for one of the two candidate laws."""

    model: str
    params: dict
    std_errors: dict
    residuals: tuple


def _power_model(theta, ns):
    c, p = theta
    yhat = -c * ns**p
    jac = np.column_stack([-(ns**p), -c * ns**p * np.log(ns)])
    return yhat, jac


def _linlog_model(theta, ns):
    a, c, d = theta
    yhat = np.log(a + ns) - c - d * ns
    jac = np.column_stack([1.0 / (a + ns), -np.ones_like(ns), -ns])
    return yhat, jac


def fit(rows, model: str) -> FitResult:
    """Least squares on log P midpoints: POWER -cN^p or LINLOG log(a+N)-c-dN.

    Gauss-Newton with Levenberg damping; a step is accepted only if it
    lowers the sum of squares, damping grows sevenfold on rejection and
    relaxes threefold on acceptance. Convergence is a proposed step of
    norm below 1e-10 on the parameter scale, accepted or not (a rejected
    negligible step means the optimum is already resolved to float
    precision); 10^4 iterations without one raises NoConvergence.
    Standard errors come from s^2 (J^T J)^{-1} at the optimum.
    """
    kind = model.upper()
    if kind == "POWER":
        names = ("c", "p")
        fn = _power_model
        min_rows = 3
    elif kind == "LINLOG":
        names = ("a", "c", "d")
        fn = _linlog_model
        min_rows = 4
    else:
        raise DomainError("model must be POWER or LINLOG")
    pts = [(float(r.N), 0.5 * (r.log_p_lo + r.log_p_hi)) for r in rows]
    if len(pts) < min_rows:
        raise DomainError(f"{kind} needs at least {min_rows} rows")
    ns = np.array([p[0] for p in pts])
    ys = np.array([p[1] for p in pts])

    if kind == "POWER":
        # log(-y) = log c + p log N seeds the nonlinear stage
        safe = np.log(np.maximum(-ys, 1e-300))
        coef = np.polyfit(np.log(ns), safe, 1)
        theta = np.array([math.exp(coef[1]), coef[0]])
    else:
        resp = ys - np.log(1.0 + ns)
        design = np.column_stack([-np.ones_like(ns), -ns])
        sol, *_ = np.linalg.lstsq(design, resp, rcond=None)
        theta = np.array([1.0, sol[0], sol[1]])

    def ssr_of(th):
        if kind == "LINLOG" and th[0] + ns.min() <= 0:
            return math.inf, None, None
        yhat, jac = fn(th, ns)
        res = ys - yhat
        return float(res @ res), res, jac

    ssr, res, jac = ssr_of(theta)
    lam = 1e-3
    for _ in range(10_000):
        grad = jac.T @ res
        hess = jac.T @ jac
        try:
            step = np.linalg.solve(hess + lam * np.eye(len(theta)), grad)
        except np.linalg.LinAlgError:
            lam *= 7.0
            continue
        trial = theta + step
        step_small = float(np.linalg.norm(step)) < 1e-10 * max(
            1.0, float(np.linalg.norm(theta))
        )
        ssr_new, res_new, jac_new = ssr_of(trial)
        if ssr_new < ssr:
            theta, ssr, res, jac = trial, ssr_new, res_new, jac_new
            lam = max(lam / 3.0, 1e-12)
        else:
            lam *= 7.0
        if step_small:
            # no improvement is possible at float resolution; a rejected
            # negligible step means the current theta already is the optimum
            break
    else:
        raise NoConvergence(f"{kind} fit did not converge in 10^4 iterations")

    dof_resid = max(len(ns) - len(theta), 1)
    s2 = ssr / dof_resid
    cov = s2 * np.linalg.inv(jac.T @ jac)
    std = np.sqrt(np.maximum(np.diag(cov), 0.0))
    return FitResult(
        model=kind,
        params={k: float(v) for k, v in zip(names, theta)},
        std_errors={k: float(v) for k, v in zip(names, std)},
        residuals=tuple(float(v) for v in res),
    )


def linlog_crossing(d: float, log10_p: float = -500.0) -> float:
    """N where the LINLOG exponent law reaches P = 10^{log10_p}.

    Solves log N - d N = log10_p * log 10 by fixed-point iteration; with
    the fitted decay rate d this is the field count beyond which the
    model pushes the fluctuation probability under the target.
    """
    if not d > 0:
        raise DomainError("need a positive decay rate d")
    target = -log10_p * math.log(10.0)
    n = target / d
    for _ in range(100):
        n = (target + math.log(n)) / d
    return n
