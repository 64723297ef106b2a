"""Certified two-sided density envelopes for positive chi-square combinations.

Given weights w_1..w_n > 0 and an odd dof r, the density of
Z = sum_i w_i X_i (X_i ~ chi^2_r independent) is computed by:

1. sorting the weights and pairing neighbours; each pair (a, b) with a < b
   contributes the exact closed-form factor
       f_pair(z) = C(a,b,r) z^nu e^{rate z} I_nu(scale z),
   nu = (r-1)/2, rate = -(a+b)/(4ab), scale = (b-a)/(4ab),
   C = nu!/(r-1)! (4ab)^{-r/2} ((b-a)/(8ab))^{-nu};
   a pair of exactly equal weights degenerates to a Gamma(r, 1/(2a)) factor,
   which is already a single term of the algebra;
2. truncating each factor's Bessel series at an order m chosen so the
   Lagrange remainder envelope stays within a per-pair share of the target
   relative budget: with u = scale*x_max,
       lower_pair = C z^nu e^{rate z} T_m(scale z),
       upper_pair = lower_pair + C s^{m+1}/(m+1)! I_nu^{(m+1)}(u) z^{nu+m+1} e^{rate z},
   and the pointwise ratio (upper-lower)/lower on [0, x_max] is at most
       kappa(m) = u^{m+1}/(m+1)! * I_nu^{(m+1)}(u) / T_m(u)
   because u^{m+1}/T_m(u) is nondecreasing (term-by-term u T_m' <= m T_m);
3. convolving all lower factors and all upper factors exactly in the
   exponential-polynomial algebra. Convolution preserves pointwise order for
   nonnegative factors, so lower <= f_Z <= upper everywhere on [0, x_max],
   and the realized gap satisfies prod(1+kappa_i) - 1 <= e^{R_max} - 1.

kappa(m) <= budget also implies the eta-weighted L1 acceptance test of
select_order at the same budget (integrate the pointwise inequality), so
plans built here always satisfy that invariant as well.

An odd weight count leaves one weight over: its chi-square density is not an
exponential polynomial (x^{-1/2} factor for r = 1), so that last convolution
runs on a sampled grid with exact kernel moments over the singular head and
a Simpson rule beyond it. Those rows are widened by a per-row relative
allowance for the discretization error, combining a base calibrated against
closed-form cases with a slope term ~ (step * local log-slope)^3, and the
default step is refined until the modelled allowance fits inside r_max.
The allowance carries an order-of-magnitude safety factor but is an
empirical model, not a proof; bounds are exact-arithmetic certificates only
in the symbolic even-count path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import gmpy2
import numpy as np
from gmpy2 import mpfr

from .exp_poly import EqualRates, ExpPolySum, Term
from .precision_math import (
    DEFAULT_PRECISION_BITS,
    BigReal,
    NonConvergence,
    _bessel_i_derivative_raw,
    _bessel_i_raw,
    _bessel_taylor_fraction,
    _poly_exp_integral_raw,
    as_mpfr,
    context,
    gauss_legendre_rule,
)


class BuildError(RuntimeError):
    """The certified build could not be completed as requested."""


class BudgetUnreachable(BuildError):
    """No truncation order within the cap meets the per-pair budget."""


class PrecisionExhausted(BuildError):
    """Accumulated arithmetic slack swamps the requested certificate."""


class GridMismatch(ValueError):
    """Sampled-grid operands disagree in length or step."""


class DomainError(ValueError):
    """A query lies outside the domain the certificate covers."""


DEFAULT_GRID_STEP = 1e-3
DEFAULT_MAX_ORDER = 4096


@dataclass(frozen=True)
class WeightList:
    """Validated, ascending weight multiset with a common dof."""

    weights: tuple
    dof: int = 1

    def __post_init__(self):
        if self.dof < 1 or self.dof % 2 == 0:
            raise DomainError("dof must be a positive odd integer")
        if len(self.weights) == 0:
            raise DomainError("need at least one weight")
        vals = []
        for w in self.weights:
            f = float(w)
            if not math.isfinite(f) or f <= 0:
                raise DomainError(f"weights must be positive and finite, got {w}")
            vals.append(w)
        vals.sort(key=float)
        object.__setattr__(self, "weights", tuple(vals))

    @property
    def mean(self) -> float:
        """Mean of the combination: dof * sum of weights."""
        return self.dof * sum(float(w) for w in self.weights)

    def __len__(self):
        return len(self.weights)


@dataclass(frozen=True)
class PairSpec:
    """One Bessel pair factor: weights a < b and derived parameters."""

    a: BigReal
    b: BigReal
    nu: int
    rate: BigReal
    scale: BigReal

    @property
    def dof(self) -> int:
        return 2 * self.nu + 1


@dataclass(frozen=True)
class GammaFactor:
    """A Gamma(shape, beta) factor from exactly equal paired weights."""

    beta: BigReal
    shape: int

    @property
    def rate(self) -> BigReal:
        return -self.beta


@dataclass(frozen=True)
class OrderPlan:
    """Selected truncation orders and budget bookkeeping for one build."""

    pairs: tuple
    orders: tuple
    kappas: tuple
    gammas: tuple
    leftover_weight: float | None
    budget_per_pair: float
    x_max: float
    r_max: float
    precision_bits: int


class CertifiedDensity:
    """Result of build(): envelopes plus everything needed to query them."""

    def __init__(
        self,
        *,
        weights: WeightList,
        plan: OrderPlan,
        lower: ExpPolySum,
        upper: ExpPolySum,
        slack: BigReal,
        jitter_rel: float,
        grid_step: float,
    ):
        self.weights = weights
        self.plan = plan
        self.lower = lower
        self.upper = upper
        self.slack = slack
        self.jitter_rel = jitter_rel
        self.grid_step = grid_step
        self._grids: dict = {}

    @property
    def x_max(self) -> float:
        return self.plan.x_max

    @property
    def r_max(self) -> float:
        return self.plan.r_max

    @property
    def precision_bits(self) -> int:
        return self.plan.precision_bits

    @property
    def leftover_weight(self) -> float | None:
        return self.plan.leftover_weight

    @property
    def is_symbolic(self) -> bool:
        """True when no leftover weight forces the sampled-grid path."""
        return self.plan.leftover_weight is None

    def pdf_bounds(self, x):
        return pdf_bounds(self, x)

    def cdf_bounds(self, t):
        return cdf_bounds(self, t)

    def to_json_dict(self) -> dict:
        return {
            "x_max": self.plan.x_max,
            "r_max": self.plan.r_max,
            "precision_bits": self.plan.precision_bits,
            "dof": self.weights.dof,
            "orders": list(self.plan.orders),
            "leftover_weight": self.plan.leftover_weight,
            "slack": self.slack.to_decimal(),
            "jitter_rel": self.jitter_rel,
            "lower": self.lower.to_json_dict(),
            "upper": self.upper.to_json_dict(),
        }


# ---------------------------------------------------------------------------
# pairing


def pair_weights(weights) -> tuple[list, float | None]:
    """Sort weights ascending and pair neighbours positionally.

    Returns (pairs, leftover): pairs is a list of (small, large) tuples in
    the original value type; leftover is the largest weight when the count is
    odd, else None. Exactly equal values inside a pair are legitimate (they
    merge into a Gamma factor downstream); equality across different pairs is
    handled by the build's collision logic.
    """
    ws = sorted(weights, key=float)
    if len(ws) == 0:
        raise DomainError("need at least one weight")
    leftover = None
    if len(ws) % 2:
        leftover = ws.pop()
    pairs = [(ws[2 * i], ws[2 * i + 1]) for i in range(len(ws) // 2)]
    return pairs, leftover


def _pair_params_raw(a: mpfr, b: mpfr, dof: int):
    """(nu, rate, scale, C) under the ambient context; requires a < b."""
    nu = (dof - 1) // 2
    four_ab = 4 * a * b
    rate = -(a + b) / four_ab
    scale = (b - a) / four_ab
    c0 = mpfr(math.factorial(nu)) / math.factorial(dof - 1)
    const = c0 * four_ab ** (mpfr(-dof) / 2) * ((b - a) / (8 * a * b)) ** (-nu)
    return nu, rate, scale, const


@lru_cache(maxsize=None)
def _pair_normalization_selfcheck(dof: int) -> bool:
    """One-time per-dof sanity check that the pair closed form has mass 1.

    Integrates the (a,b) = (1,2) pair density term by term through the
    Laplace series sum_j t_{nu+2j} s^{nu+2j} (2nu+2j)!/p^{2nu+2j+1}; the
    ratio test gives geometric convergence at ((b-a)/(a+b))^2 = 1/9.
    """
    bits = 192
    with context(bits):
        a, b = mpfr(1), mpfr(2)
        nu, rate, scale, const = _pair_params_raw(a, b, dof)
        p = -rate
        total = mpfr(0)
        j = 0
        while True:
            k = nu + 2 * j
            t_k = _bessel_taylor_fraction(nu, k)
            term = (
                mpfr(gmpy2.mpq(t_k.numerator, t_k.denominator))
                * scale ** k
                * mpfr(math.factorial(nu + k))
                / p ** (nu + k + 1)
            )
            total += term
            if j > 4 and term < abs(total) * mpfr(2) ** (-bits):
                break
            j += 1
            if j > 10000:
                raise BuildError("pair normalization series stalled")
        mass = const * total
        if abs(mass - 1) > mpfr(2) ** (-80):
            raise BuildError(
                f"pair density normalization failed for dof={dof}: mass={float(mass)}"
            )
    return True


def pair_density_exact(a, b, x, dof: int = 1, precision_bits: int = DEFAULT_PRECISION_BITS) -> BigReal:
    """Exact density of a X + b Y (X, Y ~ chi^2_dof, 0 < a < b) at x >= 0.

    Closed form C x^nu e^{rate x} I_nu(scale x); see the module docstring.
    """
    if dof < 1 or dof % 2 == 0:
        raise DomainError("dof must be a positive odd integer")
    _pair_normalization_selfcheck(dof)
    with context(precision_bits + 16):
        av = as_mpfr(a, precision_bits + 16)
        bv = as_mpfr(b, precision_bits + 16)
        xv = as_mpfr(x, precision_bits + 16)
        if not 0 < av < bv:
            raise DomainError("need 0 < a < b (equal weights form a Gamma factor)")
        if xv < 0:
            return BigReal(0, precision_bits)
        nu, rate, scale, const = _pair_params_raw(av, bv, dof)
        eps = mpfr(2) ** (-(precision_bits + 8))
        bess, _, _ = _bessel_i_raw(nu, scale * xv, eps)
        value = const * xv ** nu * gmpy2.exp(rate * xv) * bess
    return BigReal(value, precision_bits)


# ---------------------------------------------------------------------------
# order selection


def _bessel_i_float(nu: int, u: float) -> float:
    term = (u / 2) ** nu / math.factorial(nu)
    acc = term
    j = 0
    q = (u / 2) ** 2
    while True:
        j += 1
        term *= q / (j * (nu + j))
        acc += term
        if term < 1e-18 * acc or j > 100000:
            return acc


def _kappa(nu: int, m: int, u: mpfr, table: dict, bits: int) -> mpfr:
    """Upper-safe pointwise ratio bound kappa(m) at u = scale*x_max.

    table caches I_mu(u) series results (value, tail) per order mu. The
    numerator derivative gets the series tails added, the denominator
    truncation T_m gets a one-ulp-scale shave, so the returned kappa is >=
    the true ratio.
    """
    eps = mpfr(2) ** (-(bits + 8))
    deriv = mpfr(0)
    for j in range(m + 2):
        mu = abs(nu - (m + 1) + 2 * j)
        if mu not in table:
            v, _, tail = _bessel_i_raw(mu, u, eps)
            table[mu] = v + tail  # upper-safe
        deriv += math.comb(m + 1, j) * table[mu]
    deriv = deriv * mpfr(2) ** (-(m + 1))
    t_m = mpfr(0)
    for k in range(nu, m + 1, 2):
        fr = _bessel_taylor_fraction(nu, k)
        t_m += mpfr(gmpy2.mpq(fr.numerator, fr.denominator)) * u ** k
    if t_m <= 0:
        return mpfr("inf")
    lagrange = u ** (m + 1) / math.factorial(m + 1) * deriv
    return (lagrange / t_m) * (1 + mpfr(2) ** (-(bits - 8)))


def _select_order_pointwise(
    nu: int, scale_x_max: float, budget: float, max_order: int
) -> tuple[int, float]:
    """Smallest truncation order (stepping by 2 from nu) with kappa <= budget.

    A float scan positions the first candidate; exact 160-bit evaluations
    then certify and minimize. Returns (m, kappa(m) as float).
    """
    u_f = float(scale_x_max)
    bits = 160
    with context(bits + 16):
        u = mpfr(scale_x_max)
        # float positioning: kappa <= u^{m+1}/(m+1)! * I_0(u)/I_nu-ish
        if u_f > 0:
            log_i0 = math.log(_bessel_i_float(0, u_f)) if u_f < 600 else u_f - 0.5 * math.log(2 * math.pi * u_f)
            log_inu = math.log(_bessel_i_float(nu, u_f)) if u_f < 600 else log_i0
            m = nu
            while m <= max_order:
                log_est = (
                    (m + 1) * math.log(u_f)
                    - math.lgamma(m + 2)
                    + log_i0
                    - log_inu
                )
                if log_est <= math.log(budget) - 1.5:
                    break
                m += 2
        else:
            return nu, 0.0
        table: dict = {}
        kb = mpfr(budget)
        k_val = _kappa(nu, m, u, table, bits)
        while k_val > kb:
            m += 2
            if m > max_order:
                raise BudgetUnreachable(
                    f"no order <= {max_order} meets per-pair budget {budget}"
                )
            k_val = _kappa(nu, m, u, table, bits)
        while m - 2 >= nu:
            k_prev = _kappa(nu, m - 2, u, table, bits)
            if k_prev <= kb:
                m, k_val = m - 2, k_prev
            else:
                break
        return m, float(k_val)


def select_order(
    pair: PairSpec,
    x_max,
    budget: float,
    precision_bits: int = DEFAULT_PRECISION_BITS,
    max_order: int = DEFAULT_MAX_ORDER,
) -> int:
    """Smallest even-step truncation order passing the weighted-mass test.

    The test keeps at least a (1 - budget) fraction of the exponentially
    weighted mass of the Bessel factor on [0, x_max]:

        integral_0^xmax e^{rate y} T_m(scale y) dy
            >= (1 - budget) integral_0^xmax e^{rate y} I_nu(scale y) dy.

    The left side is exact (term-by-term polynomial-exponential integrals);
    the right side is Gauss-Legendre, refined until two node counts agree to
    2^{-precision_bits/4} relatively. This is the contract-level test; the
    build itself uses the stronger pointwise kappa criterion, which implies
    this one at equal budget.
    """
    if not 0 < budget < 1:
        raise DomainError("budget must be in (0, 1)")
    bits = precision_bits
    with context(bits + 16):
        xm = as_mpfr(x_max, bits + 16)
        rate = as_mpfr(pair.rate, bits + 16)
        scale = as_mpfr(pair.scale, bits + 16)
        nu = pair.nu
        eps = mpfr(2) ** (-(bits + 8))

        def integrand(y):
            v, _, _ = _bessel_i_raw(nu, scale * y, eps)
            return gmpy2.exp(rate * y) * v

        tol = mpfr(2) ** (-max(16, bits // 4))
        right_prev = None
        for n_nodes in (32, 64, 128, 256, 512):
            nodes, wts = gauss_legendre_rule(n_nodes, bits + 16)
            acc = mpfr(0)
            halfw = xm / 2
            for nd, w in zip(nodes, wts):
                y = halfw * (nd.value + 1)
                acc += w.value * integrand(y)
            right = acc * halfw
            if right_prev is not None and abs(right - right_prev) <= tol * abs(right):
                break
            right_prev = right
        else:
            raise NonConvergence("weighted-mass integral did not stabilize")

        target = (1 - mpfr(budget)) * right
        left = mpfr(0)
        m = nu
        while m <= max_order:
            for k in (m, m - 1) if m > nu else (m,):
                fr = _bessel_taylor_fraction(nu, k)
                if fr:
                    left += (
                        mpfr(gmpy2.mpq(fr.numerator, fr.denominator))
                        * scale ** k
                        * _poly_exp_integral_raw(k, rate, xm, bits + 16)
                    )
            if left >= target:
                return m
            m += 2
    raise BudgetUnreachable(f"no order <= {max_order} meets L1 budget {budget}")


# ---------------------------------------------------------------------------
# build


def _factorize(weights_mpfr: list, dof: int):
    """Positional pairing into PairSpec / GammaFactor lists plus leftover."""
    leftover = None
    ws = list(weights_mpfr)
    if len(ws) % 2:
        leftover = ws.pop()
    pairs = []
    gammas: dict = {}
    for i in range(len(ws) // 2):
        a, b = ws[2 * i], ws[2 * i + 1]
        if a == b:
            beta = 1 / (2 * a)
            gammas[beta] = gammas.get(beta, 0) + dof
        else:
            pairs.append((a, b))
    return pairs, gammas, leftover


def build(
    weights,
    dof: int = 1,
    *,
    r_max: float = 1e-6,
    x_max: float | None = None,
    precision_bits: int = DEFAULT_PRECISION_BITS,
    grid_step: float | None = None,
    max_order: int = DEFAULT_MAX_ORDER,
) -> CertifiedDensity:
    """Build certified density envelopes for sum_i w_i chi^2_dof.

    x_max defaults to max(1.5, min(2 * mean, 4.0)); queries beyond x_max are
    refused rather than extrapolated. r_max in (0, 1) is the total relative
    envelope budget, split evenly across Bessel pairs. Exactly colliding
    rates between distinct factors are separated by a relative jitter of
    2^{-precision_bits/8} (at most 3 attempts), recorded multiplicatively in
    the returned bounds via jitter_rel.

    grid_step controls the sampled path used when an unpaired half-integer
    factor remains. By default it is halved from 1e-3 until the modelled
    discretization allowance fits inside 2 percent of r_max (floor 1e-5;
    below that BudgetUnreachable is raised, which in practice means r_max
    under about 1e-7 with an odd summand count). Passing an explicit value
    skips that fitting and makes the caller responsible for the tradeoff:
    the per-row allowance is still applied, so coarse grids yield honest
    but wider bounds.
    """
    if isinstance(weights, WeightList):
        wl = weights
    else:
        wl = WeightList(tuple(weights), dof)
    dof = wl.dof
    if not 0 < r_max < 1:
        raise DomainError("r_max must be in (0, 1)")
    if x_max is None:
        x_max = max(1.5, min(2.0 * wl.mean, 4.0))
    x_max = float(x_max)
    if not (math.isfinite(x_max) and x_max > 0):
        raise DomainError("x_max must be positive and finite")
    bits = int(precision_bits)

    _pair_normalization_selfcheck(dof)

    jitter_rel_total = 0.0
    eps_jitter = 2.0 ** (-max(bits // 8, 16))
    collision_gap = mpfr(2) ** (-max(bits // 4, 24))

    with context(bits):
        ws = [as_mpfr(w, bits) for w in wl.weights]
        for attempt in range(4):
            ws.sort()
            pairs_raw, gammas_raw, leftover = _factorize(ws, dof)
            rates = []
            for a, b in pairs_raw:
                _, rate, _, _ = _pair_params_raw(a, b, dof)
                rates.append(rate)
            for beta in gammas_raw:
                rates.append(-beta)
            # find a colliding factor (relative rate separation below threshold)
            collision = None
            for i in range(len(rates)):
                for j in range(i + 1, len(rates)):
                    sep = abs(rates[i] - rates[j]) / max(abs(rates[i]), abs(rates[j]))
                    if sep < collision_gap:
                        collision = j
                        break
                if collision is not None:
                    break
            if collision is None:
                break
            if attempt == 3:
                raise EqualRates(
                    "rate collision persists after 3 jitter attempts; "
                    "weights are too degenerate for the symbolic algebra"
                )
            # scale both weights of the later colliding factor by (1 + eps)
            n_pair_factors = len(pairs_raw)
            factor = 1 + mpfr(eps_jitter)
            if collision < n_pair_factors:
                a, b = pairs_raw[collision]
                targets = {id(a), id(b)}
                ws = [w * factor if id(w) in targets else w for w in ws]
                bad_rate = rates[collision]
            else:
                beta = list(gammas_raw)[collision - n_pair_factors]
                # scale every weight that generated this gamma rate
                ws = [
                    w * factor if 1 / (2 * w) == beta else w for w in ws
                ]
                bad_rate = -beta
            jitter_rel_total += eps_jitter * x_max * abs(float(bad_rate))

        pairs = []
        for a, b in pairs_raw:
            nu, rate, scale, _ = _pair_params_raw(a, b, dof)
            pairs.append(
                PairSpec(
                    a=BigReal(a, bits),
                    b=BigReal(b, bits),
                    nu=nu,
                    rate=BigReal(rate, bits),
                    scale=BigReal(scale, bits),
                )
            )
        gammas = tuple(
            GammaFactor(beta=BigReal(beta, bits), shape=shape)
            for beta, shape in gammas_raw.items()
        )

    n_pairs = len(pairs)
    budget = r_max / n_pairs if n_pairs else r_max

    orders = []
    kappas = []
    for p in pairs:
        u_max = float(p.scale) * x_max
        m, kap = _select_order_pointwise(p.nu, u_max, budget, max_order)
        orders.append(m)
        kappas.append(kap)

    lower, upper, slack = _assemble(pairs, orders, gammas, x_max, bits)

    if grid_step is not None:
        step = float(grid_step)
        if not (math.isfinite(step) and 0 < step <= x_max / 8):
            raise DomainError("grid_step must be positive and well below x_max")
    else:
        step = DEFAULT_GRID_STEP
        if leftover is not None and pairs:
            lam_hat = 1.5 * _tilt_log_slope(wl.weights, dof, x_max / 4) + 2.0
            while _pad_model(step, lam_hat) > 0.02 * r_max:
                step /= 2.0
                if step < 1e-5:
                    raise BudgetUnreachable(
                        "the sampled path for an odd summand count cannot "
                        "certify r_max this small; use an even count or "
                        "relax r_max to 1e-6 or above"
                    )

    plan = OrderPlan(
        pairs=tuple(pairs),
        orders=tuple(orders),
        kappas=tuple(kappas),
        gammas=gammas,
        leftover_weight=None if leftover is None else float(leftover),
        budget_per_pair=budget,
        x_max=x_max,
        r_max=r_max,
        precision_bits=bits,
    )
    return CertifiedDensity(
        weights=wl,
        plan=plan,
        lower=lower,
        upper=upper,
        slack=slack,
        jitter_rel=jitter_rel_total,
        grid_step=step,
    )


def _assemble(pairs, orders, gammas, x_max: float, bits: int):
    """Convolve all factor envelopes; returns (lower, upper, slack)."""
    lower_factors = []
    upper_factors = []
    with context(bits + 16):
        for p, m in zip(pairs, orders):
            a = as_mpfr(p.a, bits + 16)
            b = as_mpfr(p.b, bits + 16)
            nu, rate, scale, const = _pair_params_raw(a, b, p.dof)
            low_terms = []
            for k in range(nu, m + 1, 2):
                fr = _bessel_taylor_fraction(nu, k)
                coeff = const * mpfr(gmpy2.mpq(fr.numerator, fr.denominator)) * scale ** k
                low_terms.append((BigReal(coeff, bits), BigReal(rate, bits), nu + k))
            eps = mpfr(2) ** (-(bits + 8))
            deriv, tail = _bessel_i_derivative_raw(nu, m + 1, scale * mpfr(x_max), eps)
            env = (
                const
                * scale ** (m + 1)
                / math.factorial(m + 1)
                * (deriv + tail)
                * (1 + mpfr(2) ** (-(bits - 8)))
            )
            up_terms = list(low_terms)
            up_terms.append((BigReal(env, bits), BigReal(rate, bits), nu + m + 1))
            lower_factors.append(ExpPolySum(low_terms, bits))
            upper_factors.append(ExpPolySum(up_terms, bits))
        for g in gammas:
            beta = as_mpfr(g.beta, bits + 16)
            coeff = beta ** g.shape / math.factorial(g.shape - 1)
            term = [(BigReal(coeff, bits), BigReal(-beta, bits), g.shape - 1)]
            lower_factors.append(ExpPolySum(term, bits))
            upper_factors.append(ExpPolySum(term, bits))

    if not lower_factors:
        empty = ExpPolySum((), bits)
        return empty, empty, BigReal(0, bits)

    slack_acc = BigReal(0, bits)

    def fold(factors):
        nonlocal slack_acc
        acc = factors[0]
        for f in factors[1:]:
            acc = acc.convolve(f)
            acc, dropped = acc.prune(x_max)
            slack_acc = slack_acc + dropped
        return acc

    lower = fold(lower_factors)
    upper = fold(upper_factors)

    # Rounding pad: the envelope arithmetic is floating point; bound the
    # accumulated error by the no-cancellation magnitude times 2^{-(bits-17)}.
    pad = (lower.abs_bound(x_max) + upper.abs_bound(x_max)) * BigReal(2, bits) ** (
        -(bits - 17)
    )
    slack_acc = slack_acc + pad
    return lower, upper, slack_acc


# ---------------------------------------------------------------------------
# sampled-grid machinery (odd weight counts)


def numeric_convolve(f_vals, g_vals, step: float, normalize: bool = True) -> np.ndarray:
    """Simpson-weighted discrete convolution of two sampled densities.

    f_vals and g_vals sample f and g on the same uniform grid {0, h, 2h, ...};
    the result samples (f * g) on that grid (index j integrates over [0, jh]
    with composite Simpson, switching to a 3/8 head for odd j and a trapezoid
    at j = 1). With normalize=True the output is rescaled so its Simpson mass
    equals the product of the input Simpson masses, compensating truncated
    tails; pass False when the inputs are envelope samples whose scale must
    be preserved.
    """
    f = np.asarray(f_vals, dtype=float)
    g = np.asarray(g_vals, dtype=float)
    if f.ndim != 1 or g.ndim != 1:
        raise GridMismatch("inputs must be one-dimensional")
    if f.shape != g.shape:
        raise GridMismatch(f"grid lengths differ: {f.shape[0]} vs {g.shape[0]}")
    n = f.shape[0]
    if n < 5:
        raise GridMismatch("need at least 5 grid points")
    if not (math.isfinite(step) and step > 0):
        raise GridMismatch("step must be positive and finite")
    if not (np.isfinite(f).all() and np.isfinite(g).all()):
        raise GridMismatch("inputs must be finite")
    h = float(step)

    # S2[J] = sum_k (-1)^k f_k g_{J-k}: alternate exactly one input
    alt = np.ones(n)
    alt[1::2] = -1.0
    s1 = np.convolve(f, g)[:n]
    s2 = np.convolve(f * alt, g)[:n]
    f3 = f[3:]
    s1s = np.convolve(f3, g)[: max(n - 3, 0)]
    s2s = np.convolve(f3 * alt[: n - 3], g)[: max(n - 3, 0)]

    out = np.zeros(n)
    j_even = np.arange(2, n, 2)
    out[j_even] = (h / 3) * (
        3 * s1[j_even] - s2[j_even] - f[0] * g[j_even] - f[j_even] * g[0]
    )
    j_odd = np.arange(3, n, 2)
    head = (3 * h / 8) * (
        f[0] * g[j_odd] + 3 * f[1] * g[j_odd - 1] + 3 * f[2] * g[j_odd - 2] + f[3] * g[j_odd - 3]
    )
    jj = j_odd - 3
    comp = (h / 3) * (3 * s1s[jj] - s2s[jj] - f3[0] * g[jj] - f[j_odd] * g[0])
    comp[jj == 0] = 0.0
    out[j_odd] = head + comp
    # j = 1: integrate the product of the quadratics through the first three
    # samples of each factor (3-point Gauss rule is exact for the quartic);
    # O(h^3) relative where a plain trapezoid would be O(h^2).
    def _quad_head(v, t):
        return v[0] + t * (v[1] - v[0]) + 0.5 * t * (t - 1.0) * (v[2] - 2.0 * v[1] + v[0])

    r15 = math.sqrt(0.15)
    out[1] = h * sum(
        w * _quad_head(f, t) * _quad_head(g, 1.0 - t)
        for w, t in ((5 / 18, 0.5 - r15), (8 / 18, 0.5), (5 / 18, 0.5 + r15))
    )
    out[0] = 0.0

    if normalize:
        mass_f = simpson_mass(f, h)
        mass_g = simpson_mass(g, h)
        mass_out = simpson_mass(out, h)
        if mass_out <= 0:
            raise GridMismatch("convolution mass is nonpositive; cannot normalize")
        out *= mass_f * mass_g / mass_out
    return out


def simpson_prefix(vals: np.ndarray, step: float) -> np.ndarray:
    """Prefix integrals F[i] = integral_0^{i h} by composite Simpson.

    Even indices use plain composite Simpson; odd i >= 3 add a 3/8 tail to
    the prefix at i-3; i = 1 integrates the quadratic through the first three
    samples over the first cell (h/12 * (5 v0 + 8 v1 - v2)).
    """
    v = np.asarray(vals, dtype=float)
    n = v.shape[0]
    h = float(step)
    out = np.zeros(n)
    if n >= 3:
        pair = (h / 3) * (v[0:-2:2] + 4 * v[1:-1:2] + v[2::2])
        out[2::2] = np.cumsum(pair)
    if n >= 2:
        out[1] = (h / 12) * (5 * v[0] + 8 * v[1] - v[2]) if n >= 3 else (h / 2) * (v[0] + v[1])
    idx = np.arange(3, n, 2)
    if idx.size:
        out[idx] = out[idx - 3] + (3 * h / 8) * (
            v[idx - 3] + 3 * v[idx - 2] + 3 * v[idx - 1] + v[idx]
        )
    return out


def simpson_mass(vals: np.ndarray, step: float) -> float:
    """Total integral of a sampled function by the prefix scheme above."""
    v = np.asarray(vals, dtype=float)
    return float(simpson_prefix(v, step)[-1])


_HEAD_CELLS = 32  # grid cells handled by product integration in _product_convolve


def _chi2_pdf_moments(weight: float, dof: int, lo: float, hi: float, count: int):
    """Moments integral_lo^hi u^q g(u) du, q < count, g = weight*chi^2_dof pdf.

    Each moment is a difference of upper incomplete gamma values at
    half-integer order (computed at 160 bits), so the u^{r/2-1} singularity
    at 0 costs nothing.
    """
    with context(160):
        theta = 2 * mpfr(weight)
        out = []
        for q in range(count):
            s = q + mpfr(dof) / 2
            val = (
                theta ** q
                * (gmpy2.gamma_inc(s, mpfr(lo) / theta) - gmpy2.gamma_inc(s, mpfr(hi) / theta))
                / gmpy2.gamma(mpfr(dof) / 2)
            )
            out.append(float(val))
    return out


def _chi2_cdf_value(weight: float, dof: int, u: float) -> float:
    """P(weight * chi^2_dof <= u) at 160 bits, returned as float."""
    if u <= 0:
        return 0.0
    with context(160):
        s = mpfr(dof) / 2
        gam = gmpy2.gamma(s)
        return float((gam - gmpy2.gamma_inc(s, mpfr(u) / (2 * mpfr(weight)))) / gam)


def _chi2_cdf_moments(weight: float, dof: int, lo: float, hi: float, count: int):
    """Moments integral_lo^hi u^q G(u) du for the weight*chi^2_dof CDF G.

    By parts: (q+1) integral u^q G = [u^{q+1} G] - integral u^{q+1} g, so
    everything reduces to CDF endpoint values plus pdf moments.
    """
    pdf_m = _chi2_pdf_moments(weight, dof, lo, hi, count + 1)
    g_lo = _chi2_cdf_value(weight, dof, lo)
    g_hi = _chi2_cdf_value(weight, dof, hi)
    out = []
    for q in range(count):
        out.append((hi ** (q + 1) * g_hi - lo ** (q + 1) * g_lo - pdf_m[q + 1]) / (q + 1))
    return out


def _product_convolve(f_vals: np.ndarray, step: float, moments_fn, samples: np.ndarray) -> np.ndarray:
    """Rows out[j] = integral_0^{x_j} f(x_j - u) k(u) du, singularity-safe.

    The kernel k enters two ways: moments_fn(lo, hi, count) returns its exact
    monomial moments on a cell (used for product integration near u = 0,
    where k may be singular or non-smooth), and samples holds its pointwise
    values on the grid (used by the Simpson row scheme on the smooth
    remainder u >= K h). f is smooth and enters through its samples, locally
    interpolated by quadratics. Relative accuracy O(h^3) even for kernels
    with an integrable power singularity at 0.
    """
    f = np.asarray(f_vals, dtype=float)
    n = f.shape[0]
    h = float(step)
    K = _HEAD_CELLS
    if n <= K + 8:
        return numeric_convolve(f, samples, h, normalize=False)

    def cell_taps(c, width2):
        r0, r1, r2 = moments_fn(c, c + width2, 3)
        h2 = 2 * h * h
        b0 = (r2 - (3 * h + 2 * c) * r1 + (c * c + 3 * h * c + 2 * h * h) * r0) / h2
        b1 = (-r2 + 2 * (h + c) * r1 - c * (2 * h + c) * r0) / (h * h)
        b2 = (r2 - (2 * c + h) * r1 + c * (c + h) * r0) / h2
        return b0, b1, b2

    cell_b = [cell_taps(2 * i * h, 2 * h) for i in range(K // 2)]
    taps = np.zeros(K + 1)
    for i, (b0, b1, b2) in enumerate(cell_b):
        taps[2 * i] += b0
        taps[2 * i + 1] += b1
        taps[2 * i + 2] += b2

    out = np.zeros(n)
    # rows 1..K+3: fully product-integrated over [0, x_j]
    for j in range(1, K + 4):
        acc = 0.0
        for i in range(min(j // 2, K // 2)):
            b0, b1, b2 = cell_b[i]
            acc += b0 * f[j - 2 * i] + b1 * f[j - 2 * i - 1] + b2 * f[j - 2 * i - 2]
        for i in range(K // 2, j // 2):
            b0, b1, b2 = cell_taps(2 * i * h, 2 * h)
            acc += b0 * f[j - 2 * i] + b1 * f[j - 2 * i - 1] + b2 * f[j - 2 * i - 2]
        if j % 2:
            # half cell [x_{j-1}, x_j] with f linear
            c = (j - 1) * h
            r0, r1 = moments_fn(c, c + h, 2)
            acc += (((c + h) * r0 - r1) / h) * f[1] + ((r1 - c * r0) / h) * f[0]
        out[j] = acc

    # rows j >= K+4: product head over [0, Kh] plus Simpson over [Kh, x_j]
    head = np.convolve(f, taps)[:n]
    gk = samples[K:]
    nk = gk.shape[0]
    alt = np.ones(nk)
    alt[1::2] = -1.0
    s1 = np.convolve(gk, f)[:nk]
    s2 = np.convolve(gk * alt, f)[:nk]
    gk3 = gk[3:]
    s13 = np.convolve(gk3, f)[: nk - 3]
    s23 = np.convolve(gk3 * alt[: nk - 3], f)[: nk - 3]

    j_all = np.arange(K + 4, n)
    jj = j_all - K
    even = jj % 2 == 0
    je = jj[even]
    tail = np.zeros(j_all.shape[0])
    tail[even] = (h / 3) * (3 * s1[je] - s2[je] - gk[0] * f[je] - gk[je] * f[0])
    jo = jj[~even]
    head38 = (3 * h / 8) * (
        gk[0] * f[jo] + 3 * gk[1] * f[jo - 1] + 3 * gk[2] * f[jo - 2] + gk[3] * f[jo - 3]
    )
    jc = jo - 3
    comp = (h / 3) * (3 * s13[jc] - s23[jc] - gk3[0] * f[jc] - gk[jo] * f[0])
    comp[jc == 0] = 0.0
    tail[~even] = head38 + comp
    out[j_all] = head[j_all] + tail
    return out


def _convolve_with_chi2(f_vals, weight: float, dof: int, step: float, kernel: str = "pdf") -> np.ndarray:
    """(f * g) or (f * G) on f's grid for the leftover weight * chi^2_dof.

    kernel="pdf" convolves with the leftover density g (giving density
    samples); kernel="cdf" convolves with its CDF G (giving CDF samples of
    the full sum directly, which sidesteps re-integrating a sqrt-type
    singularity in the convolved density).
    """
    f = np.asarray(f_vals, dtype=float)
    n = f.shape[0]
    h = float(step)
    xs = np.arange(n) * h
    if kernel == "pdf":
        samples = _chi2_scaled_pdf_grid(weight, dof, xs, h)
        fn = lambda lo, hi, count: _chi2_pdf_moments(weight, dof, lo, hi, count)
    elif kernel == "cdf":
        samples = np.array([_chi2_cdf_value(weight, dof, float(u)) for u in xs])
        fn = lambda lo, hi, count: _chi2_cdf_moments(weight, dof, lo, hi, count)
    else:
        raise ValueError("kernel must be 'pdf' or 'cdf'")
    return _product_convolve(f, h, fn, samples)


def _chi2_scaled_pdf_grid(weight: float, dof: int, xs: np.ndarray, step: float) -> np.ndarray:
    """Samples of the density of weight * chi^2_dof on the grid xs.

    For dof = 1 the density diverges like x^{-1/2} at 0; the first sample is
    replaced by the finite stand-in that makes the first Simpson double cell
    reproduce the exact mass on [0, 2h]: g0 = (3/h) m - 4 g(h) - g(2h). The
    product-rule path never reads the stand-in (its head cells use exact
    kernel moments); it only matters when these samples feed a plain
    Simpson rule, where it keeps the induced error at O(h^{3/2}).
    """
    w = float(weight)
    r = dof
    with context(128):
        log_norm = -gmpy2.lgamma(mpfr(r) / 2)[0] - (mpfr(r) / 2) * gmpy2.log(2 * mpfr(w))
        norm = float(gmpy2.exp(log_norm))
    with np.errstate(divide="ignore", over="ignore"):
        g = np.where(
            xs > 0,
            norm * xs ** (r / 2 - 1) * np.exp(-xs / (2 * w)),
            0.0,
        )
    if r == 1:
        h = float(step)
        with context(128):
            # exact mass of the first double cell: P(w chi^2_1 <= 2h)
            mass2h = float(gmpy2.erf(gmpy2.sqrt(mpfr(h) / mpfr(w))))
        g[0] = (3.0 / h) * mass2h - 4.0 * g[1] - g[2]
    return g


def _chi2_pdf_point(weight: float, dof: int, x: float, bits: int) -> mpfr:
    """Exact density of weight * chi^2_dof at x > 0."""
    with context(bits):
        w = as_mpfr(weight, bits)
        xv = as_mpfr(x, bits)
        r = mpfr(dof)
        log_norm = -gmpy2.lgamma(r / 2)[0] - (r / 2) * gmpy2.log(2 * w)
        return gmpy2.exp(
            log_norm + (r / 2 - 1) * gmpy2.log(xv) - xv / (2 * w)
        )


def _chi2_cdf_point(weight: float, dof: int, t: float, bits: int) -> mpfr:
    """Exact P(weight * chi^2_dof <= t)."""
    with context(bits):
        if t <= 0:
            return mpfr(0)
        s = mpfr(dof) / 2
        gam = gmpy2.gamma(s)
        return (gam - gmpy2.gamma_inc(s, as_mpfr(t, bits) / (2 * as_mpfr(weight, bits)))) / gam


_PAD_SLOPE = 4.0
_PAD_BASE_PDF = 1.6e-8
_PAD_BASE_CDF = 3.0e-10


def _tilt_log_slope(weights, dof: int, x: float) -> float:
    """Estimate of d/dx log f at x for the sum of weight * chi^2_dof factors.

    Solves the exponential-tilt equation sum_i w_i dof / (1 + 2 w_i L) = x
    for L >= 0, the saddle-point rate at which the density climbs toward its
    mode. Used to choose a grid step fine enough that interpolating the
    partial density across one cell stays within the discretization
    allowance. Returns 0 when x is at or beyond the mean.
    """
    ws = [float(w) for w in weights]

    def tilted_mean(lam: float) -> float:
        return sum(w * dof / (1.0 + 2.0 * w * lam) for w in ws)

    if tilted_mean(0.0) <= x:
        return 0.0
    hi = 1.0
    while tilted_mean(hi) > x:
        hi *= 2.0
        if hi > 1e18:
            return hi
    lo = 0.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if tilted_mean(mid) > x:
            lo = mid
        else:
            hi = mid
    return hi


def _row_log_slopes(values: np.ndarray, h: float) -> np.ndarray:
    """Centered |d log v / dx| per grid row, 0 where neighbours vanish."""
    v = np.asarray(values, dtype=float)
    lam = np.zeros_like(v)
    pos = v > 0.0
    logs = np.where(pos, np.log(np.where(pos, v, 1.0)), 0.0)
    interior = pos[2:] & pos[:-2] & pos[1:-1]
    lam[1:-1][interior] = np.abs(logs[2:][interior] - logs[:-2][interior]) / (2 * h)
    if lam.shape[0] >= 2:
        lam[0] = lam[1]
        lam[-1] = lam[-2]
    return lam


def _pad_model(h: float, lam: float) -> float:
    """A-priori relative discretization allowance for the sampled path."""
    return _PAD_SLOPE * (h * lam) ** 3 + _PAD_BASE_PDF * math.sqrt(h / DEFAULT_GRID_STEP)


def _grid_data(d: CertifiedDensity) -> dict:
    """Lazily build and cache the sampled-convolution arrays for d.

    The stored pdf and CDF rows are pre-inflated by a per-row relative
    allowance for the product rule's discretization error: a base term
    calibrated against closed-form cases plus a slope term proportional to
    (h * local log-slope)^3, the size of a quadratic-interpolation residual
    over one cell. The allowance is empirical with an order-of-magnitude
    safety factor, not a theorem; see the module docstring.
    """
    key = d.grid_step
    if key in d._grids:
        return d._grids[key]
    h = d.grid_step
    n = int(round(d.x_max / h)) + 1
    if n < 9:
        raise DomainError("grid_step too coarse for x_max")
    xs = np.arange(n) * h
    w, r = d.leftover_weight, d.weights.dof
    f_lo = np.maximum(np.array(d.lower.evaluate_grid(0.0, h, n)), 0.0)
    f_hi = np.array(d.upper.evaluate_grid(0.0, h, n))
    lo = np.maximum(_convolve_with_chi2(f_lo, w, r, h), 0.0)
    hi = _convolve_with_chi2(f_hi, w, r, h)
    cum_lo = np.maximum(_convolve_with_chi2(f_lo, w, r, h, kernel="cdf"), 0.0)
    cum_hi = _convolve_with_chi2(f_hi, w, r, h, kernel="cdf")
    lam = _row_log_slopes(hi, h)
    slope_term = _PAD_SLOPE * (h * lam) ** 3
    pad = np.minimum(slope_term + _PAD_BASE_PDF * math.sqrt(h / DEFAULT_GRID_STEP), 0.5)
    pad_c = np.minimum(
        slope_term + _PAD_BASE_CDF * (h / DEFAULT_GRID_STEP) ** 1.5, 0.5
    )
    data = {
        "xs": xs,
        "lo": np.maximum(lo * (1.0 - pad), 0.0),
        "hi": hi * (1.0 + pad),
        "cum_lo": np.maximum(cum_lo * (1.0 - pad_c), 0.0),
        "cum_hi": cum_hi * (1.0 + pad_c),
    }
    d._grids[key] = data
    return data


def _interp_cubic(xs: np.ndarray, ys: np.ndarray, x: float) -> float:
    """4-point Lagrange interpolation on a uniform grid."""
    n = xs.shape[0]
    h = xs[1] - xs[0]
    i = int(x / h)
    i0 = min(max(i - 1, 0), n - 4)
    t = (x - xs[i0]) / h
    y0, y1, y2, y3 = ys[i0 : i0 + 4]
    return float(
        y0 * (-(t - 1) * (t - 2) * (t - 3) / 6)
        + y1 * (t * (t - 2) * (t - 3) / 2)
        + y2 * (-t * (t - 1) * (t - 3) / 2)
        + y3 * (t * (t - 1) * (t - 2) / 6)
    )


# ---------------------------------------------------------------------------
# queries


def _check_query(d: CertifiedDensity, x) -> float:
    xf = float(x)
    if not math.isfinite(xf) or xf < 0:
        raise DomainError("query point must be finite and nonnegative")
    if xf > d.x_max * (1 + 1e-12):
        raise DomainError(
            f"query {xf} beyond certified x_max={d.x_max}; rebuild with larger x_max"
        )
    return xf


def pdf_bounds(d: CertifiedDensity, x) -> tuple[BigReal, BigReal]:
    """Certified (lower, upper) bounds on the density at x in [0, x_max].

    For a single odd-dof weight the density is evaluated in closed form
    (lower = upper up to rounding); at x = 0 it is unbounded for dof = 1
    and the query is refused.
    """
    xf = _check_query(d, x)
    bits = d.precision_bits
    if d.is_symbolic:
        lo = (d.lower.evaluate(x) - d.slack) * (1 - d.jitter_rel)
        hi = (d.upper.evaluate(x) + d.slack) * (1 + d.jitter_rel)
    elif d.lower.is_empty():
        if xf == 0.0:
            if d.weights.dof == 1:
                raise DomainError("chi^2_1 density is unbounded at 0")
            return BigReal(0, bits), BigReal(0, bits)
        val = _chi2_pdf_point(d.leftover_weight, d.weights.dof, xf, bits + 16)
        eps = mpfr(2) ** (-(bits - 2))
        with context(bits + 16):
            lo = BigReal(val * (1 - eps), bits)
            hi = BigReal(val * (1 + eps), bits)
    else:
        data = _grid_data(d)
        lo = (BigReal(_interp_cubic(data["xs"], data["lo"], xf), bits) - d.slack) * (
            1 - d.jitter_rel
        )
        hi = (BigReal(_interp_cubic(data["xs"], data["hi"], xf), bits) + d.slack) * (
            1 + d.jitter_rel
        )
    zero = BigReal(0, bits)
    lo = lo if lo > zero else zero
    if hi < lo:
        raise PrecisionExhausted(
            "bounds crossed at query; increase precision_bits and rebuild"
        )
    return lo, hi


def cdf_bounds(d: CertifiedDensity, t) -> tuple[BigReal, BigReal]:
    """Certified (lower, upper) bounds on P(Z <= t) for t in [0, x_max]."""
    tf = _check_query(d, t)
    bits = d.precision_bits
    slack_t = d.slack * tf
    if d.is_symbolic:
        if d.lower.is_empty():
            one = BigReal(1, bits)  # empty product: point mass certificate
            return one, one
        lo = (d.lower.integrate(tf) - slack_t) * (1 - d.jitter_rel)
        hi = (d.upper.integrate(tf) + slack_t) * (1 + d.jitter_rel)
    elif d.lower.is_empty():
        val = _chi2_cdf_point(d.leftover_weight, d.weights.dof, tf, bits + 16)
        eps = mpfr(2) ** (-(bits - 2))
        with context(bits + 16):
            lo = BigReal(val * (1 - eps), bits)
            hi = BigReal(val * (1 + eps), bits)
    else:
        data = _grid_data(d)
        lo = (BigReal(_interp_cubic(data["xs"], data["cum_lo"], tf), bits) - slack_t) * (
            1 - d.jitter_rel
        )
        hi = (BigReal(_interp_cubic(data["xs"], data["cum_hi"], tf), bits) + slack_t) * (
            1 + d.jitter_rel
        )
    zero = BigReal(0, bits)
    lo = lo if lo > zero else zero
    if hi < lo:
        raise PrecisionExhausted(
            "bounds crossed at query; increase precision_bits and rebuild"
        )
    return lo, hi
