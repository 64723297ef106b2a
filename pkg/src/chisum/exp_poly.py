"""Exact convolution algebra on sums of e^{rate x} x^power terms.

The density of a positive linear combination of chi-square variables (after
pairing, see certified_density) is a finite sum of terms c * e^{b x} * x^k
supported on x >= 0. This class of functions is closed under the positive-
support convolution

    (f (*) g)(x) = integral_0^x f(t) g(x - t) dt

provided no two distinct rates collide, and the convolution of a term with
rate a, degree n against a term with rate b, degree m produces only rates
{a, b} with degrees {<= n, <= m}: degrees do not grow, so repeated
convolution stays small. The closed form used here (delta = a - b):

    (e^{a t} t^n) (*) (e^{b t} t^m) =
        sum_{k=0}^{m} beta_k e^{b x} x^k + sum_{k=0}^{n} alpha_k e^{a x} x^k
    beta_k  = (-1)^{n+1} delta^{k-n-m-1} m! (n+m-k)! / ((m-k)! k!)
    alpha_k = (-1)^{n+k} delta^{k-n-m-1} n! (n+m-k)! / ((n-k)! k!)

which for n = m = 0 reduces to the familiar (e^{a x} - e^{b x})/(a - b).

Sums are stored block-wise (one dense coefficient vector per distinct rate),
and a whole-sum convolution against a block runs through prefix arrays so the
cost is quadratic in the block degrees rather than quartic. All coefficient
arithmetic is MPFR at the sum's precision; rounding is accounted for by the
caller through abs_bound() (see certified_density's slack ledger).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import gmpy2
from gmpy2 import mpfr

from .precision_math import (
    DEFAULT_PRECISION_BITS,
    BigReal,
    as_mpfr,
    context,
    decimal_string,
    _poly_exp_integral_raw,
)


class EqualRates(ArithmeticError):
    """Convolution of two terms with exactly equal rates is outside the algebra."""


@dataclass(frozen=True)
class Term:
    """One summand c * e^{rate x} * x^power."""

    coeff: BigReal
    rate: BigReal
    power: int

    def __post_init__(self):
        if not isinstance(self.power, int) or self.power < 0:
            raise ValueError("power must be a nonnegative integer")


def _sup_exp_poly(rate: mpfr, power: int, x_max: mpfr) -> mpfr:
    """sup over [0, x_max] of e^{rate x} x^power, under the ambient context."""
    if power == 0:
        return gmpy2.exp(rate * x_max) if rate > 0 else mpfr(1)
    if rate >= 0:
        x_star = x_max
    else:
        x_star = min(x_max, -power / rate)
    return gmpy2.exp(rate * x_star) * x_star ** power


class ExpPolySum:
    """A finite sum of e^{rate x} x^power terms at a fixed working precision.

    Terms are held as rate blocks (dense coefficient vectors indexed by
    power) and materialized in canonical order: rates descending, powers
    ascending within a rate. Instances are immutable from the outside; all
    operations return new sums.
    """

    __slots__ = ("_blocks", "_bits")

    def __init__(self, terms=(), precision_bits: int = DEFAULT_PRECISION_BITS):
        self._bits = int(precision_bits)
        blocks: dict[mpfr, list[mpfr]] = {}
        with context(self._bits):
            for item in terms:
                if isinstance(item, Term):
                    coeff, rate, power = item.coeff, item.rate, item.power
                else:
                    coeff, rate, power = item
                c = as_mpfr(coeff, self._bits)
                r = as_mpfr(rate, self._bits)
                if not isinstance(power, int) or power < 0:
                    raise ValueError("power must be a nonnegative integer")
                vec = blocks.setdefault(r, [])
                while len(vec) <= power:
                    vec.append(mpfr(0))
                vec[power] = vec[power] + c
        self._blocks = self._canonical(blocks)

    @staticmethod
    def _canonical(blocks: dict) -> dict:
        out = {}
        for rate in sorted(blocks.keys(), reverse=True):
            vec = blocks[rate]
            while vec and vec[-1] == 0:
                vec.pop()
            if vec:
                out[rate] = vec
        return out

    @classmethod
    def _from_blocks(cls, blocks: dict, precision_bits: int) -> "ExpPolySum":
        obj = object.__new__(cls)
        obj._bits = precision_bits
        obj._blocks = cls._canonical(blocks)
        return obj

    # -- inspection ---------------------------------------------------------

    @property
    def precision_bits(self) -> int:
        return self._bits

    @property
    def terms(self) -> tuple[Term, ...]:
        out = []
        for rate, vec in self._blocks.items():
            r = BigReal(rate, self._bits)
            for power, c in enumerate(vec):
                if c != 0:
                    out.append(Term(BigReal(c, self._bits), r, power))
        return tuple(out)

    @property
    def term_count(self) -> int:
        return sum(1 for _, vec in self._blocks.items() for c in vec if c != 0)

    @property
    def degree(self) -> int:
        """Largest power present, or -1 for the empty sum."""
        return max((len(vec) - 1 for vec in self._blocks.values()), default=-1)

    @property
    def rates(self) -> tuple[BigReal, ...]:
        return tuple(BigReal(r, self._bits) for r in self._blocks)

    def is_empty(self) -> bool:
        return not self._blocks

    def __eq__(self, other):
        if not isinstance(other, ExpPolySum):
            return NotImplemented
        if len(self._blocks) != len(other._blocks):
            return False
        for (r1, v1), (r2, v2) in zip(self._blocks.items(), other._blocks.items()):
            if r1 != r2 or len(v1) != len(v2) or any(a != b for a, b in zip(v1, v2)):
                return False
        return True

    def __repr__(self):
        return (
            f"ExpPolySum({self.term_count} terms, {len(self._blocks)} rates, "
            f"degree {self.degree}, precision_bits={self._bits})"
        )

    # -- linear structure ---------------------------------------------------

    def __add__(self, other: "ExpPolySum") -> "ExpPolySum":
        if not isinstance(other, ExpPolySum):
            return NotImplemented
        bits = max(self._bits, other._bits)
        with context(bits):
            blocks = {r: list(v) for r, v in self._blocks.items()}
            for r, v in other._blocks.items():
                vec = blocks.setdefault(r, [])
                while len(vec) < len(v):
                    vec.append(mpfr(0))
                for k, c in enumerate(v):
                    vec[k] = vec[k] + c
        return ExpPolySum._from_blocks(blocks, bits)

    def scale(self, factor) -> "ExpPolySum":
        with context(self._bits):
            f = as_mpfr(factor, self._bits)
            blocks = {r: [c * f for c in v] for r, v in self._blocks.items()}
        return ExpPolySum._from_blocks(blocks, self._bits)

    # -- evaluation and integration -----------------------------------------

    def evaluate(self, x) -> BigReal:
        """Pointwise value at x >= 0."""
        bits = max(self._bits, x.precision_bits) if isinstance(x, BigReal) else self._bits
        with context(bits):
            xv = as_mpfr(x, bits)
            total = mpfr(0)
            for rate, vec in self._blocks.items():
                poly = mpfr(0)
                for c in reversed(vec):
                    poly = poly * xv + c
                total += poly * gmpy2.exp(rate * xv)
        return BigReal(total, bits)

    def evaluate_grid(self, start: float, step: float, count: int) -> list[float]:
        """Values on the uniform grid start + i*step, i < count, as floats.

        Uses an incremental exponential per rate block (one multiply per
        point instead of one exp), re-anchored every 256 points so rounding
        drift stays far below float64 resolution. Intended for the sampled
        numeric paths; certified queries go through evaluate().
        """
        if count < 1:
            return []
        with context(self._bits):
            s = mpfr(start)
            h = mpfr(step)
            totals = [mpfr(0)] * count
            for rate, vec in self._blocks.items():
                estep = gmpy2.exp(rate * h)
                e = mpfr(0)
                for i in range(count):
                    if i % 256 == 0:
                        e = gmpy2.exp(rate * (s + i * h))
                    else:
                        e = e * estep
                    xv = s + i * h
                    poly = mpfr(0)
                    for c in reversed(vec):
                        poly = poly * xv + c
                    totals[i] += poly * e
            return [float(t) for t in totals]

    def integrate(self, upper=None) -> BigReal:
        """integral_0^upper of the sum (upper = None for the full mass).

        Every rate must be negative; each term goes through the two-branch
        polynomial-exponential integral so cancellation inside a term is
        handled there.
        """
        for rate in self._blocks:
            if not rate < 0:
                raise ValueError("integrate requires all rates negative")
        uv = None if upper is None else as_mpfr(upper, self._bits)
        if uv is not None and uv < 0:
            raise ValueError("upper must be nonnegative")
        with context(self._bits):
            total = mpfr(0)
            for rate, vec in self._blocks.items():
                for power, c in enumerate(vec):
                    if c != 0:
                        total += c * _poly_exp_integral_raw(power, rate, uv, self._bits)
        return BigReal(total, self._bits)

    # -- bounds and pruning ---------------------------------------------------

    def abs_bound(self, x_max) -> BigReal:
        """sum_i |c_i| sup_{[0,x_max]} e^{rate_i x} x^{power_i}.

        A pointwise bound on the sum obtained by ignoring all cancellation;
        used to size rounding slack.
        """
        with context(self._bits):
            xv = as_mpfr(x_max, self._bits)
            total = mpfr(0)
            for rate, vec in self._blocks.items():
                for power, c in enumerate(vec):
                    if c != 0:
                        total += abs(c) * _sup_exp_poly(rate, power, xv)
        return BigReal(total, self._bits)

    def prune(self, x_max, drop_bits: int | None = None):
        """Drop terms whose pointwise bound on [0, x_max] is negligible.

        A term is dropped when |c| sup(e^{rate x} x^power) falls below
        2^{-drop_bits} times the largest such bound in the sum (drop_bits
        defaults to the working precision). Returns (pruned_sum, slack) where
        slack is a BigReal upper bound on |dropped part| anywhere in
        [0, x_max]; the caller must carry it into any certified bound.
        """
        if drop_bits is None:
            drop_bits = self._bits
        with context(self._bits):
            xv = as_mpfr(x_max, self._bits)
            bounds = {}
            peak = mpfr(0)
            for rate, vec in self._blocks.items():
                for power, c in enumerate(vec):
                    if c == 0:
                        continue
                    bnd = abs(c) * _sup_exp_poly(rate, power, xv)
                    bounds[(rate, power)] = bnd
                    if bnd > peak:
                        peak = bnd
            if not bounds:
                return self, BigReal(0, self._bits)
            cutoff = peak * mpfr(2) ** (-drop_bits)
            slack = mpfr(0)
            blocks = {}
            for rate, vec in self._blocks.items():
                new_vec = []
                for power, c in enumerate(vec):
                    if c == 0:
                        new_vec.append(mpfr(0))
                        continue
                    if bounds[(rate, power)] <= cutoff:
                        slack += bounds[(rate, power)]
                        new_vec.append(mpfr(0))
                    else:
                        new_vec.append(c)
                blocks[rate] = new_vec
        return ExpPolySum._from_blocks(blocks, self._bits), BigReal(slack, self._bits)

    # -- convolution ----------------------------------------------------------

    def convolve(self, other: "ExpPolySum") -> "ExpPolySum":
        """Positive-support convolution of two sums.

        Raises EqualRates if the two sums share a rate exactly (the closed
        form divides by every rate difference). Within one sum repeated
        rates are fine; across the two they are not.
        """
        if not isinstance(other, ExpPolySum):
            raise TypeError("convolve expects an ExpPolySum")
        bits = max(self._bits, other._bits)
        if self.is_empty() or other.is_empty():
            return ExpPolySum((), bits)
        for r in self._blocks:
            if r in other._blocks:
                raise EqualRates(f"rate {float(r)} appears in both operands")

        d_self = max(len(v) for v in self._blocks.values()) - 1
        d_other = max(len(v) for v in other._blocks.values()) - 1
        n_fact = d_self + d_other + 2
        with context(bits):
            fact = [mpfr(math.factorial(i)) for i in range(n_fact + 1)]
            inv_fact = [1 / f for f in fact]
            out: dict[mpfr, list[mpfr]] = {}
            for ra, cvec in self._blocks.items():
                for rb, dvec in other._blocks.items():
                    _convolve_block_pair(out, ra, cvec, rb, dvec, fact, inv_fact)
        return ExpPolySum._from_blocks(out, bits)

    # -- serialization --------------------------------------------------------

    def to_json_dict(self) -> dict:
        terms = []
        for rate, vec in self._blocks.items():
            rate_s = decimal_string(rate, self._bits)
            for power, c in enumerate(vec):
                if c != 0:
                    terms.append(
                        {
                            "coeff": decimal_string(c, self._bits),
                            "rate": rate_s,
                            "power": power,
                        }
                    )
        return {"precision_bits": self._bits, "terms": terms}

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict())

    @classmethod
    def from_json_dict(cls, data: dict) -> "ExpPolySum":
        bits = int(data["precision_bits"])
        terms = [
            (BigReal(t["coeff"], bits), BigReal(t["rate"], bits), int(t["power"]))
            for t in data["terms"]
        ]
        return cls(terms, precision_bits=bits)

    @classmethod
    def from_json(cls, text: str) -> "ExpPolySum":
        return cls.from_json_dict(json.loads(text))


def _accumulate(out: dict, rate: mpfr, coeffs: list) -> None:
    vec = out.setdefault(rate, [])
    while len(vec) < len(coeffs):
        vec.append(mpfr(0))
    for k, c in enumerate(coeffs):
        vec[k] = vec[k] + c


def _convolve_block_pair(out, ra, cvec, rb, dvec, fact, inv_fact) -> None:
    """Convolve block (ra, cvec) with block (rb, dvec) into out, ambient ctx.

    Uses the prefix arrays
        D_j = sum_m d_m (j+m)! delta^{-m-1}
        C_i = sum_n c_n (-1)^{n+1} (n+i)! delta^{-n-1}
    so the alpha (rate ra) coefficients are correlations of c against
    (-1)^j delta^{-j} D_j / j! and the beta (rate rb) coefficients are
    correlations of d against delta^{-i} C_i / i!.
    """
    d_a = len(cvec) - 1
    d_b = len(dvec) - 1
    delta = ra - rb
    if delta == 0:
        raise EqualRates("rate difference is exactly zero")
    inv_delta = 1 / delta
    invp = [mpfr(1)]
    for _ in range(max(d_a, d_b) + 1):
        invp.append(invp[-1] * inv_delta)

    # prefix arrays
    phi = [dvec[m] * invp[m + 1] for m in range(d_b + 1)]
    Dj = [
        sum((phi[m] * fact[j + m] for m in range(d_b + 1)), mpfr(0))
        for j in range(d_a + 1)
    ]
    psi = [cvec[n] * invp[n + 1] * (1 if n % 2 else -1) for n in range(d_a + 1)]
    Ci = [
        sum((psi[n] * fact[i + n] for n in range(d_a + 1)), mpfr(0))
        for i in range(d_b + 1)
    ]

    e_j = [
        inv_fact[j] * invp[j] * Dj[j] * (-1 if j % 2 else 1) for j in range(d_a + 1)
    ]
    alpha = []
    for k in range(d_a + 1):
        acc = mpfr(0)
        for j in range(d_a + 1 - k):
            acc += cvec[k + j] * fact[k + j] * e_j[j]
        alpha.append(acc * inv_fact[k])

    h_i = [inv_fact[i] * invp[i] * Ci[i] for i in range(d_b + 1)]
    beta = []
    for k in range(d_b + 1):
        acc = mpfr(0)
        for i in range(d_b + 1 - k):
            acc += dvec[k + i] * fact[k + i] * h_i[i]
        beta.append(acc * inv_fact[k])

    _accumulate(out, ra, alpha)
    _accumulate(out, rb, beta)


def convolve_terms(f: Term, g: Term, precision_bits: int | None = None) -> ExpPolySum:
    """Convolution of two single terms as an ExpPolySum."""
    if precision_bits is None:
        precision_bits = max(
            f.coeff.precision_bits,
            f.rate.precision_bits,
            g.coeff.precision_bits,
            g.rate.precision_bits,
        )
    lhs = ExpPolySum([f], precision_bits)
    rhs = ExpPolySum([g], precision_bits)
    return lhs.convolve(rhs)


def convolve_sums(f: ExpPolySum, g: ExpPolySum) -> ExpPolySum:
    """Convolution of two sums; see ExpPolySum.convolve."""
    return f.convolve(g)
