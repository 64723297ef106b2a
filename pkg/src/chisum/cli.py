"""Command-line front end emitting CSV/JSON for every pipeline stage.

Five subcommands cover the workflow: `density` and `prob` query one
certified build, `oracle` lines the independent checks up against it,
`vacua-sweep` runs the landscape application end to end, and `bench`
times builds for the scaling check. All file output is plain CSV
(header row, '.' decimals, ',' separators, LF line endings) or JSON.
Probabilities and density bounds are serialized as arbitrary-precision
decimal strings so values like e^-700 survive the round trip; their
natural logs ride alongside as floats, with "-inf" spelled out as a
string since JSON has no literal for it.

Exit codes: 0 success, 2 usage or domain error (the message names the
violated precondition), 3 partial failure (some sweep rows failed or
the run was interrupted; whatever finished is flushed first).

Timing columns (`seconds`) are wall-clock and vary run to run; every
other byte of output is deterministic for a fixed configuration and
seed.
"""

from __future__ import annotations

import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import click
import numpy as np

from . import vacua
from .certified_density import (
    BuildError,
    DomainError,
    WeightList,
    build,
    cdf_bounds,
    pdf_bounds,
)
from .oracles import QuadratureFailure, quad_convolve_density
from .precision_math import MIN_PRECISION_BITS

_ENV_BITS = "CHISUM_PRECISION_BITS"


@dataclass(frozen=True)
class RunConfig:
    """Validated knobs shared by the subcommands."""

    precision_bits: int = 256
    r_max: float = 0.05
    x_max: float | None = None
    seed: int = 42
    grid_step: float | None = None
    output_path: str | None = None

    def __post_init__(self):
        if self.precision_bits < MIN_PRECISION_BITS:
            raise DomainError(f"precision must be at least {MIN_PRECISION_BITS} bits")
        if not 0 < self.r_max < 1:
            raise DomainError("rmax must be in (0, 1)")
        if self.x_max is not None and not (
            math.isfinite(self.x_max) and self.x_max > 0
        ):
            raise DomainError("xmax must be positive and finite")
        if self.grid_step is not None and not (
            math.isfinite(self.grid_step) and self.grid_step > 0
        ):
            raise DomainError("grid must be a positive step size")


def _resolve_bits(flag_value: int | None) -> int:
    if flag_value is not None:
        return flag_value
    env = os.environ.get(_ENV_BITS)
    if env is None:
        return 256
    try:
        return int(env)
    except ValueError:
        raise DomainError(f"{_ENV_BITS} must be an integer, got {env!r}")


def _parse_floats(text: str, what: str) -> list:
    try:
        vals = [float(part) for part in text.split(",") if part.strip() != ""]
    except ValueError:
        raise DomainError(f"{what} must be a comma-separated list of numbers")
    if not vals:
        raise DomainError(f"{what} list is empty")
    return vals


def _open_out(path: str | None):
    if path is None:
        return sys.stdout, False
    return open(path, "w", newline=""), True


def _emit(path: str | None, lines: list):
    handle, owned = _open_out(path)
    try:
        for line in lines:
            handle.write(line + "\n")
    finally:
        if owned:
            handle.close()


def _fail(exc: BaseException, code: int = 2):
    click.echo(f"error: {exc}", err=True)
    sys.exit(code)


_COMMON = [
    click.option("--rmax", type=float, default=None, help="Total relative error budget (default 0.05)."),
    click.option("--precision", type=int, default=None, help=f"Working precision in bits (default 256, env {_ENV_BITS})."),
    click.option("--xmax", type=float, default=None, help="Right edge of the certification window."),
    click.option("--grid", type=float, default=None, help="Sampling step for odd summand counts (default: auto)."),
    click.option("--out", "out_path", type=click.Path(dir_okay=False, writable=True), default=None, help="Output file (default: stdout)."),
]


def _with_common(fn):
    for opt in reversed(_COMMON):
        fn = opt(fn)
    return fn


@click.group()
def main():
    """Certified distributions of positive chi-square combinations."""


@main.command("density")
@click.option("-w", "--weights", required=True, help="Comma-separated positive weights.")
@click.option("--dof", type=int, default=1, show_default=True, help="Degrees of freedom per summand (odd).")
@click.option("-x", "--xs", required=True, help="Comma-separated evaluation points.")
@_with_common
def cmd_density(weights, dof, xs, rmax, precision, xmax, grid, out_path):
    """Certified pdf bounds: CSV rows x,lo,hi."""
    try:
        cfg = RunConfig(
            precision_bits=_resolve_bits(precision),
            r_max=0.05 if rmax is None else rmax,
            x_max=xmax,
            grid_step=grid,
            output_path=out_path,
        )
        ws = _parse_floats(weights, "weights")
        points = _parse_floats(xs, "xs")
        wl = WeightList(tuple(ws), dof=dof)
        top = max(points)
        if any(p < 0 for p in points):
            raise DomainError("xs must be nonnegative (density lives on [0, x_max])")
        x_max = cfg.x_max
        if x_max is None:
            mean = sum(ws) * dof
            x_max = max(1.5, 2.0 * mean, 1.25 * top)
        if top > x_max:
            raise DomainError("xs must lie within [0, x_max]")
        dens = build(
            wl,
            r_max=cfg.r_max,
            x_max=x_max,
            precision_bits=cfg.precision_bits,
            grid_step=cfg.grid_step,
        )
        lines = ["x,lo,hi"]
        for x in points:
            lo, hi = pdf_bounds(dens, x)
            lines.append(f"{x!r},{lo.to_decimal()},{hi.to_decimal()}")
        _emit(cfg.output_path, lines)
    except (DomainError, BuildError, ValueError) as exc:
        _fail(exc)


@main.command("prob")
@click.option("-w", "--weights", required=True, help="Comma-separated positive weights.")
@click.option("--dof", type=int, default=1, show_default=True, help="Degrees of freedom per summand (odd).")
@click.option("-t", "--threshold", "t", type=float, required=True, help="Upper integration limit.")
@_with_common
def cmd_prob(weights, dof, t, rmax, precision, xmax, grid, out_path):
    """Certified P(sum <= t): JSON with decimal bounds and their logs."""
    try:
        cfg = RunConfig(
            precision_bits=_resolve_bits(precision),
            r_max=0.05 if rmax is None else rmax,
            x_max=xmax,
            grid_step=grid,
            output_path=out_path,
        )
        ws = _parse_floats(weights, "weights")
        wl = WeightList(tuple(ws), dof=dof)
        if t < 0:
            raise DomainError("threshold t must be nonnegative")
        if t == 0:
            payload = {"lo": "0", "hi": "0", "log_lo": "-inf", "log_hi": "-inf"}
        else:
            x_max = cfg.x_max
            if x_max is None:
                mean = sum(ws) * dof
                x_max = max(1.5, 2.0 * mean, 1.25 * t)
            if t > x_max:
                raise DomainError("threshold t must lie within [0, x_max]")
            dens = build(
                wl,
                r_max=cfg.r_max,
                x_max=x_max,
                precision_bits=cfg.precision_bits,
                grid_step=cfg.grid_step,
            )
            lo, hi = cdf_bounds(dens, t)
            zero = type(lo)(0, lo.precision_bits)
            payload = {
                "lo": lo.to_decimal(),
                "hi": hi.to_decimal(),
                "log_lo": float(lo.log()) if lo > zero else "-inf",
                "log_hi": float(hi.log()) if hi > zero else "-inf",
            }
        _emit(cfg.output_path, [json.dumps(payload)])
    except (DomainError, BuildError, ValueError) as exc:
        _fail(exc)


def _sweep_job(args):
    """Worker for one sweep row; returns (N, SweepRow) or (N, error string)."""
    n, r_max, bits, grid_step = args
    try:
        return n, vacua.p_n(n, R_max=r_max, precision_bits=bits, grid_step=grid_step)
    except Exception as exc:  # noqa: BLE001 - isolate worker failures per N
        return n, f"{type(exc).__name__}: {exc}"


def _write_sweep_csv(path: str, rows: dict):
    lines = ["N,log_p_lo,log_p_hi,rel_err,seconds"]
    for n in sorted(rows):
        r = rows[n]
        lines.append(f"{r.N},{r.log_p_lo!r},{r.log_p_hi!r},{r.rel_err!r},{r.seconds!r}")
    _emit(path, lines)


def _fit_block(rows, model):
    try:
        res = vacua.fit(rows, model)
    except (DomainError, vacua.NoConvergence) as exc:
        return {"error": f"{type(exc).__name__}: {exc}"}
    return {
        "params": res.params,
        "std_errors": res.std_errors,
        "max_abs_residual": max(abs(v) for v in res.residuals),
    }


@main.command("vacua-sweep")
@click.option("--n-min", type=int, default=2, show_default=True)
@click.option("--n-max", type=int, default=300, show_default=True)
@click.option("--step", type=int, default=2, show_default=True)
@click.option("--rmax", type=float, default=None, help="Relative error budget per N (default 0.05).")
@click.option("--precision", type=int, default=None, help=f"Working precision in bits (default 256, env {_ENV_BITS}).")
@click.option("--grid", type=float, default=1e-3, show_default=True, help="Sampling step for the odd-count builds.")
@click.option("--jobs", type=int, default=1, show_default=True, help="Parallel worker processes.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=".", show_default=True, help="Directory for sweep.csv, fit.json, weights.csv.")
def cmd_vacua_sweep(n_min, n_max, step, rmax, precision, grid, jobs, out_dir):
    """Sweep P(S <= 1) over N, fit both laws, write CSV/JSON artifacts."""
    try:
        cfg = RunConfig(
            precision_bits=_resolve_bits(precision),
            r_max=0.05 if rmax is None else rmax,
            grid_step=grid,
        )
        if not 2 <= n_min <= n_max:
            raise DomainError("need 2 <= n-min <= n-max")
        if step < 1:
            raise DomainError("step must be at least 1")
        if jobs < 1:
            raise DomainError("jobs must be at least 1")
    except DomainError as exc:
        _fail(exc)

    os.makedirs(out_dir, exist_ok=True)
    ns = list(range(n_min, n_max + 1, step))
    tasks = [(n, cfg.r_max, cfg.precision_bits, cfg.grid_step) for n in ns]
    rows: dict = {}
    failures: dict = {}
    interrupted = False
    try:
        if jobs == 1:
            for task in tasks:
                n, res = _sweep_job(task)
                if isinstance(res, str):
                    failures[n] = res
                    click.echo(f"N={n} failed: {res}", err=True)
                else:
                    rows[n] = res
                    click.echo(f"N={n} done in {res.seconds:.1f}s", err=True)
        else:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                for n, res in pool.map(_sweep_job, tasks):
                    if isinstance(res, str):
                        failures[n] = res
                        click.echo(f"N={n} failed: {res}", err=True)
                    else:
                        rows[n] = res
                        click.echo(f"N={n} done in {res.seconds:.1f}s", err=True)
    except KeyboardInterrupt:
        interrupted = True
        click.echo("interrupted: flushing partial results", err=True)

    _write_sweep_csv(os.path.join(out_dir, "sweep.csv"), rows)

    ordered = [rows[n] for n in sorted(rows)]
    fit_doc = {
        "POWER": _fit_block(ordered, "POWER"),
        "LINLOG": _fit_block(ordered, "LINLOG"),
    }
    lin = fit_doc["LINLOG"]
    if "params" in lin and lin["params"].get("d", 0.0) > 0:
        fit_doc["implied_N_star"] = vacua.linlog_crossing(lin["params"]["d"])
    else:
        fit_doc["implied_N_star"] = None
    _emit(os.path.join(out_dir, "fit.json"), [json.dumps(fit_doc, indent=2)])

    if rows:
        top = vacua.mp_quantile_weights(max(rows))
        lines = ["b_prime,lambda_sq,weight"]
        for k, (lam, w) in enumerate(zip(top.lambdas, top.weights)):
            lines.append(f"{k + 2},{lam!r},{w!r}")
        _emit(os.path.join(out_dir, "weights.csv"), lines)

    if failures or interrupted:
        sys.exit(3)


@main.command("bench")
@click.option("-n", "--ns", default="10,20,40,80,160", show_default=True, help="Ascending comma-separated build sizes.")
@click.option("--rmax", type=float, default=None, help="Relative error budget (default 0.05).")
@click.option("--precision", type=int, default=None, help=f"Working precision in bits (default 256, env {_ENV_BITS}).")
@click.option("--out", "out_path", type=click.Path(dir_okay=False, writable=True), default=None, help="Output file (default: stdout).")
def cmd_bench(ns, rmax, precision, out_path):
    """Time one build plus one CDF query per size: CSV rows n,seconds,terms."""
    try:
        cfg = RunConfig(
            precision_bits=_resolve_bits(precision),
            r_max=0.05 if rmax is None else rmax,
            output_path=out_path,
        )
        sizes = [int(v) for v in _parse_floats(ns, "ns")]
        if sizes != sorted(sizes) or len(set(sizes)) != len(sizes):
            raise DomainError("ns must be strictly ascending")
        if sizes[0] < 1:
            raise DomainError("ns must be positive")
        lines = ["n,seconds,terms"]
        for n in sizes:
            wl = vacua.mp_quantile_weights(n + 1).weight_list()
            t0 = time.monotonic()
            dens = build(wl, r_max=cfg.r_max, precision_bits=cfg.precision_bits)
            cdf_bounds(dens, min(1.0, dens.x_max / 2))
            elapsed = time.monotonic() - t0
            lines.append(f"{n},{elapsed!r},{dens.upper.term_count}")
        _emit(cfg.output_path, lines)
    except (DomainError, BuildError, ValueError) as exc:
        _fail(exc)


def _mc_density(wl: WeightList, points, half_width: float, samples: int, seed: int):
    """Windowed empirical density of the weighted sum at each point.

    Counts draws inside (x - d, x + d] and divides by the window; the
    standard error is binomial. Chunked so no chunk allocates more than
    about 250k normal scalars at once.
    """
    ws = np.array([float(w) for w in wl.weights])
    n_w = len(ws)
    chunk = max(1, 250_000 // max(n_w * wl.dof, 1))
    hits = np.zeros(len(points), dtype=np.int64)
    done = 0
    stream = 0
    pts = np.array(points)
    while done < samples:
        take = min(chunk, samples - done)
        rng = np.random.Generator(np.random.Philox(key=[seed, stream]))
        draws = rng.chisquare(wl.dof, size=(take, n_w)) @ ws
        for i, x in enumerate(pts):
            hits[i] += int(np.count_nonzero((draws > x - half_width) & (draws <= x + half_width)))
        done += take
        stream += 1
    dens = hits / (samples * 2.0 * half_width)
    phat = hits / samples
    se = np.sqrt(np.maximum(phat * (1 - phat), 1.0 / samples) / samples) / (2.0 * half_width)
    return dens, se


@main.command("oracle")
@click.option("-w", "--weights", required=True, help="Comma-separated positive weights.")
@click.option("--dof", type=int, default=1, show_default=True, help="Degrees of freedom per summand (odd).")
@click.option("-x", "--xs", required=True, help="Comma-separated evaluation points.")
@click.option("--samples", type=int, default=200_000, show_default=True, help="Monte Carlo sample count.")
@click.option("--seed", type=int, default=42, show_default=True)
@_with_common
def cmd_oracle(weights, dof, xs, samples, seed, rmax, precision, xmax, grid, out_path):
    """Side-by-side checks: CSV rows x,mc,mc_err,quad,lo,hi.

    mc is a windowed histogram density (window from --grid, default
    x_max/100); quad is the adaptive-quadrature density, left blank
    above 8 summands; lo,hi are the certified bounds.
    """
    try:
        cfg = RunConfig(
            precision_bits=_resolve_bits(precision),
            r_max=0.05 if rmax is None else rmax,
            x_max=xmax,
            seed=seed,
            grid_step=None,
            output_path=out_path,
        )
        ws = _parse_floats(weights, "weights")
        points = _parse_floats(xs, "xs")
        if any(p < 0 for p in points):
            raise DomainError("xs must be nonnegative")
        if samples < 1000:
            raise DomainError("need samples >= 1000")
        wl = WeightList(tuple(ws), dof=dof)
        top = max(points)
        x_max = cfg.x_max
        if x_max is None:
            x_max = max(1.5, 2.0 * sum(ws) * dof, 1.25 * top)
        if top > x_max:
            raise DomainError("xs must lie within [0, x_max]")
        half_width = grid if grid is not None else x_max / 100.0
        if not 0 < half_width < x_max:
            raise DomainError("grid window must be in (0, x_max)")
        dens = build(wl, r_max=cfg.r_max, x_max=x_max, precision_bits=cfg.precision_bits)
        mc_vals, mc_errs = _mc_density(wl, points, half_width, samples, cfg.seed)
        lines = ["x,mc,mc_err,quad,lo,hi"]
        for i, x in enumerate(points):
            if len(ws) <= 8:
                try:
                    quad = repr(float(quad_convolve_density(tuple(ws), x, dof)))
                except QuadratureFailure:
                    quad = ""
            else:
                quad = ""
            lo, hi = pdf_bounds(dens, x)
            lines.append(
                f"{x!r},{float(mc_vals[i])!r},{float(mc_errs[i])!r},{quad},"
                f"{lo.to_decimal()},{hi.to_decimal()}"
            )
        _emit(cfg.output_path, lines)
    except (DomainError, BuildError, ValueError) as exc:
        _fail(exc)


if __name__ == "__main__":
    main()
