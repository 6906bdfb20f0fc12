"""Euler-Maruyama simulation of the chain and its exit statistics.

The degenerate chain gets noise sigma(x^1) dW on block 1 only; the
regularized version adds sqrt(eps_j) dW_j on each block j >= 2. Exits are
detected on step endpoints and located by linear interpolation along the
step chord to the first face crossing (no bridge correction; the O(sqrt(dt))
bias is accepted and sized against the MC noise in the tests).

Per-level first-exit times are tracked for levels 1..level. The absorption
rule that defines a survival time is configurable:

  "joint": tau = first time ANY tracked block leaves its box, i.e. the
           exit from the product domain. This is the survival whose decay
           rate equals the principal Dirichlet eigenvalue on the product,
           so it is the default for rate estimation and cross-checks.
  "level": tau = first exit of block `level` from its own box, the
           per-subsystem exit time. The two rules agree when lower blocks
           outlast higher ones (the exit-time ordering diagnostic measures
           exactly that).

Paths are simulated in contiguous batches; the batch layout and thechunked
per-path noise draws are fixed by (master_seed, n_paths) alone, so results
are bit-identical for any worker count.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .dynamics import DriftEvaluator
from .errors import FitError, SimulationError, SpecError
from .streams import path_generator

__all__ = [
    "PathResult", "SurvivalCurve", "RateEstimate", "CouplingTable",
    "OrderingReport", "simulate_path", "simulate_trajectory",
    "estimate_survival", "estimate_exit_rate", "coupled_viscosity_error",
    "estimate_exit_time_ordering",
]

_CHUNK = 1024          # steps per noise draw
_NOISE_BUDGET = 2**27  # bytes of normals held per batch


def _plan_steps(horizon: float, dt: float):
    if dt <= 0:
        raise SpecError("dt must be positive")
    if horizon <= 0:
        raise SpecError("horizon must be positive")
    n_steps = max(1, int(math.ceil(horizon / dt - 1e-9)))
    return n_steps, n_steps * dt


def _batch_ranges(n_paths: int, n_steps: int, width: int):
    chunk = min(_CHUNK, n_steps)
    size = int(_NOISE_BUDGET // (chunk * width * 8))
    size = max(16, min(4096, size))
    return [(s, min(s + size, n_paths)) for s in range(0, n_paths, size)]


def _map_batches(worker, ranges, n_workers):
    if n_workers <= 1 or len(ranges) <= 1:
        return [worker(r) for r in ranges]
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(worker, ranges))


# ---------------------------------------------------------------------------
# core batch engine


def _run_paths(spec, policy, level, eps_vec, dt, n_steps, master_seed,
               first_id, n_paths, stop_mode, record_locations):
    """Simulate paths [first_id, first_id + n_paths) and return per-path
    exit data as arrays indexed by position."""
    d = spec.d
    dim = level * d
    m = spec.m
    width = m + (level - 1) * d
    lo, hi = spec.omega_bounds(level)
    sqrt_eps = np.sqrt(np.asarray(eps_vec, dtype=float))
    sqrt_dt = math.sqrt(dt)
    ev = DriftEvaluator(spec, policy, level)

    exit_time = np.full((n_paths, level), np.inf)
    exit_loc = np.full((n_paths, level, dim), np.nan) if record_locations else None
    terminal = np.tile(spec.x0_flat(level), (n_paths, 1))
    invalid = np.zeros(n_paths, dtype=bool)

    gens = [path_generator(master_seed, first_id + j) for j in range(n_paths)]
    rows = np.arange(n_paths)                   # original index per live row
    x = np.tile(spec.x0_flat(level), (n_paths, 1))
    exited = np.zeros((n_paths, level), dtype=bool)

    k = 0
    while k < n_steps and rows.size:
        clen = min(_CHUNK, n_steps - k)
        noise = np.empty((rows.size, clen, width))
        for j, r in enumerate(rows):
            noise[j] = gens[r].standard_normal((clen, width))
        active = np.ones(rows.size, dtype=bool)

        for s in range(clen):
            drift = ev.drift(x)
            dx = drift * dt
            dw = noise[:, s, :] * sqrt_dt
            dx[:, :d] += ev.sigma_apply(x[:, :d], dw[:, :m])
            for j in range(2, level + 1):
                b = (j - 1) * d
                dx[:, b : b + d] += sqrt_eps[j - 2] * dw[:, m + (j - 2) * d : m + (j - 1) * d]
            x_new = x + dx

            bad = active & ~np.all(np.isfinite(x_new), axis=1)
            if bad.any():
                invalid[rows[bad]] = True
                active &= ~bad

            t_base = (k + s) * dt
            for li in range(level):
                cand = active & ~exited[:, li]
                if not cand.any():
                    continue
                bs, be = li * d, (li + 1) * d
                blk_new = x_new[:, bs:be]
                out = cand & np.any((blk_new <= lo[bs:be]) | (blk_new >= hi[bs:be]), axis=1)
                if not out.any():
                    continue
                idx = np.nonzero(out)[0]
                xo = x[idx, bs:be]
                dxo = dx[idx, bs:be]
                xn = x_new[idx, bs:be]
                with np.errstate(divide="ignore", invalid="ignore"):
                    frac = np.where(
                        xn >= hi[bs:be], (hi[bs:be] - xo) / dxo,
                        np.where(xn <= lo[bs:be], (lo[bs:be] - xo) / dxo, 1.0),
                    )
                s_star = np.clip(np.min(frac, axis=1), 0.0, 1.0)
                g = rows[idx]
                exit_time[g, li] = t_base + s_star * dt
                if record_locations:
                    exit_loc[g, li, :] = x[idx] + s_star[:, None] * dx[idx]
                exited[idx, li] = True

            if stop_mode == "joint":
                done = np.any(exited, axis=1)
            elif stop_mode == "level":
                done = exited[:, level - 1]
            else:  # "all"
                done = np.all(exited, axis=1)
            newly = active & done
            if newly.any():
                terminal[rows[newly]] = x_new[newly]
                active &= ~newly
            x = x_new

        keep = active
        rows = rows[keep]
        x = x[keep]
        exited = exited[keep]
        k += clen

    if rows.size:  # censored at the horizon
        terminal[rows] = x
    return {
        "exit_time": exit_time,
        "exit_loc": exit_loc,
        "terminal": terminal,
        "invalid": invalid,
    }


def _run_all(spec, policy, level, eps_vec, dt, n_steps, master_seed, n_paths,
             stop_mode, record_locations, n_workers):
    width = spec.m + (level - 1) * spec.d
    ranges = _batch_ranges(n_paths, n_steps, width)

    def worker(rng):
        s, e = rng
        return _run_paths(spec, policy, level, eps_vec, dt, n_steps,
                          master_seed, s, e - s, stop_mode, record_locations)

    parts = _map_batches(worker, ranges, n_workers)
    out = {}
    for key in ("exit_time", "exit_loc", "terminal", "invalid"):
        if parts[0][key] is None:
            out[key] = None
        else:
            out[key] = np.concatenate([p[key] for p in parts], axis=0)
    return out


# ---------------------------------------------------------------------------
# results


@dataclass(frozen=True, eq=False)
class PathResult:
    """Exit record of a single path at one level."""

    level: int
    exit_flags: tuple       # per level 1..level
    exit_times: tuple       # tau^i capped at the horizon
    exit_locations: tuple   # joint state at the interpolated crossing, or None
    terminal_state: tuple   # state when the path stopped (or at the horizon)
    valid: bool


@dataclass(frozen=True, eq=False)
class SurvivalCurve:
    times: np.ndarray
    survival: np.ndarray
    ci_halfwidth: np.ndarray   # 95% binomial, per point
    n_paths: int               # valid paths entering the estimate
    n_invalid: int
    eps: tuple
    level: int
    absorb: str
    horizon: float
    dt: float

    def __post_init__(self):
        s = self.survival
        if s[0] != 1.0 or np.any(s < 0) or np.any(s > 1) or np.any(np.diff(s) > 0):
            raise SimulationError("survival curve violates monotonicity bounds")


@dataclass(frozen=True)
class RateEstimate:
    rate: float
    stderr: float
    intercept: float
    window: tuple
    n_points: int


@dataclass(frozen=True, eq=False)
class CouplingTable:
    eps: np.ndarray
    sup_err: np.ndarray
    sup_err_ci: np.ndarray
    dtheta: np.ndarray
    dtheta_ci: np.ndarray
    theta_mean: np.ndarray
    theta_ref: float
    n_paths: int
    level: int


@dataclass(frozen=True, eq=False)
class OrderingReport:
    ordering_prob: float
    pair_violations: np.ndarray  # P{theta_i < theta_{i+1}} for i = 1..n-1
    n_paths: int
    n_invalid: int


# ---------------------------------------------------------------------------
# public operations


def simulate_path(spec, policy, level: int, eps=None, dt: float = 1e-3,
                  horizon: Optional[float] = None, path_id: int = 0,
                  master_seed: int = 0) -> PathResult:
    """Single-path record with per-level exits; fully determined by
    (master_seed, path_id)."""
    if not 1 <= level <= spec.n:
        raise SpecError(f"level must be in 1..{spec.n}")
    eps_vec = spec.eps_vector(level, eps)
    T = spec.horizon if horizon is None else float(horizon)
    n_steps, t_end = _plan_steps(T, dt)
    data = _run_paths(spec, policy, level, eps_vec, dt, n_steps, master_seed,
                      path_id, 1, stop_mode="all", record_locations=True)
    times = data["exit_time"][0]
    locs = data["exit_loc"][0]
    flags = np.isfinite(times)
    return PathResult(
        level=level,
        exit_flags=tuple(bool(f) for f in flags),
        exit_times=tuple(float(min(t, t_end)) for t in times),
        exit_locations=tuple(
            tuple(float(v) for v in locs[i]) if flags[i] else None
            for i in range(level)
        ),
        terminal_state=tuple(float(v) for v in data["terminal"][0]),
        valid=not bool(data["invalid"][0]),
    )


def simulate_trajectory(spec, policy, level: int, eps=None, dt: float = 1e-3,
                        horizon: Optional[float] = None, path_id: int = 0,
                        master_seed: int = 0):
    """Full Euler trajectory of one path: (times (K+1,), states (K+1, level*d)).

    Runs to the horizon without absorbing at domain boundaries, so the record
    is usable for pathwise diagnostics (quadratic variation, plotting).
    Consumes the same noise stream layout as the batch engine.
    """
    if not 1 <= level <= spec.n:
        raise SpecError(f"level must be in 1..{spec.n}")
    eps_vec = spec.eps_vector(level, eps)
    T = spec.horizon if horizon is None else float(horizon)
    n_steps, t_end = _plan_steps(T, dt)
    d = spec.d
    dim = level * d
    evalr = DriftEvaluator(spec, policy, level)
    width = spec.m + (level - 1) * d
    gen = path_generator(master_seed, path_id)
    sqrt_dt = math.sqrt(dt)
    sqrt_eps = np.sqrt(eps_vec)  # one entry per block 2..level

    states = np.empty((n_steps + 1, dim))
    x = np.array(spec.x0_flat(level))[None, :]
    states[0] = x[0]
    drawn = 0
    buf = np.empty((0, width))
    for k in range(n_steps):
        if drawn == buf.shape[0]:
            clen = min(_CHUNK, n_steps - k)
            buf = gen.standard_normal((clen, width))
            drawn = 0
        dw = buf[drawn][None, :] * sqrt_dt
        drawn += 1
        dx = evalr.drift(x) * dt
        dx[:, :d] += evalr.sigma_apply(x[:, :d], dw[:, :spec.m])
        for j in range(1, level):
            if sqrt_eps[j - 1] > 0.0:
                cols = slice(j * d, (j + 1) * d)
                dx[:, cols] += sqrt_eps[j - 1] * \
                    dw[:, spec.m + (j - 1) * d: spec.m + j * d]
        x = x + dx
        states[k + 1] = x[0]
    times = np.arange(n_steps + 1) * dt
    times[-1] = t_end
    return times, states


def estimate_survival(spec, policy, level: int, eps=None, dt: float = 1e-3,
                      horizon: Optional[float] = None, n_paths: int = 10000,
                      master_seed: int = 0, n_times: int = 201,
                      absorb: str = "joint", n_workers: int = 1) -> SurvivalCurve:
    """Survival curve S(t) = P{tau > t} over a uniform time grid.

    Deterministic in (master_seed, n_paths) regardless of n_workers.
    """
    if not 1 <= level <= spec.n:
        raise SpecError(f"level must be in 1..{spec.n}")
    if absorb not in ("joint", "level"):
        raise SpecError("absorb must be 'joint' or 'level'")
    if n_paths < 1:
        raise SpecError("n_paths must be positive")
    eps_vec = spec.eps_vector(level, eps)
    T = spec.horizon if horizon is None else float(horizon)
    n_steps, t_end = _plan_steps(T, dt)
    data = _run_all(spec, policy, level, eps_vec, dt, n_steps, master_seed,
                    n_paths, stop_mode=absorb, record_locations=False,
                    n_workers=n_workers)
    valid = ~data["invalid"]
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise SimulationError("all paths hit non-finite states; nothing to estimate")
    if absorb == "joint":
        tau = data["exit_time"][valid].min(axis=1)
    else:
        tau = data["exit_time"][valid, level - 1]
    tau = np.sort(tau)
    times = np.linspace(0.0, t_end, n_times)
    exited_by = np.searchsorted(tau, times, side="right")
    surv = 1.0 - exited_by / n_valid
    ci = 1.96 * np.sqrt(surv * (1.0 - surv) / n_valid)
    return SurvivalCurve(
        times=times, survival=surv, ci_halfwidth=ci,
        n_paths=n_valid, n_invalid=int(n_paths - n_valid),
        eps=tuple(float(e) for e in eps_vec), level=level, absorb=absorb,
        horizon=t_end, dt=dt,
    )


def estimate_exit_rate(curve: SurvivalCurve,
                       fit_window: Optional[tuple] = None) -> RateEstimate:
    """Exit rate from a weighted least-squares fit of log S(t) on a tail
    window (default [T/2, T], where the principal mode dominates).

    Weights n*S/(1-S) are the delta-method inverse variances of log S.
    """
    T = curve.horizon
    lo, hi = fit_window if fit_window is not None else (T / 2.0, T)
    if not (0 <= lo < hi):
        raise FitError(f"bad fit window ({lo}, {hi})")
    sel = (curve.times >= lo) & (curve.times <= hi)
    s = curve.survival[sel]
    t = curve.times[sel]
    if np.any(s <= 0.0):
        raise FitError("survival hits 0 inside the fit window; shorten the horizon")
    keep = s < 1.0
    t, s = t[keep], s[keep]
    if t.size < 3:
        raise FitError(f"only {t.size} usable points in the fit window")
    n = curve.n_paths
    w = n * s / (1.0 - s)
    y = np.log(s)
    sw = w.sum()
    st = (w * t).sum()
    stt = (w * t * t).sum()
    sy = (w * y).sum()
    sty = (w * t * y).sum()
    det = sw * stt - st * st
    if det <= 0:
        raise FitError("degenerate fit window")
    slope = (sw * sty - st * sy) / det
    intercept = (stt * sy - st * sty) / det
    # Delta-method stderr.  Survival indicators nest, so for t_i <= t_j
    # Cov(S_i, S_j) = S_j(1-S_i)/n and Cov(log S_i, log S_j) = (1-S_i)/(n S_i)
    # -- the same value as Var(log S_i).  The naive residual formula ignores
    # this correlation and understates the error severalfold.
    c = w * (sw * t - st) / det           # slope = sum(c_i * y_i)
    v = (1.0 - s) / (n * s)               # Var(log S_i), increasing in t
    csuf = np.cumsum(c[::-1])[::-1]       # sum_{j >= i} c_j
    var_slope = float(np.sum(v * c * (2.0 * csuf - c)))
    stderr = math.sqrt(max(var_slope, 0.0))
    return RateEstimate(
        rate=float(-slope), stderr=stderr, intercept=float(intercept),
        window=(float(lo), float(hi)), n_points=int(t.size),
    )


def coupled_viscosity_error(spec, policy, eps_list: Sequence, dt: float = 1e-3,
                            horizon: Optional[float] = None,
                            n_paths: int = 1000, master_seed: int = 0,
                            level: Optional[int] = None,
                            n_workers: int = 1) -> CouplingTable:
    """Pathwise regularization error under common random numbers.

    Runs the unregularized chain and one regularized copy per entry of
    ``eps_list`` (uniform intensity over the degenerate blocks) on shared
    Wiener increments, and reports, per epsilon, the mean sup-norm gap of
    block `level` over [0, T] and the mean |theta_eps - theta| of the
    capped level exit times.
    """
    level = spec.n if level is None else level
    if level < 2:
        raise SpecError("coupling needs a degenerate block (level >= 2)")
    eps_arr = np.asarray([float(e) for e in eps_list], dtype=float)
    if eps_arr.size == 0:
        raise SpecError("eps_list is empty")
    if np.any(np.diff(eps_arr) >= 0):
        raise SpecError("eps_list must be strictly decreasing")
    if np.any(eps_arr < 0):
        raise SpecError("eps_list entries must be nonnegative")

    d = spec.d
    dim = level * d
    m = spec.m
    width = m + (level - 1) * d
    n_sys = eps_arr.size + 1  # system 0 is the eps=0 reference
    sqrt_eps = np.sqrt(np.concatenate([[0.0], eps_arr]))  # (n_sys,)
    lo, hi = spec.omega_bounds(level)
    bs, be = (level - 1) * d, level * d
    T = spec.horizon if horizon is None else float(horizon)
    n_steps, t_end = _plan_steps(T, dt)
    sqrt_dt = math.sqrt(dt)
    ev = DriftEvaluator(spec, policy, level)

    def worker(rng):
        first, last = rng
        count = last - first
        gens = [path_generator(master_seed, first + j) for j in range(count)]
        x = np.tile(spec.x0_flat(level), (count, n_sys, 1))
        sup_err = np.zeros((count, n_sys))
        tau = np.full((count, n_sys), np.inf)
        exited = np.zeros((count, n_sys), dtype=bool)
        invalid = np.zeros(count, dtype=bool)
        k = 0
        while k < n_steps:
            clen = min(_CHUNK, n_steps - k)
            noise = np.empty((count, clen, width))
            for j in range(count):
                noise[j] = gens[j].standard_normal((clen, width))
            for s in range(clen):
                flat = x.reshape(count * n_sys, dim)
                drift = ev.drift(flat).reshape(count, n_sys, dim)
                dx = drift * dt
                dw = noise[:, s, :] * sqrt_dt
                dx[:, :, :d] += ev.sigma_apply(
                    flat[:, :d], np.repeat(dw[:, :m], n_sys, axis=0)
                ).reshape(count, n_sys, d)
                for j in range(2, level + 1):
                    b = (j - 1) * d
                    block_dw = dw[:, m + (j - 2) * d : m + (j - 1) * d]
                    dx[:, :, b : b + d] += sqrt_eps[None, :, None] * block_dw[:, None, :]
                x_new = x + dx

                finite = np.all(np.isfinite(x_new.reshape(count, -1)), axis=1)
                invalid |= ~finite

                gap = x_new[:, :, bs:be] - x_new[:, 0:1, bs:be]
                np.maximum(sup_err, np.linalg.norm(gap, axis=2), out=sup_err)

                blk_new = x_new[:, :, bs:be]
                out = ~exited & np.any(
                    (blk_new <= lo[bs:be]) | (blk_new >= hi[bs:be]), axis=2
                )
                if out.any():
                    pi, si = np.nonzero(out)
                    xo = x[pi, si, bs:be]
                    dxo = dx[pi, si, bs:be]
                    xn = x_new[pi, si, bs:be]
                    with np.errstate(divide="ignore", invalid="ignore"):
                        frac = np.where(
                            xn >= hi[bs:be], (hi[bs:be] - xo) / dxo,
                            np.where(xn <= lo[bs:be], (lo[bs:be] - xo) / dxo, 1.0),
                        )
                    s_star = np.clip(np.min(frac, axis=1), 0.0, 1.0)
                    tau[pi, si] = (k + s) * dt + s_star * dt
                    exited[pi, si] = True
                x = x_new
            k += clen
        return {"sup_err": sup_err, "tau": tau, "invalid": invalid}

    ranges = _batch_ranges(n_paths, n_steps, width)
    parts = _map_batches(worker, ranges, n_workers)
    sup_err = np.concatenate([p["sup_err"] for p in parts], axis=0)
    tau = np.concatenate([p["tau"] for p in parts], axis=0)
    invalid = np.concatenate([p["invalid"] for p in parts], axis=0)

    valid = ~invalid
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise SimulationError("all coupled paths hit non-finite states")
    theta = np.minimum(tau[valid], t_end)
    err = sup_err[valid][:, 1:]
    dtheta = np.abs(theta[:, 1:] - theta[:, 0:1])
    z = 1.96 / math.sqrt(n_valid)
    return CouplingTable(
        eps=eps_arr,
        sup_err=err.mean(axis=0),
        sup_err_ci=z * err.std(axis=0, ddof=1) if n_valid > 1 else np.zeros_like(eps_arr),
        dtheta=dtheta.mean(axis=0),
        dtheta_ci=z * dtheta.std(axis=0, ddof=1) if n_valid > 1 else np.zeros_like(eps_arr),
        theta_mean=theta[:, 1:].mean(axis=0),
        theta_ref=float(theta[:, 0].mean()),
        n_paths=n_valid,
        level=level,
    )


def estimate_exit_time_ordering(spec, policy, dt: float = 1e-3,
                                horizon: Optional[float] = None,
                                n_paths: int = 1000, master_seed: int = 0,
                                n_workers: int = 1) -> OrderingReport:
    """Monte-Carlo frequency of the nested ordering tau^1 >= .. >= tau^n
    (capped at the horizon) plus per-pair violation rates."""
    if spec.n < 2:
        raise SpecError("ordering needs at least two subsystems")
    eps_vec = spec.eps_vector(spec.n)
    T = spec.horizon if horizon is None else float(horizon)
    n_steps, t_end = _plan_steps(T, dt)
    data = _run_all(spec, policy, spec.n, eps_vec, dt, n_steps, master_seed,
                    n_paths, stop_mode="all", record_locations=False,
                    n_workers=n_workers)
    valid = ~data["invalid"]
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise SimulationError("all paths hit non-finite states")
    theta = np.minimum(data["exit_time"][valid], t_end)
    holds = np.all(theta[:, :-1] >= theta[:, 1:], axis=1)
    violations = (theta[:, :-1] < theta[:, 1:]).mean(axis=0)
    return OrderingReport(
        ordering_prob=float(holds.mean()),
        pair_violations=violations,
        n_paths=n_valid,
        n_invalid=int(n_paths - n_valid),
    )
