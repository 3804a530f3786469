"""Distances, rate fits, concentration envelopes, moment curves and the
segment-wise noise decomposition for skeleton iterates.

Ensembles are 2-D arrays shaped ``(paths, times)``; row order is path-id
order, so reductions are independent of how the paths were scheduled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numba import njit

from .errors import CalibrationError, CapabilityError, InsufficientDataError
from .io import write_csv
from .markov import MixingProfile, ParamKernel, UpdateFn, stationary_distribution, tau_alpha
from .schedules import Schedule, SkeletonTimescale


# --- distances ---------------------------------------------------------------

def dist_to_interval(z, hi: float):
    """Distance from z >= 0 to [0, hi]."""
    if hi < 0:
        raise ValueError("hi must be non-negative")
    out = np.maximum(np.asarray(z, dtype=np.float64) - hi, 0.0)
    return float(out) if out.ndim == 0 else out


def dist_to_ball(w, r: float):
    """(||w|| - r)^+ ; ``w`` may be one vector or a stack of row vectors."""
    if r < 0:
        raise ValueError("r must be non-negative")
    w = np.asarray(w, dtype=np.float64)
    out = np.maximum(np.linalg.norm(w, axis=-1) - r, 0.0)
    return float(out) if out.ndim == 0 else out


# --- rates -------------------------------------------------------------------

@dataclass(frozen=True)
class RateFit:
    exponent: float
    intercept: float
    r_squared: float
    window: tuple[int, int]
    zeros_excluded: int = 0


def fit_rate(series, window_fraction: float = 0.5, times=None) -> RateFit:
    """Fit log d_n = intercept - exponent * log n on the trailing window.

    Element i of ``series`` is d_n at n = times[i] (default n = i); n = 0 is
    never used.
    """
    if not (0.0 < window_fraction <= 1.0):
        raise ValueError("window_fraction must lie in (0, 1]")
    d = np.asarray(series, dtype=np.float64)
    hi = len(d)
    lo = hi - int(math.ceil(window_fraction * hi))
    n = (np.arange(hi) if times is None else np.asarray(times))[lo:hi]
    seg = d[lo:hi]
    keep = n > 0
    n, seg = n[keep], seg[keep]
    lo = hi - len(seg)
    pos = seg > 0
    if pos.sum() < 3:
        raise InsufficientDataError(f"only {int(pos.sum())} positive values in window [{lo}, {hi})")
    x, y = np.log(n[pos]), np.log(seg[pos])
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (intercept + slope * x)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else max(0.0, 1.0 - float(np.sum(resid**2)) / ss_tot)
    return RateFit(float(-slope), float(intercept), r2, (lo, hi), int((~pos).sum()))


@dataclass(frozen=True)
class RateCertificate:
    passed: bool
    sup_tail: float


def rate_certificate(series, eta: float, tail_start: int, tol: float) -> RateCertificate:
    """Pass iff sup_{n >= tail_start} n^{eta/2} d_n <= tol."""
    d = np.asarray(series, dtype=np.float64)
    if not (0 <= tail_start < len(d)):
        raise ValueError("tail_start must index into the series")
    n = np.arange(tail_start, len(d), dtype=np.float64)
    sup = float(np.max(n ** (eta / 2.0) * d[tail_start:]))
    return RateCertificate(sup <= tol, sup)


def rate_statistic(paths: np.ndarray, eta: float, tail_start: int) -> np.ndarray:
    """Per-path sup_{n >= tail_start} n^{eta/2} d_n."""
    paths = np.atleast_2d(np.asarray(paths, dtype=np.float64))
    n = np.arange(tail_start, paths.shape[1], dtype=np.float64)
    return np.max(n ** (eta / 2.0) * paths[:, tail_start:], axis=1)


# --- envelopes ---------------------------------------------------------------

@dataclass(frozen=True)
class RSEnvelope:
    """B' / (n + n0) * [ln(B / delta) + 1 + ln(n + n0)]^k, a bound on d^2."""

    b_cap: float
    b_prime: float
    n0: float
    k: int

    squared = True


@dataclass(frozen=True)
class SAEnvelope:
    """scale * exp(-L) * [ln(1/delta) + offset + L]^k with L = ln^{1-nu}(t+1)/(1-nu), a bound on d."""

    scale: float
    offset: float
    k: int
    nu: float

    squared = False


Envelope = RSEnvelope | SAEnvelope


def _check_delta(delta: float) -> None:
    if not (0.0 < delta < 1.0):
        raise ValueError(f"delta must lie in (0, 1), got {delta}")


def envelope_eval(env: Envelope, n, delta: float):
    _check_delta(delta)
    n = np.asarray(n, dtype=np.float64)
    if np.any(n < 0):
        raise ValueError("n must be non-negative")
    if isinstance(env, RSEnvelope):
        x = n + env.n0
        out = env.b_prime / x * (math.log(env.b_cap / delta) + 1.0 + np.log(x)) ** env.k
    else:
        ell = np.log(n + 1.0) ** (1.0 - env.nu) / (1.0 - env.nu)
        out = env.scale * np.exp(-ell) * (math.log(1.0 / delta) + env.offset + ell) ** env.k
    return float(out) if out.ndim == 0 else out


def envelope_knee(env: Envelope, delta: float) -> int:
    """Smallest n beyond which envelope_eval is non-increasing in n."""
    _check_delta(delta)
    if isinstance(env, RSEnvelope):
        c = math.log(env.b_cap / delta) + 1.0
        return max(0, math.ceil(math.exp(env.k - c) - env.n0))
    # d/dL [exp(-L)(a + L)^k] <= 0  iff  L >= k - a
    a = math.log(1.0 / delta) + env.offset
    need = env.k - a
    if need <= 0:
        return 0
    return max(0, math.ceil(math.exp((need * (1.0 - env.nu)) ** (1.0 / (1.0 - env.nu))) - 1.0))


def _statistic(dists: np.ndarray, env: Envelope) -> np.ndarray:
    d = np.atleast_2d(np.asarray(dists, dtype=np.float64))
    return d * d if env.squared else d


@dataclass(frozen=True)
class Coverage:
    coverage: float
    passed: bool
    threshold: float
    first_violation: tuple[int, int] | None


def coverage_threshold(delta: float, paths: int) -> float:
    return 1.0 - delta - 3.0 * math.sqrt(delta * (1.0 - delta) / paths)


def envelope_coverage(dists, env: Envelope, delta: float, times=None) -> Coverage:
    """Fraction of paths lying under the envelope at every recorded time.

    ``dists`` is (paths, times) of distances; ``times`` gives the n of each
    column (defaults to 0..T-1).
    """
    stat = _statistic(dists, env)
    n = np.arange(stat.shape[1]) if times is None else np.asarray(times)
    bound = envelope_eval(env, n, delta)
    bad = stat > bound
    ok = ~bad.any(axis=1)
    first = None
    if not ok.all():
        p = int(np.flatnonzero(~ok)[0])
        first = (p, int(n[np.flatnonzero(bad[p])[0]]))
    cov = float(ok.mean())
    thr = coverage_threshold(delta, stat.shape[0])
    return Coverage(cov, cov >= thr, thr, first)


def _shape(variant: str, n: np.ndarray, delta: float, k: int, b_cap: float, n0: float, nu: float, offset: float):
    if variant == "rs":
        return envelope_eval(RSEnvelope(b_cap, 1.0, n0, k), n, delta)
    return envelope_eval(SAEnvelope(1.0, offset, k, nu), n, delta)


def _needed_scale(stat: np.ndarray, shape: np.ndarray, delta: float) -> float:
    per_path = np.max(stat / shape, axis=1)
    P = len(per_path)
    rank = math.ceil((1.0 - delta) * P)
    return float(np.sort(per_path)[rank - 1])


def calibrate_envelope(train, variant: str, delta_grid: Sequence[float], k: int, n0: float = 1.0,
                       b_cap: float | None = None, nu: float = 0.5, offset: float = 1.0,
                       times=None, growth_limit: float = 1.5) -> Envelope:
    """Smallest scale giving simultaneous coverage 1 - delta on the training
    paths, maximized over the delta grid.

    The structural constants (k, n0 or nu/offset) are fixed by the caller;
    ``b_cap`` defaults to max(k, 1).  Calibration fails when some path is not
    finite, or when the scale fitted on the first half of the horizon falls
    short of the full-horizon scale by more than ``growth_limit`` (the
    required scale keeps growing with time, so no finite envelope exists).
    """
    if variant not in ("rs", "sa"):
        raise ValueError("variant must be 'rs' or 'sa'")
    b_cap = float(max(k, 1)) if b_cap is None else float(b_cap)
    d = np.atleast_2d(np.asarray(train, dtype=np.float64))
    if not np.all(np.isfinite(d)):
        raise CalibrationError("training ensemble contains non-finite distances")
    n = np.arange(d.shape[1]) if times is None else np.asarray(times, dtype=np.float64)
    stat = d * d if variant == "rs" else d
    half = max(1, d.shape[1] // 2)
    full_scale = half_scale = 0.0
    for delta in delta_grid:
        _check_delta(delta)
        shape = _shape(variant, n, delta, k, b_cap, n0, nu, offset)
        full_scale = max(full_scale, _needed_scale(stat, shape, delta))
        half_scale = max(half_scale, _needed_scale(stat[:, :half], shape[:half], delta))
    if not math.isfinite(full_scale):
        raise CalibrationError("no finite scale covers the training ensemble")
    if full_scale > growth_limit * half_scale and full_scale > 0:
        raise CalibrationError(
            f"required scale grows with the horizon ({half_scale:.4g} -> {full_scale:.4g}); no finite envelope")
    if variant == "rs":
        return RSEnvelope(b_cap, full_scale, n0, k)
    return SAEnvelope(full_scale, offset, k, nu)


def lp_moment_series(dists, p: float) -> np.ndarray:
    """Per-time empirical mean of d^p across paths."""
    if p < 1:
        raise ValueError("p must be >= 1")
    d = np.atleast_2d(np.asarray(dists, dtype=np.float64))
    return np.mean(d**p, axis=0)


def corollary_shape(n, k: int, b_cap: float = 1.0) -> np.ndarray:
    """a(t) b(t)^k with a = 1/(n+3), b = ln B + 1 + ln(n+3)."""
    x = np.asarray(n, dtype=np.float64) + 3.0
    return (math.log(b_cap) + 1.0 + np.log(x)) ** k / x


# --- ensemble statistics -----------------------------------------------------

@dataclass
class EnsembleStats:
    times: np.ndarray
    q_grid: tuple[float, ...]
    quantiles: np.ndarray  # (len(q_grid), len(times))
    means: np.ndarray
    moments: dict = field(default_factory=dict)  # p -> series
    path_count: int = 0
    seed_base: int = 0
    diverged: int = 0

    @classmethod
    def from_paths(cls, values, q_grid=(0.05, 0.25, 0.5, 0.75, 0.95), moments=(1.0, 2.0),
                   record_every: int = 1, seed_base: int = 0, diverged: int = 0) -> EnsembleStats:
        v = np.atleast_2d(np.asarray(values, dtype=np.float64))[:, ::record_every]
        times = np.arange(0, v.shape[1] * record_every, record_every)
        q = np.quantile(v, sorted(q_grid), axis=0)
        mom = {float(p): np.mean(np.abs(v) ** p, axis=0) for p in moments}
        return cls(times, tuple(sorted(q_grid)), q, np.mean(v, axis=0), mom, v.shape[0], seed_base, diverged)

    def to_csv(self, path: str | Path) -> Path:
        header = ["n", "mean"] + [f"q{q:g}" for q in self.q_grid] + [f"m{p:g}" for p in self.moments]
        cols = [self.times, self.means, *self.quantiles, *self.moments.values()]
        return write_csv(path, header, cols)


# --- noise decomposition -----------------------------------------------------

@njit(cache=True)
def _laws(mats, y_base, base, t):
    # distribution of Y_{t+1} from Y_base under the live kernels and under the frozen kernel
    n = mats.shape[1]
    live = np.zeros(n)
    frozen = np.zeros(n)
    live[y_base] = 1.0
    frozen[y_base] = 1.0
    for k in range(base, t + 1):
        live = live @ mats[k]
        frozen = frozen @ mats[base]
    return live, frozen


@dataclass
class NoiseDecomposition:
    segments: np.ndarray  # m
    s: np.ndarray  # (4, M, d): s1..s4
    total: np.ndarray  # (M, d)
    segment_update: np.ndarray  # w_{t_{m+1}} - w_{t_m} - alpha_bar_m h(w_{t_m})
    ratios: np.ndarray  # (4, M) normalized magnitudes
    m0: int
    quenched_terms: int  # steps whose s4 term conditions on a time past t_m

    @property
    def telescoping_error(self) -> float:
        return float(np.max(np.abs(self.s.sum(axis=0) - self.segment_update)))

    def growth(self, i: int) -> float:
        """max ratio over the later half of segments past m0 / max over the earlier half."""
        r = self.ratios[i, self.m0:]
        h = len(r) // 2
        early, late = float(np.max(r[:h])), float(np.max(r[h:]))
        if early == 0.0:
            return 0.0 if late == 0.0 else float("inf")
        return late / early

    def to_csv(self, path: str | Path) -> Path:
        norms = np.linalg.norm(self.s, axis=2)
        return write_csv(path, ["m", "s1", "s2", "s3", "s4", "r1", "r2", "r3", "r4"],
                         [self.segments, *norms, *self.ratios])


def noise_decomposition(ws: np.ndarray, ys: np.ndarray, schedule: Schedule, skeleton: SkeletonTimescale,
                        kernel: ParamKernel, h: UpdateFn, profile: MixingProfile, m0: int = 0,
                        max_states: int = 1000) -> NoiseDecomposition:
    """Split each segment's noise ``sum alpha_t H(w_t, Y_{t+1}) - alpha_bar_m h(w_{t_m})``.

    s1 compares H at w_t and at w_{t_m} along the realized chain.  s2 and s4
    use exact laws of Y_{t+1} and of the frozen chain started from
    Y_{t - tau} (tau = tau_{alpha_t}); when t - tau lies past t_m the law is
    conditioned on the realized Y_{t - tau}, w_{t - tau}.  s3 is the remainder.
    """
    nY = kernel.state_count
    if nY > max_states:
        raise CapabilityError(f"|Y| = {nY} too large for exact conditional laws (limit {max_states})")
    ws = np.asarray(ws, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.int64)
    M = skeleton.n_segments
    horizon = int(skeleton.anchors[M])
    if len(ws) < horizon + 1 or len(ys) < horizon + 1:
        raise ValueError("trajectory shorter than the skeleton")
    alphas = schedule.alphas(horizon)
    mats = np.stack([kernel.matrix(ws[k]) for k in range(horizon)])
    d = ws.shape[1]
    s = np.zeros((4, M, d))
    total = np.zeros((M, d))
    upd = np.zeros((M, d))
    ratios = np.zeros((4, M))
    quenched = 0
    for m in range(M):
        lo, hi = skeleton.segment(m)
        wm = ws[lo]
        hm_tab = h.table(wm, nY)
        hbar = stationary_distribution(mats[lo]) @ hm_tab
        abar = math.fsum(alphas[lo:hi])
        acc = np.zeros(d)
        for t in range(lo, hi):
            a = alphas[t]
            y1 = ys[t + 1]
            ht = h(ws[t], int(y1))
            acc += a * ht
            s[0, m] += a * (ht - hm_tab[y1])
            tau = min(tau_alpha(profile, a), t)
            base = t - tau
            if base > lo:
                quenched += 1
            live, frozen = _laws(mats, ys[base], base, t)
            s[1, m] += a * ((live - frozen) @ hm_tab)
            s[3, m] += a * (frozen @ hm_tab - hbar)
        total[m] = acc - abar * hbar
        s[2, m] = total[m] - s[0, m] - s[1, m] - s[3, m]
        upd[m] = ws[hi] - wm - abar * hbar
        T = skeleton.targets[m]
        scale = np.linalg.norm(wm) + 1.0
        for i in (0, 1, 3):
            ratios[i, m] = np.linalg.norm(s[i, m]) / (T * T * scale)
        ratios[2, m] = np.linalg.norm(s[2, m]) / (T * scale)
    return NoiseDecomposition(np.arange(M), s, total, upd, ratios, m0, quenched)


@dataclass(frozen=True)
class IncrementCheck:
    ok: bool
    worst_ratio: float  # max_m |z_{m+1} - z_m| / (T_m (z_m + 1)) over m >= m0
    bound: float


def skeleton_increment_check(z_at_anchors, targets, m0: int = 0, bound: float = 16.0) -> IncrementCheck:
    """|z_{m+1} - z_m| <= bound * T_m * (z_m + 1) for every m >= m0."""
    z = np.asarray(z_at_anchors, dtype=np.float64)
    T = np.asarray(targets, dtype=np.float64)[: len(z) - 1]
    r = np.abs(np.diff(z))[m0:] / (T[m0:] * (z[m0:-1] + 1.0))
    worst = float(np.max(r)) if len(r) else 0.0
    return IncrementCheck(worst <= bound, worst, bound)
