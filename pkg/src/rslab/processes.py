"""Simulators for scalar almost-supermartingale recursions.

The special template is ``E_n[z_{n+1}] <= (1 - alpha T_n) z_n + xi T_n`` and
the general one ``E_n[z_{n+1}] <= (1 + a_n) z_n + x_n - y_n``.  Built-in
noise models realize the conditional-mean bound with equality.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np
from numba import njit

from .errors import ConfigError, InvariantError, StepSizeError
from .io import fingerprint
from .rng import path_uniforms
from .schedules import Schedule

DIVERGENCE_CAP = 1e300

DETERMINISTIC = "deterministic"
BOUNDED_MULTIPLICATIVE = "bounded_multiplicative"
EXAMPLE1 = "example1"
VARIANTS = (DETERMINISTIC, BOUNDED_MULTIPLICATIVE, EXAMPLE1)


@dataclass(frozen=True)
class PowerSequence:
    """T_n = c / (n + offset) ** power."""

    c: float
    power: float
    offset: float = 1.0

    def values(self, n: int) -> np.ndarray:
        return self.c / (np.arange(n, dtype=np.float64) + self.offset) ** self.power


TSequence = Union[Schedule, PowerSequence, np.ndarray, Callable[[np.ndarray], np.ndarray]]


def t_values(t_seq: TSequence, n: int) -> np.ndarray:
    """First ``n`` terms of a step sequence given in any supported form."""
    if isinstance(t_seq, Schedule):
        return t_seq.alphas(n)
    if isinstance(t_seq, PowerSequence):
        return t_seq.values(n)
    if callable(t_seq):
        return np.asarray(t_seq(np.arange(n)), dtype=np.float64)
    arr = np.asarray(t_seq, dtype=np.float64)
    if len(arr) < n:
        raise ValueError(f"explicit sequence has {len(arr)} terms, {n} required")
    return arr[:n]


@dataclass(frozen=True)
class RSSpecialSpec:
    alpha: float
    xi: float
    t_seq: TSequence
    growth_b: float

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError("alpha must be positive", "alpha")
        if not self.xi >= 0:
            raise ConfigError("xi must be non-negative", "xi")
        if not self.growth_b >= self.alpha:
            raise ConfigError("growth_b must be >= alpha", "growth_b")

    @property
    def ceiling(self) -> float:
        """xi / alpha, the right end of the limiting interval."""
        return self.xi / self.alpha

    def steps(self, n: int) -> np.ndarray:
        t = t_values(self.t_seq, n)
        bad = np.flatnonzero(~((t > 0) & (t <= 1)))
        if len(bad):
            raise ConfigError(f"T_{bad[0]} = {t[bad[0]]} outside (0, 1]", "t_seq")
        if n > 1 and np.any(np.diff(t) >= 0):
            raise ConfigError("T_n must be strictly decreasing", "t_seq")
        return t


@dataclass(frozen=True)
class NoiseModel:
    """Conditional step rule.

    ``bounded_multiplicative`` draws
    ``z' = (1 - a T) z + xi T + sigma T (z + 1) U`` with ``U ~ Uniform[-1, 1]``,
    so the increment satisfies ``|z' - z| <= (max(a, xi) + sigma) T (z + 1)``.
    """

    variant: str = DETERMINISTIC
    sigma: float = 0.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown noise variant {self.variant!r}", "noise.variant")
        if not (0.0 <= self.sigma <= 1.0):
            raise ConfigError("sigma must lie in [0, 1]", "noise.sigma")

    def required_growth(self, spec: RSSpecialSpec) -> float:
        if self.variant == EXAMPLE1:
            return float("inf")
        if self.variant == DETERMINISTIC:
            return max(spec.alpha, spec.xi)
        return max(spec.alpha, spec.xi) + self.sigma


@dataclass
class Path:
    values: np.ndarray
    seed: int
    spec_fingerprint: str
    path_id: int = 0
    diverged_at: int | None = None
    spikes: np.ndarray | None = None

    @property
    def diverged(self) -> bool:
        return self.diverged_at is not None

    @property
    def horizon(self) -> int:
        return len(self.values) - 1


# --- kernels -----------------------------------------------------------------

@njit(cache=True, nogil=True)
def _affine_kernel(z0, t, alpha, xi):
    n = t.shape[0]
    z = np.empty(n + 1)
    z[0] = z0
    for i in range(n):
        z[i + 1] = (1.0 - alpha * t[i]) * z[i] + xi * t[i]
    return z


@njit(cache=True, nogil=True)
def _noisy_kernel(z0, t, alpha, xi, sigma, u, cap):
    # returns (path, first negative index or -1, divergence index or -1)
    n = t.shape[0]
    z = np.empty(n + 1)
    z[0] = z0
    div = -1
    for i in range(n):
        if div >= 0:
            z[i + 1] = z[i]
            continue
        zi = z[i]
        nxt = (1.0 - alpha * t[i]) * zi + xi * t[i] + sigma * t[i] * (zi + 1.0) * (2.0 * u[i] - 1.0)
        if nxt < 0.0:
            return z, i, div
        if nxt > cap:
            div = i + 1
            z[i + 1] = zi
        else:
            z[i + 1] = nxt
    return z, -1, div


@njit(cache=True, nogil=True)
def _example1_kernel(u, cap):
    n = u.shape[0]
    z = np.empty(n + 1)
    spike = np.zeros(n, dtype=np.bool_)
    z[0] = 0.0
    div = -1
    for i in range(n):
        k = i + 1.0
        if div >= 0:
            z[i + 1] = z[i]
            continue
        nxt = (1.0 - k**-0.75) * z[i]
        if u[i] < 1.0 / k:
            nxt += k**0.25
            spike[i] = True
        if nxt > cap:
            div = i + 1
            z[i + 1] = z[i]
        else:
            z[i + 1] = nxt
    return z, spike, div


# --- simulators --------------------------------------------------------------

def iterate_rs_special_deterministic(spec: RSSpecialSpec, z0: float, horizon: int) -> Path:
    """Exact iteration of ``z_{n+1} = (1 - alpha T_n) z_n + xi T_n``."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if z0 < 0:
        raise ValueError("z0 must be non-negative")
    t = spec.steps(horizon)
    over = np.flatnonzero(spec.alpha * t > 1.0)
    if len(over):
        n = int(over[0])
        raise StepSizeError(f"alpha*T_n = {spec.alpha * t[n]:.6g} > 1 at n={n}", n)
    return Path(_affine_kernel(float(z0), t, spec.alpha, spec.xi), seed=0,
                spec_fingerprint=fingerprint(spec))


def example1_steps(n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(T_n, A_n, p_n) of the divergence example for n = 0..n-1."""
    k = np.arange(n, dtype=np.float64) + 1.0
    return k**-0.75, k**0.25, 1.0 / k


def example1_conditional_mean(z: float, n: int) -> float:
    """Mean of the next state computed branch by branch from the step rule."""
    k = n + 1.0
    T, A, p = k**-0.75, k**0.25, 1.0 / k
    base = (1.0 - T) * z
    return (1.0 - p) * base + p * (base + A)


def simulate_example1(horizon: int, seed: int, path_id: int = 0) -> Path:
    """``z_{n+1} = (1 - T_n) z_n + X_{n+1}`` from ``z_0 = 0``.

    ``X_{n+1} = (n+1)^{1/4}`` with probability ``1/(n+1)``, else 0.  Spike
    indices ``n`` (where ``X_{n+1} != 0``) are recorded on the path.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    u = path_uniforms(seed, path_id, horizon)
    z, spike, div = _example1_kernel(u, DIVERGENCE_CAP)
    return Path(z, seed, fingerprint({"process": EXAMPLE1}), path_id,
                diverged_at=None if div < 0 else int(div), spikes=np.flatnonzero(spike))


def simulate_rs_special(spec: RSSpecialSpec, noise: NoiseModel, z0: float, horizon: int,
                        seed: int, path_id: int = 0) -> Path:
    if noise.variant == EXAMPLE1:
        return simulate_example1(horizon, seed, path_id)
    if noise.variant == DETERMINISTIC:
        path = iterate_rs_special_deterministic(spec, z0, horizon)
        path.seed, path.path_id = seed, path_id
        return path
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if noise.required_growth(spec) > spec.growth_b * (1 + 1e-12):
        raise ConfigError(f"noise needs growth_b >= {noise.required_growth(spec)}", "growth_b")
    t = spec.steps(horizon)
    u = path_uniforms(seed, path_id, horizon)
    z, neg, div = _noisy_kernel(float(z0), t, spec.alpha, spec.xi, noise.sigma, u, DIVERGENCE_CAP)
    if neg >= 0:
        raise InvariantError(f"noise model produced a negative state at step n={neg}")
    return Path(z, seed, fingerprint((spec, noise)), path_id,
                diverged_at=None if div < 0 else int(div))


# --- general template --------------------------------------------------------

def _tail_ratio(x: np.ndarray) -> float:
    total = float(np.sum(x))
    if total <= 0:
        return 0.0
    return float(np.sum(x[len(x) // 2:])) / total


@dataclass(frozen=True)
class RSGeneralSpec:
    """Coefficient sequences and threshold for the general template.

    The built-in step rule drifts by ``-c_n (z - B)`` above ``B`` and by
    ``min(c_n (B - z), b_n (z + 1) / 2)`` below it, then adds zero-mean
    noise ``rho * min(room, mean) * U`` where ``room = b_n (z + 1) - |drift|``.
    The increment therefore never exceeds ``b_n (z + 1)`` and the next state
    stays non-negative.

    ``check_hypotheses`` certifies generated prefixes heuristically: the
    trailing half of a summable series must carry at most ``tail_tol`` of its
    mass, an unbounded one at least that much.
    """

    a_seq: Callable[[np.ndarray], np.ndarray]
    b_seq: Callable[[np.ndarray], np.ndarray]
    c_seq: Callable[[np.ndarray], np.ndarray]
    threshold_b: float
    rho: float = 0.5
    check_hypotheses: bool = True
    tail_tol: float = 0.02

    def __post_init__(self):
        if self.threshold_b < 0:
            raise ConfigError("threshold_b must be non-negative", "threshold_b")
        if not (0.0 <= self.rho <= 1.0):
            raise ConfigError("rho must lie in [0, 1]", "rho")

    def coefficients(self, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        idx = np.arange(n)
        a, b, c = (np.asarray(f(idx), dtype=np.float64) for f in (self.a_seq, self.b_seq, self.c_seq))
        for name, v in (("a", a), ("b", b), ("c", c)):
            if v.shape != (n,) or np.any(~np.isfinite(v)) or np.any(v < 0):
                raise ValueError(f"{name}_n must be finite and non-negative")
        if np.any(c > b):
            k = int(np.flatnonzero(c > b)[0])
            raise ValueError(f"c_n > b_n at n={k}: drift cannot respect the growth bound")
        if self.check_hypotheses:
            self.certify(a, b, c)
        return a, b, c

    def certify(self, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> None:
        if _tail_ratio(a) > self.tail_tol:
            raise ConfigError("partial sums of a_n do not look bounded", "a_seq")
        if _tail_ratio(b**2) > self.tail_tol:
            raise ConfigError("partial sums of b_n^2 do not look bounded", "b_seq")
        if _tail_ratio(c) < self.tail_tol:
            raise ConfigError("partial sums of c_n do not look unbounded", "c_seq")


@njit(cache=True, nogil=True)
def _general_kernel(z0, a, b, c, big_b, rho, u, cap):
    n = a.shape[0]
    z = np.empty(n + 1)
    z[0] = z0
    div = -1
    for i in range(n):
        zi = z[i]
        if div >= 0:
            z[i + 1] = zi
            continue
        if zi > big_b:
            drift = -c[i] * (zi - big_b)
        else:
            drift = min(c[i] * (big_b - zi), 0.5 * b[i] * (zi + 1.0))
        mean = zi + drift
        room = b[i] * (zi + 1.0) - abs(drift)
        amp = rho * min(room, mean)
        nxt = mean + amp * (2.0 * u[i] - 1.0)
        if nxt > cap:
            div = i + 1
            z[i + 1] = zi
        else:
            z[i + 1] = nxt
    return z, div


def simulate_rs_general(spec: RSGeneralSpec, z0: float, horizon: int, seed: int, path_id: int = 0) -> Path:
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    a, b, c = spec.coefficients(horizon)
    u = path_uniforms(seed, path_id, horizon)
    z, div = _general_kernel(float(z0), a, b, c, float(spec.threshold_b), spec.rho, u, DIVERGENCE_CAP)
    if np.any(z < 0):
        raise InvariantError("general step rule produced a negative state")
    fp = fingerprint({"a": a, "b": b, "c": c, "B": spec.threshold_b, "rho": spec.rho})
    return Path(z, seed, fp, path_id, diverged_at=None if div < 0 else int(div))


def general_from_special(spec: RSSpecialSpec, noise: NoiseModel | None = None) -> RSGeneralSpec:
    """Map (alpha, xi, T_n) to a_n = 0, b_n = growth * T_n, c_n = alpha T_n, B = xi / alpha."""
    growth = spec.growth_b if noise is None else max(spec.growth_b, noise.required_growth(spec))
    tv = lambda idx: t_values(spec.t_seq, len(idx))  # noqa: E731
    return RSGeneralSpec(
        a_seq=lambda idx: np.zeros(len(idx)),
        b_seq=lambda idx: growth * tv(idx),
        c_seq=lambda idx: spec.alpha * tv(idx),
        threshold_b=spec.ceiling,
    )


# --- diagnostics -------------------------------------------------------------

@dataclass(frozen=True)
class GrowthReport:
    ok: bool
    worst_ratio: float
    worst_index: int


def verify_growth_condition(path: Path | np.ndarray, t_seq: TSequence, b: float, rtol: float = 1e-12) -> GrowthReport:
    """Check ``|z_{n+1} - z_n| <= b T_n (z_n + 1)`` along a path."""
    z = np.asarray(path.values if isinstance(path, Path) else path, dtype=np.float64)
    if len(z) < 2:
        raise ValueError("path needs at least two values")
    if isinstance(path, Path) and path.diverged:
        z = z[: path.diverged_at]
    t = t_values(t_seq, len(z) - 1)
    ratio = np.abs(np.diff(z)) / (t * (z[:-1] + 1.0))
    k = int(np.argmax(ratio))
    worst = float(ratio[k])
    return GrowthReport(worst <= b * (1 + rtol), worst, k)


def gronwall_envelope(c: float, l: float, x0: float, a_seq) -> np.ndarray:
    """``(c + x0) exp(l * sum_{i<n} a_i)`` for n = 0..len(a_seq)."""
    a = np.asarray(a_seq, dtype=np.float64)
    partial = np.concatenate(([0.0], np.cumsum(a)))
    return (c + x0) * np.exp(l * partial)
