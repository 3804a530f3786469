"""Finite Markov kernels whose transition matrix depends on a parameter w.

Total variation is reported with the unhalved convention
``sum_y' |P^n(y, y') - d(y')|``, maximized over the start state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import optimize, sparse, stats
from scipy.sparse import csgraph

from .errors import ConfigError, InvariantError, StructureError

ROW_TOL = 1e-12
TV_FLOOR = 1e-12


@dataclass(frozen=True)
class ParamKernel:
    state_count: int
    kernel_fn: Callable[[np.ndarray], np.ndarray]
    dim: int
    labels: tuple | None = None

    def matrix(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (self.dim,):
            raise ValueError(f"w must have shape ({self.dim},), got {w.shape}")
        p = np.asarray(self.kernel_fn(w), dtype=np.float64)
        n = self.state_count
        if p.shape != (n, n):
            raise InvariantError(f"kernel returned shape {p.shape}, expected {(n, n)}")
        if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > ROW_TOL):
            raise InvariantError("kernel returned a matrix that is not row-stochastic")
        return p


@dataclass(frozen=True)
class MixingProfile:
    c_mix: float
    tau_rate: float

    def bound(self, n) -> np.ndarray:
        return self.c_mix * self.tau_rate ** np.asarray(n, dtype=np.float64)


@dataclass(frozen=True)
class UpdateFn:
    """H(w, y) with a claimed Lipschitz constant.

    ``table_fn(w)``, when given, returns all rows ``H(w, y)`` at once as a
    ``(|Y|, d)`` array.
    """

    dim: int
    h_fn: Callable[[np.ndarray, int], np.ndarray]
    lip_h: float
    table_fn: Callable[[np.ndarray], np.ndarray] | None = None

    def __call__(self, w, y: int) -> np.ndarray:
        return np.asarray(self.h_fn(np.asarray(w, dtype=np.float64), y), dtype=np.float64)

    def table(self, w, state_count: int) -> np.ndarray:
        w = np.asarray(w, dtype=np.float64)
        if self.table_fn is not None:
            return np.asarray(self.table_fn(w), dtype=np.float64)
        return np.array([self.h_fn(w, y) for y in range(state_count)], dtype=np.float64)


# --- structure ---------------------------------------------------------------

def chain_period(p: np.ndarray) -> int:
    """Period of an irreducible chain, from BFS levels: gcd of level[u]+1-level[v] over edges."""
    n = p.shape[0]
    level = np.full(n, -1, dtype=np.int64)
    level[0] = 0
    queue = [0]
    for u in queue:
        for v in np.flatnonzero(p[u] > 0):
            if level[v] < 0:
                level[v] = level[u] + 1
                queue.append(int(v))
    g = 0
    rows, cols = np.nonzero(p > 0)
    for u, v in zip(rows, cols):
        g = math.gcd(g, int(abs(level[u] + 1 - level[v])))
    return g


def check_structure(p: np.ndarray) -> None:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise ValueError("transition matrix must be square")
    n_comp, _ = csgraph.connected_components(sparse.csr_matrix(p > 0), directed=True, connection="strong")
    if n_comp != 1:
        raise StructureError(f"chain is reducible ({n_comp} communicating classes)", "irreducible")
    period = chain_period(p)
    if period != 1:
        raise StructureError(f"chain is periodic with period {period}", "aperiodic")


def _power_iteration(p: np.ndarray, iters: int = 100_000, tol: float = 1e-15) -> np.ndarray:
    d = np.full(p.shape[0], 1.0 / p.shape[0])
    for _ in range(iters):
        nxt = d @ p
        nxt /= nxt.sum()
        if np.abs(nxt - d).sum() < tol:
            return nxt
        d = nxt
    return d


def stationary_distribution(p: np.ndarray, check: bool = True) -> np.ndarray:
    """Solve dP = d, sum d = 1; falls back to power iteration if the solve is poor."""
    p = np.asarray(p, dtype=np.float64)
    if check:
        check_structure(p)
    n = p.shape[0]
    a = p.T - np.eye(n)
    a[-1, :] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    try:
        d = np.linalg.solve(a, rhs)
    except np.linalg.LinAlgError:
        d = _power_iteration(p)
    if np.any(d <= 0) or np.abs(d @ p - d).sum() > 1e-10:
        d = _power_iteration(p)
    d = d / d.sum()
    residual = np.abs(d @ p - d).sum()
    if residual > 1e-10 or np.any(d <= 0):
        raise InvariantError(f"stationary solve did not converge (residual {residual:.3g})")
    return d


# --- mixing ------------------------------------------------------------------

def matrix_tv_profile(p: np.ndarray, n_max: int, d: np.ndarray | None = None) -> np.ndarray:
    if d is None:
        d = stationary_distribution(p)
    m = np.eye(p.shape[0])
    out = np.empty(n_max + 1)
    for n in range(n_max + 1):
        out[n] = np.max(np.abs(m - d).sum(axis=1))
        m = m @ p
    out[out < TV_FLOOR] = 0.0
    return out


def total_variation_profile(kernel: ParamKernel, w, n_max: int) -> np.ndarray:
    """s(n) = max_y sum_y' |P_w^n(y, y') - d_w(y')| for n = 0..n_max.

    Values below 1e-12 are reported as exactly 0.
    """
    if n_max < 0:
        raise ValueError("n_max must be non-negative")
    return matrix_tv_profile(kernel.matrix(w), n_max)


def fit_mixing_profile(tv_profile: Sequence[float]) -> MixingProfile:
    """Geometric envelope c * tau^n dominating the profile at every n.

    tau comes from a least-squares line through log s(n) over the positive
    entries with n >= 1; c is then raised until the envelope dominates.
    """
    s = np.asarray(tv_profile, dtype=np.float64)
    if np.all(s <= 0):
        return MixingProfile(1.0, 0.0)
    n = np.arange(len(s))
    pos = (s > 0) & (n >= 1)
    if pos.sum() < 2:
        return MixingProfile(float(np.max(s)), 0.0)
    slope = np.polyfit(n[pos], np.log(s[pos]), 1)[0]
    tau = float(np.exp(slope))
    keep = s > 0
    c = float(np.max(s[keep] / tau ** n[keep]))
    return MixingProfile(c, tau)


def uniform_mixing_profile(kernel: ParamKernel, ws: Sequence, n_max: int) -> MixingProfile:
    """Fit one envelope to the pointwise max of the profiles at several w."""
    prof = np.max([total_variation_profile(kernel, w, n_max) for w in ws], axis=0)
    return fit_mixing_profile(prof)


def tau_alpha(profile: MixingProfile, alpha: float) -> int:
    """min{n >= 0 : c * tau^n <= alpha}."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    c, tau = profile.c_mix, profile.tau_rate
    if tau >= 1.0:
        raise ConfigError(f"non-mixing profile: tau_rate={tau} >= 1", "tau_rate")
    if c <= alpha:
        return 0
    if tau == 0.0:
        return 1
    n = max(0, math.ceil(math.log(alpha / c) / math.log(tau)))
    while n > 0 and c * tau ** (n - 1) <= alpha:
        n -= 1
    while c * tau**n > alpha:
        n += 1
    return n


# --- sampling ----------------------------------------------------------------

def inverse_cdf(row: np.ndarray, u: float) -> int:
    """Smallest index whose cumulative mass exceeds u, clamped to the last positive entry."""
    cdf = np.cumsum(row)
    k = int(np.searchsorted(cdf, u, side="right"))
    if k >= len(row) or row[k] <= 0:
        k = min(k, len(row) - 1)
        while row[k] <= 0:
            k -= 1
    return k


def sample_step(kernel: ParamKernel, w, y: int, rng) -> int:
    """One transition from ``y`` under P_w.  ``rng`` is a Generator or a uniform in [0, 1)."""
    if not (0 <= y < kernel.state_count):
        raise ValueError(f"state {y} out of range")
    u = float(rng) if isinstance(rng, (float, np.floating)) else float(rng.random())
    return inverse_cdf(kernel.matrix(w)[y], u)


def expected_update(kernel: ParamKernel, h: UpdateFn, w) -> np.ndarray:
    """h(w) = sum_y d_w(y) H(w, y)."""
    d = stationary_distribution(kernel.matrix(w))
    return d @ h.table(w, kernel.state_count)


def kernel_lipschitz_ratio(kernel: ParamKernel, w1, w2) -> float:
    """||P_w1 - P_w2||_2 (1 + ||w1|| + ||w2||) / ||w1 - w2||."""
    w1 = np.asarray(w1, dtype=np.float64)
    w2 = np.asarray(w2, dtype=np.float64)
    gap = np.linalg.norm(w1 - w2)
    if gap == 0:
        raise ValueError("w1 and w2 must differ")
    diff = kernel.matrix(w1) - kernel.matrix(w2)
    return float(np.linalg.norm(diff, 2) * (1 + np.linalg.norm(w1) + np.linalg.norm(w2)) / gap)


def lipschitz_probe(h: UpdateFn, state_count: int, probes: np.ndarray) -> float:
    """Probe sup of ||H(w1,y)-H(w2,y)||/||w1-w2|| and ||H(0,y)|| over consecutive probe pairs."""
    probes = np.asarray(probes, dtype=np.float64)
    best = float(np.max(np.linalg.norm(h.table(np.zeros(h.dim), state_count), axis=1)))
    tables = [h.table(w, state_count) for w in probes]
    for i in range(len(probes) - 1):
        gap = np.linalg.norm(probes[i] - probes[i + 1])
        if gap > 0:
            best = max(best, float(np.max(np.linalg.norm(tables[i] - tables[i + 1], axis=1)) / gap))
    return best


# --- chains and the frozen auxiliary chain -----------------------------------

@dataclass
class ChainRecord:
    """States Y_0..Y_T, parameters w_0..w_T and the uniforms that drove each transition.

    Transition k -> k+1 used ``uniforms[k]`` under ``P_{w_k}``.
    """

    states: np.ndarray
    ws: np.ndarray
    uniforms: np.ndarray


def simulate_chain(kernel: ParamKernel, ws: np.ndarray, y0: int, uniforms: np.ndarray) -> ChainRecord:
    """Drive the chain with a given parameter path (one matrix per step)."""
    ws = np.asarray(ws, dtype=np.float64)
    n = len(uniforms)
    if len(ws) < n + 1:
        raise ValueError("need one parameter per state")
    states = np.empty(n + 1, dtype=np.int64)
    states[0] = y0
    for k in range(n):
        states[k + 1] = inverse_cdf(kernel.matrix(ws[k])[states[k]], uniforms[k])
    return ChainRecord(states, ws[: n + 1], np.asarray(uniforms, dtype=np.float64))


def simulate_auxiliary(kernel: ParamKernel, base: ChainRecord, t: int, tau: int, steps: int) -> np.ndarray:
    """The frozen chain: equal to the base chain through index t - tau, then
    driven by ``P_{w_{t-tau}}`` with the base chain's uniforms index-for-index.

    Returns states for indices 0 .. t - tau + steps.
    """
    if tau < 0 or tau > t:
        raise ValueError(f"need 0 <= tau <= t, got tau={tau}, t={t}")
    start = t - tau
    if start + steps > len(base.uniforms):
        raise ValueError("base path has too few uniforms for the requested steps")
    frozen = kernel.matrix(base.ws[start])
    out = np.empty(start + steps + 1, dtype=np.int64)
    out[: start + 1] = base.states[: start + 1]
    for k in range(start, start + steps):
        out[k + 1] = inverse_cdf(frozen[out[k]], base.uniforms[k])
    return out


# --- drift assumption --------------------------------------------------------

@dataclass(frozen=True)
class DriftReport:
    c1_hat: float
    c2_hat: float
    feasible: bool
    violations: list = field(default_factory=list)  # (w, <w, h(w)>) pairs


def sphere_points(dim: int, count: int) -> np.ndarray:
    """Deterministic quasi-uniform directions: unscrambled Halton -> normal quantiles -> unit sphere."""
    if dim == 1:
        return np.array([[1.0], [-1.0]])[: max(count, 2)]
    u = stats.qmc.Halton(d=dim, scramble=False).random(count + 1)[1:]
    z = stats.norm.ppf(np.clip(u, 1e-12, 1 - 1e-12))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def drift_scan(kernel: ParamKernel | None, h, radii: Sequence[float], directions_per_radius: int,
               dim: int | None = None) -> DriftReport:
    """Fit <w, h(w)> <= -C1 ||w||^2 + C2 over probes on spheres.

    ``h`` is an UpdateFn (expected update taken under ``kernel``) or, when
    ``kernel`` is None, a plain callable w -> h(w) on ``dim``-vectors.  C1 is first held at
    half the outer-shell slope while C2 >= 0 is minimized; C1 is then
    maximized at that C2.
    """
    radii = sorted(float(r) for r in radii)
    if not radii or radii[0] <= 0:
        raise ValueError("radii must be non-empty and positive")
    if kernel is None:
        if dim is None:
            raise ValueError("dim is required when no kernel is given")
        hw = h
    else:
        hw = lambda w: expected_update(kernel, h, w)  # noqa: E731
        dim = kernel.dim
    dirs = sphere_points(dim, directions_per_radius)
    ws, g, r2 = [], [], []
    for r in radii:
        for u in dirs:
            w = r * u
            ws.append(w)
            g.append(float(np.dot(w, hw(w))))
            r2.append(r * r)
    g, r2 = np.array(g), np.array(r2)
    outer = r2 == r2.max()
    slope = float(np.min(-g[outer] / r2[outer]))
    if slope <= 0:
        k = int(np.argmax(np.where(outer, g / r2, -np.inf)))
        return DriftReport(0.0, float("inf"), False, [(ws[k], float(g[k]))])

    a_ub = np.column_stack([r2, -np.ones_like(r2)])
    b_ub = -g
    first = optimize.linprog([0.0, 1.0], A_ub=a_ub, b_ub=b_ub, bounds=[(0.5 * slope, None), (0, None)],
                             method="highs")
    if not first.success:
        k = int(np.argmax(g / r2))
        return DriftReport(0.0, float("inf"), False, [(ws[k], float(g[k]))])
    c2 = float(first.x[1])
    second = optimize.linprog([-1.0, 0.0], A_ub=a_ub, b_ub=b_ub,
                              bounds=[(0.5 * slope, None), (0, c2 * (1 + 1e-9) + 1e-12)], method="highs")
    c1 = float(second.x[0]) if second.success else float(first.x[0])
    slack = g + c1 * r2 - c2
    # tolerance matches the LP solver's primal feasibility tolerance
    viol = [(ws[i], float(g[i])) for i in np.flatnonzero(slack > 1e-7 * (1 + np.abs(g)))]
    return DriftReport(c1, c2, True, viol)


# --- kernel-table files ------------------------------------------------------

def _softmax_weights(w: np.ndarray) -> np.ndarray:
    kappa = 1.0 / max(1.0, float(np.linalg.norm(w)))
    logits = np.concatenate(([0.0], kappa * w))
    e = np.exp(logits - logits.max())
    return e / e.sum()


def load_kernel_table(path: str | Path) -> tuple[ParamKernel, UpdateFn | None]:
    """Read a kernel-table file.

    Layout (whitespace separated, ``#`` comments)::

        <|Y|> <d>
        d+1 blocks of |Y| rows with |Y| entries   (matrices M_0..M_d)
        optional: |Y| rows of d*d + d entries    (A_y row-major, then b_y)

    ``P_w = sum_i pi_i(w) M_i`` with ``pi = softmax([0, kappa_w w])`` and
    ``kappa_w = 1 / max(1, ||w||)``; ``H(w, y) = A_y w + b_y``.
    """
    tokens = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            tokens.extend(line.split())
    if len(tokens) < 2:
        raise ConfigError("missing header '<|Y|> <d>'", "header")
    n, d = int(tokens[0]), int(tokens[1])
    vals = np.array([float(v) for v in tokens[2:]])
    need = (d + 1) * n * n
    if len(vals) < need:
        raise ConfigError(f"expected {need} matrix entries, found {len(vals)}", "matrices")
    mats = vals[:need].reshape(d + 1, n, n)
    for i, m in enumerate(mats):
        if np.any(m < 0) or np.any(np.abs(m.sum(axis=1) - 1) > ROW_TOL):
            raise ConfigError(f"matrix {i} is not row-stochastic", f"matrices[{i}]")
    rest = vals[need:]

    def kernel_fn(w):
        return np.tensordot(_softmax_weights(w), mats, axes=1)

    kernel = ParamKernel(n, kernel_fn, d)
    if len(rest) == 0:
        return kernel, None
    if len(rest) != n * (d * d + d):
        raise ConfigError(f"update section needs {n * (d * d + d)} entries, found {len(rest)}", "update")
    rows = rest.reshape(n, d * d + d)
    a = rows[:, : d * d].reshape(n, d, d)
    b = rows[:, d * d:]
    lip = max(float(np.max([np.linalg.norm(ay, 2) for ay in a])), float(np.max(np.linalg.norm(b, axis=1))))
    update = UpdateFn(d, lambda w, y: a[y] @ w + b[y], lip, table_fn=lambda w: a @ w + b)
    return kernel, update
