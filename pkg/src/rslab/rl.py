"""Linear Q-learning with an epsilon-softmax behavior policy whose inverse
temperature shrinks as the weights grow, and its embedding into the generic
Markovian SA template over Y = (s, a, s').

The rollout and the embedded kernel share the same compiled helpers, so both
sides perform the same floating-point operations in the same order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from .errors import ConfigError
from .io import fingerprint
from .markov import ParamKernel, UpdateFn, check_structure, inverse_cdf
from .rng import path_generator, path_uniforms
from .schedules import Schedule

DIVERGENCE_CAP = 1e300


@dataclass(frozen=True, eq=False)
class MDP:
    n_states: int
    n_actions: int
    reward: np.ndarray  # (S, A)
    transition: np.ndarray  # (S, A, S)
    gamma: float
    initial: np.ndarray  # (S,)

    def __post_init__(self):
        S, A = self.n_states, self.n_actions
        r = np.ascontiguousarray(self.reward, dtype=np.float64)
        p = np.ascontiguousarray(self.transition, dtype=np.float64)
        p0 = np.ascontiguousarray(self.initial, dtype=np.float64)
        if S < 1 or A < 1:
            raise ConfigError("n_states and n_actions must be positive", "mdp.sizes")
        if r.shape != (S, A) or not np.all(np.isfinite(r)):
            raise ConfigError(f"reward must be a finite ({S}, {A}) matrix", "mdp.reward")
        if p.shape != (S, A, S) or np.any(p < 0) or np.any(np.abs(p.sum(axis=2) - 1) > 1e-12):
            raise ConfigError("each transition row p(.|s,a) must be a probability vector", "mdp.transition")
        if not (0.0 <= self.gamma < 1.0):
            raise ConfigError("gamma must lie in [0, 1)", "mdp.gamma")
        if p0.shape != (S,) or np.any(p0 < 0) or abs(p0.sum() - 1) > 1e-12:
            raise ConfigError("initial must be a probability vector", "mdp.initial")
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "transition", p)
        object.__setattr__(self, "initial", p0)


@dataclass(frozen=True, eq=False)
class FeatureMap:
    x: np.ndarray  # (S, A, d)

    def __post_init__(self):
        x = np.ascontiguousarray(self.x, dtype=np.float64)
        if x.ndim != 3 or not np.all(np.isfinite(x)):
            raise ConfigError("features must be a finite (S, A, d) array", "features")
        object.__setattr__(self, "x", x)

    @property
    def dim(self) -> int:
        return self.x.shape[2]

    def __call__(self, s: int, a: int) -> np.ndarray:
        return self.x[s, a]

    @classmethod
    def one_hot(cls, n_states: int, n_actions: int) -> FeatureMap:
        return cls(np.eye(n_states * n_actions).reshape(n_states, n_actions, -1))


@dataclass(frozen=True)
class PolicyConfig:
    epsilon: float = 0.1
    kappa0: float = 1.0
    adaptive: bool = True  # False keeps the temperature fixed at kappa0

    def __post_init__(self):
        if not (0.0 < self.epsilon < 1.0):
            raise ConfigError(f"epsilon must lie in (0, 1), got {self.epsilon}", "policy.epsilon")
        if not self.kappa0 > 0:
            raise ConfigError("kappa0 must be positive", "policy.kappa0")


@dataclass
class LinearQRun:
    w_trajectory: np.ndarray  # (horizon+1, d)
    states: np.ndarray  # S_0..S_horizon
    actions: np.ndarray  # A_0..A_{horizon-1}
    rewards: np.ndarray
    seed: int
    schedule_fingerprint: str
    diverged_at: int | None = None

    @property
    def diverged(self) -> bool:
        return self.diverged_at is not None

    @property
    def horizon(self) -> int:
        return len(self.actions)

    @property
    def transitions(self) -> list[tuple[int, int, float, int]]:
        return [(int(self.states[t]), int(self.actions[t]), float(self.rewards[t]), int(self.states[t + 1]))
                for t in range(self.horizon)]

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.w_trajectory, axis=1)


# --- shared compiled helpers --------------------------------------------------

@njit(cache=True, nogil=True)
def _dot(x, w):
    acc = 0.0
    for i in range(w.shape[0]):
        acc += x[i] * w[i]
    return acc


@njit(cache=True, nogil=True)
def _kappa(w, kappa0, adaptive):
    if not adaptive:
        return kappa0
    sq = 0.0
    for i in range(w.shape[0]):
        sq += w[i] * w[i]
    nrm = np.sqrt(sq)
    return kappa0 / max(1.0, nrm)


@njit(cache=True, nogil=True)
def _policy(xs, w, eps, kappa0, adaptive):
    # xs: (A, d) features of one state
    n_act = xs.shape[0]
    k = _kappa(w, kappa0, adaptive)
    logits = np.empty(n_act)
    for a in range(n_act):
        logits[a] = k * _dot(xs[a], w)
    top = logits.max()
    tot = 0.0
    for a in range(n_act):
        logits[a] = np.exp(logits[a] - top)
        tot += logits[a]
    out = np.empty(n_act)
    for a in range(n_act):
        out[a] = eps / n_act + (1.0 - eps) * (logits[a] / tot)
    return out


@njit(cache=True, nogil=True)
def _td_error(x, s, a, r, s2, gamma, w):
    # max over next actions; ties resolve to the lowest index
    best = _dot(x[s2, 0], w)
    for b in range(1, x.shape[1]):
        v = _dot(x[s2, b], w)
        if v > best:
            best = v
    return r + gamma * best - _dot(x[s, a], w)


@njit(cache=True, nogil=True)
def _h(x, s, a, r, s2, gamma, w):
    delta = _td_error(x, s, a, r, s2, gamma, w)
    return delta * x[s, a]


@njit(cache=True, nogil=True)
def _kernel_matrix(x, p, ys, ya, ys2, w, eps, kappa0, adaptive):
    n = ys.shape[0]
    mu = np.empty((x.shape[0], x.shape[1]))
    for s in range(x.shape[0]):
        mu[s] = _policy(x[s], w, eps, kappa0, adaptive)
    out = np.zeros((n, n))
    for i in range(n):
        s = ys2[i]
        for j in range(n):
            if ys[j] == s:
                out[i, j] = mu[s, ya[j]] * p[s, ya[j], ys2[j]]
    return out


@njit(cache=True, nogil=True)
def _h_table(x, r, ys, ya, ys2, gamma, w):
    n = ys.shape[0]
    out = np.empty((n, w.shape[0]))
    for i in range(n):
        out[i] = _h(x, ys[i], ya[i], r[ys[i], ya[i]], ys2[i], gamma, w)
    return out


@njit(cache=True, nogil=True)
def _sample_initial(p0, u):
    cum = 0.0
    last = 0
    for s in range(p0.shape[0]):
        if p0[s] > 0:
            cum += p0[s]
            last = s
            if cum > u:
                return s
    return last


@njit(cache=True, nogil=True)
def _rollout(x, p, r, gamma, p0, eps, kappa0, adaptive, alphas, u, w0, cap):
    n = alphas.shape[0]
    d = w0.shape[0]
    n_act = x.shape[1]
    n_st = x.shape[0]
    ws = np.empty((n + 1, d))
    states = np.empty(n + 1, dtype=np.int64)
    actions = np.empty(n, dtype=np.int64)
    rewards = np.empty(n)
    ws[0] = w0
    states[0] = _sample_initial(p0, u[0])
    div = -1
    for t in range(n):
        s = states[t]
        w = ws[t]
        mu = _policy(x[s], w, eps, kappa0, adaptive)
        # joint draw of (A_t, S_{t+1}) by a sequential cumulative sum in (a, s') order
        ut = u[t + 1]
        cum = 0.0
        pick_a = -1
        pick_s = -1
        last_a = 0
        last_s = 0
        for a in range(n_act):
            for s2 in range(n_st):
                if p[s, a, s2] > 0:
                    cum += mu[a] * p[s, a, s2]
                    last_a = a
                    last_s = s2
                    if pick_a < 0 and cum > ut:
                        pick_a = a
                        pick_s = s2
        if pick_a < 0:
            pick_a = last_a
            pick_s = last_s
        actions[t] = pick_a
        states[t + 1] = pick_s
        rewards[t] = r[s, pick_a]
        if div >= 0:
            ws[t + 1] = w
            continue
        hv = _h(x, s, pick_a, r[s, pick_a], pick_s, gamma, w)
        nxt = w + alphas[t] * hv
        ok = True
        for i in range(d):
            if not np.isfinite(nxt[i]) or abs(nxt[i]) > cap:
                ok = False
        if ok:
            ws[t + 1] = nxt
        else:
            div = t + 1
            ws[t + 1] = w
    return ws, states, actions, rewards, div


# --- public operations --------------------------------------------------------

def kappa(w, kappa0: float) -> float:
    """kappa0 / max(1, ||w||)."""
    return float(_kappa(np.asarray(w, dtype=np.float64), float(kappa0), True))


def behavior_policy(w, s: int, cfg: PolicyConfig, features: FeatureMap) -> np.ndarray:
    return _policy(features.x[s], np.asarray(w, dtype=np.float64), cfg.epsilon, cfg.kappa0, cfg.adaptive)


def q_values(w, features: FeatureMap) -> np.ndarray:
    return features.x @ np.asarray(w, dtype=np.float64)


def linear_q_step(w, transition, alpha_t: float, features: FeatureMap, gamma: float) -> np.ndarray:
    s, a, r, s2 = transition
    w = np.asarray(w, dtype=np.float64)
    return w + alpha_t * _h(features.x, int(s), int(a), float(r), int(s2), float(gamma), w)


def _check_shapes(mdp: MDP, features: FeatureMap) -> None:
    if features.x.shape[:2] != (mdp.n_states, mdp.n_actions):
        raise ConfigError("feature map does not match the MDP's state/action counts", "features")


def run_linear_q(mdp: MDP, features: FeatureMap, cfg: PolicyConfig, schedule: Schedule, horizon: int,
                 seed: int, path_id: int = 0, w0=None) -> LinearQRun:
    """Closed-loop rollout.

    Uniform 0 of the path's stream draws S_0; uniform t+1 draws
    (A_t, S_{t+1}) jointly.  Non-finite or astronomically large weights
    freeze the run and set ``diverged_at``.
    """
    _check_shapes(mdp, features)
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    w0 = np.zeros(features.dim) if w0 is None else np.asarray(w0, dtype=np.float64)
    u = path_uniforms(seed, path_id, horizon + 1)
    ws, states, actions, rewards, div = _rollout(
        features.x, mdp.transition, mdp.reward, mdp.gamma, mdp.initial,
        cfg.epsilon, cfg.kappa0, cfg.adaptive, schedule.alphas(horizon), u, w0, DIVERGENCE_CAP)
    return LinearQRun(ws, states, actions, rewards, seed, fingerprint(schedule),
                      diverged_at=None if div < 0 else int(div))


# --- SA embedding -------------------------------------------------------------

@dataclass(frozen=True)
class SAEmbedding:
    kernel: ParamKernel
    update: UpdateFn
    triples: np.ndarray  # (|Y|, 3) rows (s, a, s')

    def index(self, s: int, a: int, s2: int) -> int:
        hit = np.flatnonzero((self.triples[:, 0] == s) & (self.triples[:, 1] == a) & (self.triples[:, 2] == s2))
        if len(hit) == 0:
            raise KeyError((s, a, s2))
        return int(hit[0])

    def anchor(self, s: int) -> int:
        """First triple (in Y order) ending in state ``s``; stands in for Y_0."""
        hit = np.flatnonzero(self.triples[:, 2] == s)
        if len(hit) == 0:
            raise ConfigError(f"state {s} is never entered, so no triple ends there", "mdp.initial")
        return int(hit[0])


def mdp_to_sa(mdp: MDP, features: FeatureMap, cfg: PolicyConfig) -> SAEmbedding:
    """Y = {(s,a,s') : p(s'|s,a) > 0} in lexicographic order, with
    ``P_w(y, y~) = 1[s~ = s'] mu_w(a~|s~) p(s~'|s~,a~)`` and the TD update as H."""
    _check_shapes(mdp, features)
    triples = np.argwhere(mdp.transition > 0).astype(np.int64)
    ys, ya, ys2 = (np.ascontiguousarray(triples[:, i]) for i in range(3))
    x, p, r, g = features.x, mdp.transition, mdp.reward, mdp.gamma
    eps, k0, adaptive = cfg.epsilon, cfg.kappa0, cfg.adaptive

    def kernel_fn(w):
        return _kernel_matrix(x, p, ys, ya, ys2, np.ascontiguousarray(w, dtype=np.float64), eps, k0, adaptive)

    def table_fn(w):
        return _h_table(x, r, ys, ya, ys2, g, np.ascontiguousarray(w, dtype=np.float64))

    def h_fn(w, y):
        return _h(x, ys[y], ya[y], r[ys[y], ya[y]], ys2[y], g, np.ascontiguousarray(w, dtype=np.float64))

    xn = np.linalg.norm(x, axis=2)
    lip = 0.0
    for s, a, s2 in triples:
        lip = max(lip, xn[s, a] * (g * xn[s2].max() + xn[s, a]), abs(r[s, a]) * xn[s, a])
    labels = tuple(tuple(int(v) for v in row) for row in triples)
    kernel = ParamKernel(len(triples), kernel_fn, features.dim, labels)
    return SAEmbedding(kernel, UpdateFn(features.dim, h_fn, float(lip), table_fn), triples)


@dataclass
class SARun:
    w_trajectory: np.ndarray
    states: np.ndarray  # Y_0..Y_horizon
    uniforms: np.ndarray
    diverged_at: int | None = None


def run_sa(kernel: ParamKernel, update: UpdateFn, schedule: Schedule, horizon: int, seed: int, y0: int,
           w0=None, path_id: int = 0) -> SARun:
    """Generic ``w_{t+1} = w_t + alpha_t H(w_t, Y_{t+1})`` with ``Y_{t+1} ~ P_{w_t}(Y_t, .)``.

    Step t uses uniform t+1 of the path's stream (uniform 0 is reserved for
    initial-state draws), matching :func:`run_linear_q`.
    """
    w = np.zeros(update.dim) if w0 is None else np.asarray(w0, dtype=np.float64)
    u = path_uniforms(seed, path_id, horizon + 1)[1:]
    alphas = schedule.alphas(horizon)
    ws = np.empty((horizon + 1, update.dim))
    states = np.empty(horizon + 1, dtype=np.int64)
    ws[0], states[0] = w, y0
    div = None
    for t in range(horizon):
        states[t + 1] = inverse_cdf(kernel.matrix(ws[t])[states[t]], u[t])
        if div is not None:
            ws[t + 1] = ws[t]
            continue
        nxt = ws[t] + alphas[t] * update(ws[t], int(states[t + 1]))
        if not np.all(np.isfinite(nxt)) or np.any(np.abs(nxt) > DIVERGENCE_CAP):
            div = t + 1
            ws[t + 1] = ws[t]
        else:
            ws[t + 1] = nxt
    return SARun(ws, states, u, div)


def check_sa_structure(emb: SAEmbedding, ws=()) -> None:
    """Irreducibility/aperiodicity of P_w at the uniform-policy point w = 0 and at each given w."""
    check_structure(emb.kernel.matrix(np.zeros(emb.kernel.dim)))
    for w in ws:
        check_structure(emb.kernel.matrix(w))


# --- MDP corpus -----------------------------------------------------------------

def random_mdp(n_states: int, n_actions: int, dim: int, gamma: float = 0.9, seed: int = 0) -> tuple[MDP, FeatureMap]:
    """Dirichlet(1) transitions, rewards U[0,1], unit-norm Gaussian features, uniform p0."""
    rng = path_generator(seed, 0)
    p = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    p /= p.sum(axis=2, keepdims=True)
    r = rng.random((n_states, n_actions))
    x = rng.standard_normal((n_states, n_actions, dim))
    x /= np.linalg.norm(x, axis=2, keepdims=True)
    mdp = MDP(n_states, n_actions, r, p, gamma, np.full(n_states, 1.0 / n_states))
    return mdp, FeatureMap(x)


def baird_mdp(gamma: float = 0.99) -> tuple[MDP, FeatureMap]:
    """Seven-state star: action 0 jumps uniformly to states 0-5, action 1 to state 6.

    State features are the classic 8-dimensional ones; action features are
    their outer product with the action indicator (d = 16).
    """
    S, A = 7, 2
    phi = np.zeros((S, 8))
    for s in range(6):
        phi[s, s], phi[s, 7] = 2.0, 1.0
    phi[6, 6], phi[6, 7] = 1.0, 2.0
    x = np.zeros((S, A, 16))
    for a in range(A):
        x[:, a, 8 * a: 8 * a + 8] = phi
    p = np.zeros((S, A, S))
    p[:, 0, :6] = 1.0 / 6.0
    p[:, 1, 6] = 1.0
    return MDP(S, A, np.zeros((S, A)), p, gamma, np.full(S, 1.0 / S)), FeatureMap(x)


def small_mdp(seed: int = 3) -> tuple[MDP, FeatureMap]:
    """Three states, two actions, every transition possible (|Y| = 18), d = 2."""
    return random_mdp(3, 2, 2, gamma=0.9, seed=seed)


BUILTIN = {
    "random5x2": lambda: random_mdp(5, 2, 3, gamma=0.9, seed=2),
    "small3x2": small_mdp,
    "baird": baird_mdp,
}


def builtin_mdp(name: str) -> tuple[MDP, FeatureMap]:
    if name not in BUILTIN:
        raise ConfigError(f"unknown built-in MDP {name!r}; choose from {sorted(BUILTIN)}", "mdp.name")
    return BUILTIN[name]()


def write_mdp(path: str | Path, mdp: MDP, features: FeatureMap) -> Path:
    """Plain-text corpus file with [sizes], [gamma], [initial], [reward], [transition], [features]."""
    S, A, d = mdp.n_states, mdp.n_actions, features.dim
    f = lambda v: " ".join(f"{float(t):.17g}" for t in v)  # noqa: E731
    lines = ["[sizes]", f"{S} {A} {d}", "[gamma]", f"{mdp.gamma:.17g}", "[initial]", f(mdp.initial), "[reward]"]
    lines += [f(row) for row in mdp.reward]
    lines.append("[transition]")
    lines += [f(mdp.transition[s, a]) for s in range(S) for a in range(A)]
    lines.append("[features]")
    lines += [f(features.x[s, a]) for s in range(S) for a in range(A)]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    return path


def read_mdp(path: str | Path) -> tuple[MDP, FeatureMap]:
    sections: dict[str, list[list[float]]] = {}
    current = None
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            sections[current] = []
            continue
        if current is None:
            raise ConfigError(f"line {lineno}: data before any section header", "mdp")
        try:
            sections[current].append([float(v) for v in line.split()])
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: {exc}", f"mdp.{current}") from None
    for name in ("sizes", "gamma", "initial", "reward", "transition", "features"):
        if name not in sections:
            raise ConfigError(f"missing section [{name}]", f"mdp.{name}")
    S, A, d = (int(v) for v in sections["sizes"][0])
    try:
        reward = np.array(sections["reward"]).reshape(S, A)
        trans = np.array(sections["transition"]).reshape(S, A, S)
        feats = np.array(sections["features"]).reshape(S, A, d)
    except ValueError as exc:
        raise ConfigError(f"section shapes do not match [sizes]: {exc}", "mdp") from None
    mdp = MDP(S, A, reward, trans, sections["gamma"][0][0], np.array(sections["initial"][0]))
    return mdp, FeatureMap(feats)
