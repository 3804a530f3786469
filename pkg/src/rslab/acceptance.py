"""The acceptance suite: one function per criterion, each returning a
:class:`CriterionResult` with a one-line verdict.

Runtimes are measured after a short warm-up call so that one-off JIT
compilation is not charged to the criterion.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import analysis as an
from . import markov as mk
from . import processes as pr
from . import rl
from .errors import CalibrationError
from .harness.runner import example1_mean_audit, map_paths
from .rng import path_generator
from .schedules import Schedule, build_skeleton, select_regime, skeleton_report

HOLDOUT = 1_000_000  # path-id offset separating training and holdout blocks


@dataclass
class CriterionResult:
    id: str
    title: str
    passed: bool
    detail: str
    runtime: float
    limit: float

    @property
    def within_time(self) -> bool:
        return self.runtime < self.limit

    def line(self) -> str:
        status = "PASS" if self.passed and self.within_time else "FAIL"
        return f"{self.id} {status} [{self.runtime:.2f}s / {self.limit:g}s] {self.title}: {self.detail}"


def _timed(cid: str, title: str, limit: float, warmup: Callable[[], None], body: Callable[[], tuple[bool, str]]):
    warmup()
    start = time.perf_counter()
    passed, detail = body()
    return CriterionResult(cid, title, bool(passed), detail, time.perf_counter() - start, limit)


# --- AC1 -------------------------------------------------------------------------

def ac1(threads: int = 0) -> CriterionResult:
    spec = pr.RSSpecialSpec(1.0, 1.0, pr.PowerSequence(1.0, 0.75, 1.0), 1.0)
    N = 100_000

    def body():
        details, ok = [], True
        for z0 in (0.0, 10.0):
            z = pr.iterate_rs_special_deterministic(spec, z0, N).values
            d = an.dist_to_interval(z, spec.ceiling)
            mono = bool(np.all(np.diff(d[N // 2:]) <= 0))
            ok &= d[-1] <= 1e-3 and mono
            details.append(f"z0={z0:g}: d_N={d[-1]:.3g}, tail non-increasing={mono}")
        return ok, "; ".join(details)

    return _timed("AC1", "deterministic RS-Special convergence", 1.0,
                  lambda: pr.iterate_rs_special_deterministic(spec, 0.0, 10), body)


# --- AC2 -------------------------------------------------------------------------

def ac2(threads: int = 0, paths: int = 1000, horizon: int = 100_000) -> CriterionResult:
    def one(pid):
        p = pr.simulate_example1(horizon, 2024, pid)
        return float(p.values.max()), p.values if pid == 0 else None

    def body():
        res, _ = map_paths(one, paths, threads)
        frac = float(np.mean([r[0] > 5.0 for r in res]))
        audit = example1_mean_audit(res[0][1], horizon, stride=1)
        T, A, p = pr.example1_steps(horizon)
        identity = float(np.max(np.abs(p * A - T) / T))
        ok = frac >= 0.90 and audit <= 1e-12 and identity <= 1e-12
        return ok, f"fraction max>5 = {frac:.3f} (>= 0.90); mean audit rel err {audit:.2g}; p_n A_n = T_n rel err {identity:.2g}"

    return _timed("AC2", "Example-1 divergence", 30.0, lambda: pr.simulate_example1(10, 0), body)


# --- AC3 -------------------------------------------------------------------------

def ac3(threads: int = 0, paths: int = 200, horizon: int = 100_000) -> CriterionResult:
    spec = pr.RSSpecialSpec(1.0, 1.0, pr.PowerSequence(1.0, 0.75, 1.0), 1.5)
    noise = pr.NoiseModel(pr.BOUNDED_MULTIPLICATIVE, 0.5)

    def one(pid):
        path = pr.simulate_rs_special(spec, noise, 0.0, horizon, 3, pid)
        d = an.dist_to_interval(path.values, spec.ceiling)
        rep = pr.verify_growth_condition(path, spec.t_seq, spec.growth_b)
        return float(d[horizon - horizon // 10:].max()), rep.ok, rep.worst_ratio

    def body():
        res, _ = map_paths(one, paths, threads)
        worst = max(r[0] for r in res)
        growth_ok = all(r[1] for r in res)
        ratio = max(r[2] for r in res)
        return worst <= 0.05 and growth_ok, (f"tail max d = {worst:.4f} (<= 0.05); growth ok on all paths = {growth_ok} "
                                             f"(worst ratio {ratio:.3f} <= {spec.growth_b})")

    return _timed("AC3", "bounded-multiplicative noise converges to [0, xi/alpha]", 60.0,
                  lambda: pr.simulate_rs_special(spec, noise, 0.0, 10, 0), body)


# --- AC4 -------------------------------------------------------------------------

def ac4(threads: int = 0, paths: int = 1000, horizon: int = 100_000, eta: float = 0.5) -> CriterionResult:
    spec = pr.RSSpecialSpec(1.0, 1.0, pr.PowerSequence(1.0, 1.0, 3.0), 1.5)
    noise = pr.NoiseModel(pr.BOUNDED_MULTIPLICATIVE, 0.5)
    tail = horizon // 10
    half = paths // 2
    rec = np.arange(0, horizon + 1, 10)  # the mean curve is fitted on every 10th step

    def one(pid):
        d = an.dist_to_interval(pr.simulate_rs_special(spec, noise, 0.0, horizon, 4, pid).values, 1.0)
        return d[rec], float(an.rate_statistic(d, eta, tail)[0])

    def reduce(block):
        res, _ = map_paths(lambda i: one(block + i), half, threads)
        mean = np.sum([r[0] for r in res], axis=0) / half  # summed in path-id order
        return mean, np.array([r[1] for r in res])

    def body():
        _, train = reduce(0)
        mean, hold = reduce(HOLDOUT)
        tol = float(np.quantile(train, 0.975))
        frac = float(np.mean(hold <= tol))
        fit = an.fit_rate(mean, 0.5, times=rec)
        ok = fit.exponent >= eta / 2 - 0.05 and frac >= 0.95
        return ok, (f"fitted exponent {fit.exponent:.3f} (>= {eta / 2 - 0.05:.2f}); tol {tol:.4g} from training block; "
                    f"holdout pass rate {frac:.3f} (>= 0.95)")

    return _timed("AC4", "almost-sure rate certificate", 120.0,
                  lambda: pr.simulate_rs_special(spec, noise, 0.0, 10, 0), body)


# --- AC5 -------------------------------------------------------------------------

def ac5(threads: int = 0, paths: int = 1000, horizon: int = 20_000, delta: float = 0.1) -> CriterionResult:
    c, n0 = 2.0, 4.0
    spec = pr.RSSpecialSpec(1.0, 1.0, pr.PowerSequence(c, 1.0, n0), 1.5)
    noise = pr.NoiseModel(pr.BOUNDED_MULTIPLICATIVE, 0.5)

    def block(offset):
        res, _ = map_paths(lambda i: pr.simulate_rs_special(spec, noise, 0.0, horizon, 5, offset + i).values,
                           paths, threads)
        return an.dist_to_interval(np.array(res), 1.0)

    def body():
        train = block(0)
        env = an.calibrate_envelope(train, "rs", [delta], k=1, n0=n0)
        del train
        cov = an.envelope_coverage(block(HOLDOUT), env, delta)
        ok = cov.coverage >= 0.9 - 0.03
        return ok, (f"T_n = {c:g}/(n+{n0:g}); calibrated B' = {env.b_prime:.4g} (k=1, B={env.b_cap:g}); "
                    f"holdout coverage {cov.coverage:.3f} (>= 0.87)")

    return _timed("AC5", "concentration envelope holdout coverage", 180.0,
                  lambda: pr.simulate_rs_special(spec, noise, 0.0, 10, 0), body)


# --- AC6 -------------------------------------------------------------------------

def ac6(threads: int = 0, horizon: int = 1_000_000) -> CriterionResult:
    cases = [("LR1 nu=0.8", Schedule.lr1(1.0, 0.8)), ("LR2 nu=0.5", Schedule.lr2(1.0, 0.5))]

    def body():
        ok, parts = True, []
        for name, sched in cases:
            skel = build_skeleton(sched, select_regime(sched.kind, sched.nu), horizon)
            rep = skeleton_report(skel, sched)
            good = rep.lower_ok and rep.upper_ok and rep.m0 is not None and rep.m0 <= 100 and rep.lr_bound_stable
            ok &= good
            parts.append(f"{name}: {skel.n_segments} segments, brackets={rep.lower_ok and rep.upper_ok}, m0={rep.m0}, "
                         f"max ratio={rep.ratio_max_after_m0:.3f}, C={rep.lr_bound_c:.3f} (half {rep.lr_bound_c_half:.3f})")
        return ok, "; ".join(parts)

    return _timed("AC6", "skeleton construction lemmas", 10.0,
                  lambda: build_skeleton(Schedule.lr1(1.0, 0.8), select_regime("LR1", 0.8), 100), body)


# --- AC7 -------------------------------------------------------------------------

def ac7(threads: int = 0, seeds: int = 100, horizon: int = 1_000_000) -> CriterionResult:
    mdp, feats = rl.builtin_mdp("random5x2")
    cfg = rl.PolicyConfig(0.1, 1.0)
    sched = Schedule.lr1(1.0, 0.8)

    def body():
        skel = build_skeleton(sched, select_regime("LR1", 0.8), horizon)
        rep = skeleton_report(skel, sched)
        m0 = rep.m0

        def one(seed):
            run = rl.run_linear_q(mdp, feats, cfg, sched, horizon, seed)
            n = run.norms()
            rmax = np.maximum.accumulate(n)
            inc = an.skeleton_increment_check(n[skel.anchors] ** 2, skel.targets, m0)
            return run.diverged, float(rmax[-1]), float(rmax[-1] / rmax[horizon // 2] - 1), inc.worst_ratio

        res, _ = map_paths(one, seeds, threads)
        sup = max(r[1] for r in res)
        growth = max(r[2] for r in res)
        inc = max(r[3] for r in res)
        diverged = sum(r[0] for r in res)
        ok = diverged == 0 and sup < 1e6 and growth < 0.01 and m0 is not None and inc <= 16.0
        return ok, (f"{seeds} seeds: diverged={diverged}, sup ||w|| = {sup:.4g} (< 1e6), "
                    f"final-half running-max growth {100 * growth:.3f}% (< 1%), m0={m0}, "
                    f"max |dz|/(T_m(z_m+1)) = {inc:.3f} (<= 16)")

    return _timed("AC7", "linear Q-learning stability", 600.0,
                  lambda: rl.run_linear_q(mdp, feats, cfg, sched, 10, 0), body)


# --- AC8 -------------------------------------------------------------------------

def ac8(threads: int = 0, horizon: int = 10_000, seeds: int = 3) -> CriterionResult:
    cfg = rl.PolicyConfig(0.1, 1.0)
    sched = Schedule.lr1(1.0, 0.8)
    cases = [(name, *rl.builtin_mdp(name)) for name in ("random5x2", "small3x2")]

    def body():
        ok, parts = True, []
        for name, mdp, feats in cases:
            emb = rl.mdp_to_sa(mdp, feats, cfg)
            same = 0
            for seed in range(seeds):
                run = rl.run_linear_q(mdp, feats, cfg, sched, horizon, seed)
                sa = rl.run_sa(emb.kernel, emb.update, sched, horizon, seed, emb.anchor(int(run.states[0])))
                same += bool(np.array_equal(run.w_trajectory, sa.w_trajectory))
            ok &= same == seeds
            parts.append(f"{name} (|Y|={emb.kernel.state_count}): {same}/{seeds} seeds bitwise equal")
        return ok, "; ".join(parts)

    def warm():
        name, mdp, feats = cases[1]
        emb = rl.mdp_to_sa(mdp, feats, cfg)
        rl.run_linear_q(mdp, feats, cfg, sched, 5, 0)
        emb.kernel.matrix(np.zeros(feats.dim))
        emb.update(np.zeros(feats.dim), 0)

    return _timed("AC8", "SA-embedding equivalence", 10.0, warm, body)


# --- AC9 -------------------------------------------------------------------------

def _brute_tau(c: float, tau: float, alpha: float) -> int:
    n = 0
    while c * tau**n > alpha:
        n += 1
    return n


def ac9(threads: int = 0) -> CriterionResult:
    def body():
        rng = path_generator(9, 0)
        worst_tv = 0.0
        for _ in range(100):
            p = rng.dirichlet(np.ones(10), size=10)
            d = mk.stationary_distribution(p)
            v = np.full(10, 0.1)
            for _ in range(10_000):
                v = v @ p
            worst_tv = max(worst_tv, 0.5 * float(np.abs(d - v).sum()))
        mismatches = 0
        for _ in range(1000):
            c = float(rng.uniform(0.1, 10.0))
            tau = float(rng.uniform(0.01, 0.99))
            alpha = float(10 ** rng.uniform(-8, 0.5))
            mismatches += mk.tau_alpha(mk.MixingProfile(c, tau), alpha) != _brute_tau(c, tau, alpha)
        p2 = np.array([[0.9, 0.1], [0.5, 0.5]])
        kern = mk.ParamKernel(2, lambda w: p2, 1)
        prof = mk.total_variation_profile(kern, np.zeros(1), 40)
        closed = prof[0] * 0.4 ** np.arange(41)
        closed[closed < mk.TV_FLOOR] = 0.0
        err = float(np.max(np.abs(prof - closed)))
        ok = worst_tv <= 1e-8 and mismatches == 0 and err <= 1e-10
        return ok, (f"stationary vs power iteration max TV {worst_tv:.2g} (<= 1e-8); tau_alpha mismatches "
                    f"{mismatches}/1000; two-state profile error {err:.2g} (<= 1e-10)")

    return _timed("AC9", "Markov toolbox oracles", 10.0, lambda: None, body)


# --- AC10 ------------------------------------------------------------------------

def _sa_states(run: rl.LinearQRun, emb: rl.SAEmbedding) -> np.ndarray:
    ys = np.empty(run.horizon + 1, dtype=np.int64)
    ys[0] = emb.anchor(int(run.states[0]))
    lookup = {tuple(t): i for i, t in enumerate(emb.triples.tolist())}
    for t in range(run.horizon):
        ys[t + 1] = lookup[(int(run.states[t]), int(run.actions[t]), int(run.states[t + 1]))]
    return ys


def ac10(threads: int = 0, horizon: int = 30_000, seed: int = 0, growth_limit: float = 2.0) -> CriterionResult:
    mdp, feats = rl.builtin_mdp("small3x2")
    cfg = rl.PolicyConfig(0.1, 1.0)
    sched = Schedule.lr1(1.0, 0.8)

    def body():
        emb = rl.mdp_to_sa(mdp, feats, cfg)
        rl.check_sa_structure(emb)
        skel = build_skeleton(sched, select_regime("LR1", 0.8), horizon)
        m0 = skeleton_report(skel, sched).m0
        run = rl.run_linear_q(mdp, feats, cfg, sched, horizon, seed)
        probes = [np.zeros(feats.dim), run.w_trajectory[-1]]
        probes += [path_generator(10, i).normal(size=feats.dim) * 3 for i in range(4)]
        profile = mk.uniform_mixing_profile(emb.kernel, probes, 60)
        nd = an.noise_decomposition(run.w_trajectory, _sa_states(run, emb), sched, skel, emb.kernel, emb.update,
                                    profile, m0)
        growth = [nd.growth(i) for i in (0, 1, 3)]

        frozen = emb.kernel.matrix(np.zeros(feats.dim))
        const = mk.ParamKernel(emb.kernel.state_count, lambda w: frozen, feats.dim)
        sa = rl.run_sa(const, emb.update, sched, horizon, seed, emb.anchor(0))
        nd0 = an.noise_decomposition(sa.w_trajectory, sa.states, sched, skel, const, emb.update, profile, m0)
        s2_max = float(np.max(np.abs(nd0.s[1])))

        tele = max(nd.telescoping_error, nd0.telescoping_error)
        ok = (tele <= 1e-10 and s2_max == 0.0 and m0 is not None
              and all(g <= growth_limit for g in growth) and np.all(np.isfinite(nd.ratios)))
        r = nd.ratios[:, m0:].max(axis=1)
        return ok, (f"|Y|={emb.kernel.state_count}, {skel.n_segments} segments, m0={m0}; telescoping error {tele:.2g} "
                    f"(<= 1e-10); s2 with w-independent kernel max |.| = {s2_max:g}; max ratios s1/s2/s4 = "
                    f"{r[0]:.3g}/{r[1]:.3g}/{r[3]:.3g}, late/early growth {growth[0]:.2f}/{growth[1]:.2f}/{growth[2]:.2f} "
                    f"(<= {growth_limit:g}); s3/T_m ratio max {r[2]:.3g}")

    return _timed("AC10", "noise decomposition telescoping and scaling", 120.0, lambda: None, body)


CRITERIA = {"AC1": ac1, "AC2": ac2, "AC3": ac3, "AC4": ac4, "AC5": ac5,
            "AC6": ac6, "AC7": ac7, "AC8": ac8, "AC9": ac9, "AC10": ac10}


def run_all(threads: int = 0, only=None) -> list[CriterionResult]:
    ids = list(CRITERIA) if not only else [c.upper() for c in only]
    return [CRITERIA[c](threads=threads) for c in ids]
