"""Run a validated experiment config end to end and write its output bundle."""

from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .. import __version__
from .. import analysis as an
from .. import processes as pr
from .. import rl
from ..errors import CalibrationError, InsufficientDataError
from ..io import fingerprint, read_blocks, write_blocks, write_csv
from ..markov import load_kernel_table
from ..schedules import build_skeleton, select_regime, skeleton_report
from .config import ExperimentConfig


@dataclass
class Verdict:
    id: str  # acceptance criterion or operation the check instantiates
    check: str
    passed: bool
    value: float | None = None
    threshold: float | None = None

    def to_dict(self) -> dict:
        return {"id": self.id, "check": self.check, "passed": bool(self.passed),
                "value": _jsonable(self.value), "threshold": _jsonable(self.threshold)}


def _jsonable(x):
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else str(x)


@dataclass
class OutputBundle:
    out_dir: Path
    manifest: dict
    summary: dict
    verdicts: list[Verdict] = field(default_factory=list)
    files: list[str] = field(default_factory=list)

    @property
    def all_passed(self) -> bool:
        return all(v.passed for v in self.verdicts)


def worker_count(threads: int) -> int:
    return threads if threads > 0 else (os.cpu_count() or 1)


def map_paths(fn: Callable[[int], object], n_paths: int, threads: int) -> tuple[list, bool]:
    """Run ``fn(path_id)`` for every path; results come back in path-id order.

    Returns (results, partial).  An interrupt cancels pending paths and the
    completed prefix is returned with ``partial=True``.
    """
    n_workers = min(worker_count(threads), n_paths)
    if n_workers == 1:
        out = []
        try:
            for i in range(n_paths):
                out.append(fn(i))
        except KeyboardInterrupt:
            return out, True
        return out, False
    with ThreadPoolExecutor(n_workers) as pool:
        futures = [pool.submit(fn, i) for i in range(n_paths)]
        out = []
        try:
            for f in futures:
                out.append(f.result())
        except KeyboardInterrupt:
            for f in futures:
                f.cancel()
            return out, True
    return out, False


# --- experiment kinds -----------------------------------------------------------

def _ensemble_outputs(out: Path, name: str, values: np.ndarray, times: np.ndarray, cfg: ExperimentConfig,
                      files: list) -> None:
    """Stats CSV and binary blocks of already-thinned paths."""
    stats = an.EnsembleStats.from_paths(values, moments=cfg.analysis.moments, seed_base=cfg.seed)
    stats.times = times
    files.append(stats.to_csv(out / f"{name}_stats.csv").name)
    files.append(write_blocks(out / f"{name}_paths.bin", values).name)


MAX_RECORDED = 10_000


def _stride(cfg: ExperimentConfig) -> int:
    if cfg.analysis.record_every is not None:
        return cfg.analysis.record_every
    if cfg.kind == "analyze":  # input blocks are already recorded series
        return 1
    return max(1, math.ceil((cfg.horizon + 1) / MAX_RECORDED))


def _thin(cfg: ExperimentConfig, length: int) -> np.ndarray:
    return np.arange(0, length, _stride(cfg))


@dataclass
class _PathSummary:
    thinned: np.ndarray  # distances at the recorded times
    tail_max: float  # max distance over the final 10% of steps
    rate_sup: float  # sup_{n >= tail start} n^{eta/2} d_n
    growth_ok: bool = True
    growth_ratio: float = 0.0
    diverged: bool = False


def _summarize(d: np.ndarray, cfg: ExperimentConfig, rec: np.ndarray) -> _PathSummary:
    N = len(d) - 1
    tail = max(1, int(len(d) * cfg.analysis.tail_start))
    return _PathSummary(d[rec], float(d[N - N // 10:].max()), float(an.rate_statistic(d, cfg.analysis.eta, tail)[0]))


def _rate_and_envelope(sums: list[_PathSummary], rec: np.ndarray, cfg: ExperimentConfig,
                       n0: float) -> tuple[list[Verdict], dict]:
    """Rate fit, split-sample rate certificate and split-sample envelope coverage.

    The first half of the paths trains, the second half is the holdout.
    Envelopes are checked at the recorded times.  Verdicts are only issued for
    step laws T_n = C/(n + n0) with C alpha > 1; otherwise the statistics are
    reported without a verdict.
    """
    t = cfg.process.t_seq
    verdicts, stats = _rate_verdicts(sums, rec, cfg, n0)
    if t.power != 1.0 or t.c * cfg.process.alpha < 1.0:
        return [], {**stats, "rate_verdicts": "skipped: step law is not C/(n+n0) with C*alpha >= 1"}
    return verdicts, stats


def _rate_verdicts(sums: list[_PathSummary], rec: np.ndarray, cfg: ExperimentConfig, n0: float):
    a = cfg.analysis
    verdicts, stats = [], {}
    d = np.array([s.thinned for s in sums])
    P = len(sums)
    try:
        fit = an.fit_rate(d.mean(axis=0), 0.5, times=rec)
        stats["rate_exponent"] = fit.exponent
        verdicts.append(Verdict("AC4", "fitted exponent of the ensemble-mean distance >= eta/2 - 0.05",
                                fit.exponent >= a.eta / 2 - 0.05, fit.exponent, a.eta / 2 - 0.05))
    except InsufficientDataError as exc:
        stats["rate_exponent"] = str(exc)
    half = P // 2
    if P >= 20:
        sup = np.array([s.rate_sup for s in sums])
        tol = float(np.quantile(sup[:half], 0.975))
        frac = float(np.mean(sup[half:] <= tol))
        stats["rate_tol"] = tol
        verdicts.append(Verdict("AC4", "holdout paths passing the rate certificate", frac >= 0.95, frac, 0.95))
    if P >= 200:
        try:
            env = an.calibrate_envelope(d[:half], "rs", a.deltas, a.k, n0=n0, times=rec)
            stats["envelope_b_prime"] = env.b_prime
            for delta in a.deltas:
                cov = an.envelope_coverage(d[half:], env, delta, times=rec)
                verdicts.append(Verdict("AC5", f"holdout envelope coverage at delta={delta}", cov.passed,
                                        cov.coverage, cov.threshold))
        except CalibrationError as exc:
            stats["envelope"] = str(exc)
            verdicts.append(Verdict("AC5", "envelope calibration", False))
    return verdicts, stats


def _run_rs_special(cfg: ExperimentConfig, out: Path, files: list):
    spec, noise = cfg.process.build(), cfg.process.noise()
    H = cfg.horizon
    rec = _thin(cfg, H + 1)

    def one(pid):
        path = pr.simulate_rs_special(spec, noise, cfg.process.z0, H, cfg.seed, pid)
        d = an.dist_to_interval(path.values, spec.ceiling)
        summ = _summarize(d, cfg, rec)
        summ.diverged = path.diverged
        if noise.variant == pr.DETERMINISTIC:
            summ.growth_ok = bool(np.all(np.diff(d[H // 2:]) <= 0))  # tail monotonicity
            summ.growth_ratio = float(d[-1])
        else:
            rep = pr.verify_growth_condition(path, spec.t_seq, spec.growth_b)
            summ.growth_ok, summ.growth_ratio = rep.ok, rep.worst_ratio
        return summ

    sums, partial = map_paths(one, cfg.paths, cfg.threads)
    _ensemble_outputs(out, "distance", np.array([s.thinned for s in sums]), rec, cfg, files)
    stats = {"diverged": sum(s.diverged for s in sums)}
    if noise.variant == pr.DETERMINISTIC:
        final = max(s.growth_ratio for s in sums)
        verdicts = [Verdict("AC1", "d(z_N, [0, xi/alpha]) <= 1e-3", final <= 1e-3, final, 1e-3),
                    Verdict("AC1", "distance non-increasing on the tail half", all(s.growth_ok for s in sums))]
        return verdicts, stats, partial
    worst = max(s.tail_max for s in sums)
    verdicts = [
        Verdict("AC3", "ensemble max distance over the final 10% of steps", worst <= 0.05, worst, 0.05),
        Verdict("AC3", "growth condition on every path", all(s.growth_ok for s in sums),
                max(s.growth_ratio for s in sums), spec.growth_b),
    ]
    v, st = _rate_and_envelope(sums, rec, cfg, getattr(spec.t_seq, "offset", 1.0))
    stats.update(st)
    return verdicts + v, stats, partial


def _run_example1(cfg: ExperimentConfig, out: Path, files: list):
    H = cfg.horizon
    rec = _thin(cfg, H + 1)

    def one(pid):
        p = pr.simulate_example1(H, cfg.seed, pid)
        return p.values[rec], float(p.values.max()), len(p.spikes), p.values if pid == 0 else None

    res, partial = map_paths(one, cfg.paths, cfg.threads)
    z = np.array([r[0] for r in res])
    _ensemble_outputs(out, "z", z, rec, cfg, files)
    running_max = np.array([r[1] for r in res])
    spikes = np.array([r[2] for r in res])
    frac = float(np.mean(running_max > 5.0))
    harmonic = math.fsum(1.0 / (np.arange(H) + 1.0))
    spike_ratio = float(spikes.mean() / harmonic)
    files.append(write_csv(out / "example1_paths.csv", ["path", "max_z", "spikes"],
                           [np.arange(len(res)), running_max, spikes]).name)
    audit = example1_mean_audit(res[0][3], H)
    verdicts = [
        Verdict("AC2", "fraction of paths with running max > 5", frac >= 0.90, frac, 0.90),
        Verdict("AC2", "conditional-mean identity audit (max relative error)", audit <= 1e-12, audit, 1e-12),
        Verdict("processes.simulate_example1", "spike count / harmonic number within 10%",
                abs(spike_ratio - 1) <= 0.10, spike_ratio, 1.0),
    ]
    try:
        an.calibrate_envelope(an.dist_to_interval(z, 1.0), "rs", cfg.analysis.deltas, cfg.analysis.k, times=rec)
        failed = False
    except CalibrationError:
        failed = True
    verdicts.append(Verdict("analysis.calibrate_envelope", "calibration fails on the divergent process", failed))
    return verdicts, {"spike_fraction": frac, "spike_ratio": spike_ratio}, partial


def example1_mean_audit(z: np.ndarray, horizon: int, stride: int = 997) -> float:
    """Max relative gap between the branch-by-branch conditional mean and (1-T_n) z_n + T_n."""
    worst = 0.0
    T = pr.example1_steps(horizon)[0]
    for n in range(0, horizon, stride):
        m = pr.example1_conditional_mean(float(z[n]), n)
        target = (1 - T[n]) * z[n] + T[n]
        worst = max(worst, abs(m - target) / max(abs(target), 1e-300))
    return worst


def _general_spec(cfg: ExperimentConfig) -> pr.RSGeneralSpec:
    g = cfg.general
    a, b, c = g.a.sequence(), g.b.sequence(), g.c.sequence()
    return pr.RSGeneralSpec(lambda i: a.values(len(i)), lambda i: b.values(len(i)), lambda i: c.values(len(i)),
                            g.threshold_b, g.rho)


def _run_rs_general(cfg: ExperimentConfig, out: Path, files: list):
    spec = _general_spec(cfg)
    H = cfg.horizon
    rec = _thin(cfg, H + 1)

    def one(pid):
        d = an.dist_to_interval(pr.simulate_rs_general(spec, cfg.general.z0, H, cfg.seed, pid).values,
                                cfg.general.threshold_b)
        return d[rec], float(d[H - H // 10:].mean())

    res, partial = map_paths(one, cfg.paths, cfg.threads)
    _ensemble_outputs(out, "distance", np.array([r[0] for r in res]), rec, cfg, files)
    tail_mean = float(np.mean([r[1] for r in res]))
    return [Verdict("processes.simulate_rs_general", "tail mean distance to [0, B]", tail_mean <= 0.05,
                    tail_mean, 0.05)], {"tail_mean": tail_mean}, partial


def _skeleton_for(cfg: ExperimentConfig, horizon: int):
    s = cfg.schedule
    sched = s.build()
    regime = select_regime(s.kind, s.nu, cfg.regime.nu1, cfg.regime.nu2)
    return sched, build_skeleton(sched, regime, horizon)


def _run_skeleton(cfg: ExperimentConfig, out: Path, files: list):
    sched, skel = _skeleton_for(cfg, cfg.horizon)
    rep = skeleton_report(skel, sched)
    files.append(skel.to_csv(out / "skeleton.csv").name)
    stats = {"segments": skel.n_segments, "m0": rep.m0, "lr_bound_c": rep.lr_bound_c,
             "ratio_max_after_m0": rep.ratio_max_after_m0}
    verdicts = [
        Verdict("AC6", "T_m <= alpha_bar_m on every segment", rep.lower_ok),
        Verdict("AC6", "alpha_bar_m <= T_m + alpha_{t_{m+1}-1} on every segment", rep.upper_ok),
        Verdict("AC6", "alpha_bar_m <= 2 T_m past m0 <= 100", rep.m0 is not None and rep.m0 <= 100,
                None if rep.m0 is None else rep.m0, 100),
        Verdict("AC6", "alpha_t <= C T_m^2 with C stable to 10%", rep.lr_bound_stable, rep.lr_bound_c),
    ]
    return verdicts, stats, False


def load_mdp(cfg: ExperimentConfig):
    if cfg.mdp.file is not None:
        return rl.read_mdp(cfg.mdp.file)
    return rl.builtin_mdp(cfg.mdp.name)


def _run_linear_q(cfg: ExperimentConfig, out: Path, files: list):
    mdp, feats = load_mdp(cfg)
    policy, sched = cfg.policy.build(), cfg.schedule.build()
    H = cfg.horizon
    _, skel = _skeleton_for(cfg, H)
    rep = skeleton_report(skel, sched)
    m0 = rep.m0 if rep.m0 is not None else skel.n_segments
    anchors = skel.anchors

    def one(pid):
        run = rl.run_linear_q(mdp, feats, policy, sched, H, cfg.seed, pid)
        n = run.norms()
        rmax = np.maximum.accumulate(n)
        inc = an.skeleton_increment_check(n[anchors] ** 2, skel.targets, m0)
        return n[:: _stride(cfg)], run.diverged, float(rmax[-1]), float(rmax[H // 2]), inc.worst_ratio

    results, partial = map_paths(one, cfg.paths, cfg.threads)
    norms = np.array([r[0] for r in results])
    stats = an.EnsembleStats.from_paths(norms, moments=cfg.analysis.moments, seed_base=cfg.seed)
    stats.times = stats.times * _stride(cfg)
    files.append(stats.to_csv(out / "w_norm_stats.csv").name)
    sup = max(r[2] for r in results)
    growth = max(r[2] / r[3] - 1.0 for r in results)
    inc = max(r[4] for r in results)
    diverged = sum(r[1] for r in results)
    verdicts = [
        Verdict("AC7", "every seed bounded (max ||w_t|| < 1e6, no divergence flag)",
                diverged == 0 and sup < 1e6, sup, 1e6),
        Verdict("AC7", "running max of ||w_t|| grows < 1% over the final half", growth < 0.01, growth, 0.01),
        Verdict("AC7", "|z_{m+1} - z_m| <= 16 T_m (z_m + 1) past m0", inc <= 16.0, inc, 16.0),
    ]
    return verdicts, {"sup_norm": sup, "plateau_growth": growth, "m0": rep.m0, "diverged": diverged}, partial


def _run_sa_generic(cfg: ExperimentConfig, out: Path, files: list):
    kernel, update = load_kernel_table(cfg.kernel.file)
    if update is None:
        raise ValueError("kernel file has no update section")
    sched = cfg.schedule.build()

    def one(pid):
        run = rl.run_sa(kernel, update, sched, cfg.horizon, cfg.seed, cfg.kernel.y0, path_id=pid)
        return np.linalg.norm(run.w_trajectory, axis=1)[:: _stride(cfg)], run.diverged_at is not None

    results, partial = map_paths(one, cfg.paths, cfg.threads)
    norms = np.array([r[0] for r in results])
    _ensemble_outputs(out, "w_norm", norms, _thin(cfg, cfg.horizon + 1), cfg, files)
    diverged = sum(r[1] for r in results)
    return [Verdict("harness.sa_generic", "no path diverged", diverged == 0, diverged, 0)], \
        {"sup_norm": float(norms.max())}, partial


def _run_analyze(cfg: ExperimentConfig, out: Path, files: list):
    blocks = read_blocks(cfg.analysis.input)
    length = min(len(b) for b in blocks)
    rec = _thin(cfg, length)
    sums = [_summarize(an.dist_to_interval(b[:length], cfg.analysis.target), cfg, rec) for b in blocks]
    _ensemble_outputs(out, "distance", np.array([s.thinned for s in sums]), rec, cfg, files)
    verdicts, stats = _rate_and_envelope(sums, rec, cfg, cfg.process.t_seq.offset)
    return verdicts, stats, False


RUNNERS = {
    "rs_special": _run_rs_special,
    "example1": _run_example1,
    "rs_general": _run_rs_general,
    "skeleton": _run_skeleton,
    "linear_q": _run_linear_q,
    "sa_generic": _run_sa_generic,
    "analyze": _run_analyze,
}


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> OutputBundle:
    out = Path(out_dir if out_dir is not None else cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    files: list[str] = []
    start = time.perf_counter()
    verdicts, stats, partial = RUNNERS[cfg.kind](cfg, out, files)
    wall = time.perf_counter() - start
    manifest = {
        "config": cfg.to_dict(),
        "config_hash": fingerprint(cfg.to_dict()),
        "code_version": __version__,
        "base_seed": cfg.seed,
        "path_ids": [0, cfg.paths - 1],
        "wall_time_s": wall,
        "partial": partial,
        "files": sorted(files),
    }
    summary = {"kind": cfg.kind, "all_passed": all(v.passed for v in verdicts),
               "verdicts": [v.to_dict() for v in verdicts],
               "stats": {k: _jsonable(v) if isinstance(v, (int, float)) and not isinstance(v, bool) else v
                         for k, v in stats.items()}}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return OutputBundle(out, manifest, summary, verdicts, sorted(files))
