"""Learning-rate laws and the skeleton timescale built on top of them.

Two parametric laws are supported::

    LR1:  alpha_t = C / (t + 3) ** nu                 nu in (2/3, 1]
    LR2:  alpha_t = C / ((t + 3) * ln(t + 3) ** nu)   nu in (0, 1)

plus an explicit table.  The skeleton partitions natural time into segments
``[t_m, t_{m+1})`` whose step mass first reaches a target ``T_m``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numba import njit

from .errors import ConfigError, SkeletonError
from .io import write_csv

LR1, LR2, TABLE = "LR1", "LR2", "Table"
KINDS = (LR1, LR2, TABLE)


@dataclass(frozen=True)
class Schedule:
    kind: str
    c_alpha: float = 1.0
    nu: float = 1.0
    table: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown schedule kind {self.kind!r}; expected one of {KINDS}", "schedule.kind")
        if self.kind == TABLE:
            if not self.table:
                raise ConfigError("Table schedule needs a non-empty table", "schedule.table")
            if any(not (v > 0 and math.isfinite(v)) for v in self.table):
                raise ConfigError("table entries must be positive and finite", "schedule.table")
            object.__setattr__(self, "table", tuple(float(v) for v in self.table))
            return
        if not self.c_alpha > 0:
            raise ConfigError("c_alpha must be positive", "schedule.c_alpha")
        if self.kind == LR1 and not (2.0 / 3.0 < self.nu <= 1.0):
            raise ConfigError(f"LR1 requires nu in (2/3, 1], got {self.nu}", "schedule.nu")
        if self.kind == LR2 and not (0.0 < self.nu < 1.0):
            raise ConfigError(f"LR2 requires nu in (0, 1), got {self.nu}", "schedule.nu")

    @classmethod
    def lr1(cls, c_alpha: float = 1.0, nu: float = 1.0) -> Schedule:
        return cls(LR1, c_alpha, nu)

    @classmethod
    def lr2(cls, c_alpha: float = 1.0, nu: float = 0.5) -> Schedule:
        return cls(LR2, c_alpha, nu)

    @classmethod
    def from_table(cls, values: Sequence[float]) -> Schedule:
        return cls(TABLE, table=tuple(values))

    def alphas(self, n: int) -> np.ndarray:
        """alpha_t for t = 0..n-1."""
        if n < 0:
            raise ValueError("n must be non-negative")
        if self.kind == TABLE:
            if n > len(self.table):
                raise IndexError(f"table schedule has {len(self.table)} entries, {n} requested")
            return np.array(self.table[:n], dtype=np.float64)
        return self._law(np.arange(n, dtype=np.float64))

    def _law(self, t: np.ndarray) -> np.ndarray:
        x = t + 3.0
        if self.kind == LR1:
            return self.c_alpha / x**self.nu
        return self.c_alpha / (x * np.log(x) ** self.nu)

    def to_dict(self) -> dict:
        if self.kind == TABLE:
            return {"kind": TABLE, "table": list(self.table)}
        return {"kind": self.kind, "c_alpha": self.c_alpha, "nu": self.nu}


def alpha_at(schedule: Schedule, t: int) -> float:
    if t < 0:
        raise ValueError("t must be non-negative")
    if schedule.kind == TABLE:
        if t >= len(schedule.table):
            raise IndexError(f"t={t} outside table of length {len(schedule.table)}")
        return schedule.table[t]
    return float(schedule._law(np.array([t], dtype=np.float64))[0])


def segment_sum(schedule: Schedule, lo: int, hi: int) -> float:
    """sum_{t=lo}^{hi-1} alpha_t, exactly rounded."""
    if lo < 0 or lo > hi:
        raise ValueError(f"need 0 <= lo <= hi, got lo={lo}, hi={hi}")
    if lo == hi:
        return 0.0
    return math.fsum(schedule.alphas(hi)[lo:])


@dataclass(frozen=True)
class Regime:
    """Exponents of the skeleton targets T_m = C ln^nu1(m+3) / (m+3)^nu2."""

    nu1: float
    nu2: float

    def __post_init__(self):
        if self.nu1 < 0 or not (0.5 < self.nu2 <= 1.0):
            raise ConfigError(f"need nu1 >= 0 and nu2 in (1/2, 1], got ({self.nu1}, {self.nu2})", "regime")
        row1 = 0.0 < self.nu1 < 1.0 and self.nu2 == 1.0
        row2 = self.nu1 == 0.0 and 0.5 < self.nu2 < 1.0
        row3 = self.nu1 == 0.0 and self.nu2 == 1.0
        if not (row1 or row2 or row3):
            raise ConfigError(f"({self.nu1}, {self.nu2}) matches no admissible regime row", "regime")


def select_regime(kind: str, nu: float, nu1: float | None = None, nu2: float | None = None) -> Regime:
    """Pick (nu1, nu2) for a learning-rate law.

    LR1 with nu = 1 needs a caller-chosen ``nu1`` in (0, 1).  LR1 with
    nu < 1 takes ``nu2`` in (1/2, nu/(2-nu)), defaulting to the midpoint.
    LR2 always maps to (0, 1).
    """
    if kind == LR1 and nu == 1.0:
        if nu1 is None or not (0.0 < nu1 < 1.0):
            raise ConfigError("LR1 with nu=1 requires nu1 in (0, 1) (regime row 1)", "regime.nu1")
        if nu2 not in (None, 1.0):
            raise ConfigError("LR1 with nu=1 requires nu2 = 1 (regime row 1)", "regime.nu2")
        return Regime(nu1, 1.0)
    if kind == LR1 and 2.0 / 3.0 < nu < 1.0:
        hi = nu / (2.0 - nu)
        if nu1 not in (None, 0.0):
            raise ConfigError("LR1 with nu<1 requires nu1 = 0 (regime row 2)", "regime.nu1")
        if nu2 is None:
            nu2 = (0.5 + hi) / 2.0
        if not (0.5 < nu2 < hi):
            raise ConfigError(f"LR1 with nu={nu} requires nu2 in (1/2, {hi}) (regime row 2)", "regime.nu2")
        return Regime(0.0, nu2)
    if kind == LR2 and 0.0 < nu < 1.0:
        if nu1 not in (None, 0.0) or nu2 not in (None, 1.0):
            raise ConfigError("LR2 requires (nu1, nu2) = (0, 1) (regime row 3)", "regime")
        return Regime(0.0, 1.0)
    raise ConfigError(f"no regime row admits kind={kind!r}, nu={nu}", "regime")


def skeleton_targets(regime: Regime, c_alpha: float, m: np.ndarray) -> np.ndarray:
    x = np.asarray(m, dtype=np.float64) + 3.0
    return c_alpha * np.log(x) ** regime.nu1 / x**regime.nu2


def skeleton_target(regime: Regime, c_alpha: float, m: int) -> float:
    if m < 0:
        raise ValueError("m must be non-negative")
    return float(skeleton_targets(regime, c_alpha, np.array([m]))[0])


@njit(cache=True)
def _scan_anchors(alphas, targets):
    # Neumaier-compensated running sums; anchor when the segment mass reaches T_m.
    n = alphas.shape[0]
    anchors = np.empty(n + 1, dtype=np.int64)
    realized = np.empty(n, dtype=np.float64)
    anchors[0] = 0
    m = 0
    s = 0.0
    comp = 0.0
    for t in range(n):
        a = alphas[t]
        tot = s + a
        if abs(s) >= abs(a):
            comp += (s - tot) + a
        else:
            comp += (a - tot) + s
        s = tot
        if s + comp >= targets[m]:
            realized[m] = s + comp
            m += 1
            anchors[m] = t + 1
            s = 0.0
            comp = 0.0
    return anchors[: m + 1], realized[:m], s + comp


@dataclass(frozen=True)
class SkeletonTimescale:
    anchors: np.ndarray  # t_0 = 0 < t_1 < ... < t_M
    targets: np.ndarray  # T_0..T_{M-1}
    realized: np.ndarray  # alpha_bar_0..alpha_bar_{M-1}
    horizon: int
    regime: Regime = field(default=Regime(0.0, 1.0))
    c_alpha: float = 1.0

    @property
    def n_segments(self) -> int:
        return len(self.targets)

    def segment(self, m: int) -> tuple[int, int]:
        return int(self.anchors[m]), int(self.anchors[m + 1])

    def to_csv(self, path: str | Path) -> Path:
        m = np.arange(self.n_segments)
        return write_csv(path, ["m", "t_m", "T_m", "alpha_bar_m"],
                         [m, self.anchors[:-1], self.targets, self.realized])


def build_skeleton(schedule: Schedule, regime: Regime, horizon: int, c_alpha: float | None = None,
                   targets=None) -> SkeletonTimescale:
    """Anchors t_{m+1} = min{k : sum_{t=t_m}^{k-1} alpha_t >= T_m}, truncated at horizon.

    ``c_alpha`` scales the targets; it defaults to the schedule's own C_alpha
    (1 for tables).  An explicit ``targets`` (scalar or array of T_m) replaces
    the regime's targets.
    """
    if horizon < 1:
        raise ValueError("horizon must be positive")
    if c_alpha is None:
        c_alpha = schedule.c_alpha if schedule.kind != TABLE else 1.0
    alphas = schedule.alphas(horizon)
    if targets is None:
        targets = skeleton_targets(regime, c_alpha, np.arange(horizon))
    else:
        targets = np.broadcast_to(np.asarray(targets, dtype=np.float64), (horizon,)).copy()
        if np.any(targets <= 0):
            raise ValueError("targets must be positive")
    anchors, realized, partial = _scan_anchors(alphas, targets)
    if len(realized) == 0:
        raise SkeletonError(
            f"horizon {horizon} too small: partial sum {partial:.6g} never reached T_0={targets[0]:.6g}",
            partial_sum=float(partial),
        )
    m = len(realized)
    return SkeletonTimescale(anchors, targets[:m].copy(), realized, horizon, regime, float(c_alpha))


@dataclass(frozen=True)
class SkeletonReport:
    lower_ok: bool  # T_m <= alpha_bar_m
    upper_ok: bool  # alpha_bar_m <= T_m + alpha_{t_{m+1}-1}
    m0: int | None  # alpha_bar_m <= 2 T_m for every m >= m0
    ratio_max_after_m0: float
    lr_bound_c: float  # max_{m>=m0} sup_{t>=t_m} alpha_t / T_m^2
    lr_bound_c_half: float  # same, over the first half of the segments past m0
    lr_bound_stable: bool


def skeleton_report(skel: SkeletonTimescale, schedule: Schedule, rtol: float = 1e-12,
                    min_run: int = 50, stability: float = 0.10) -> SkeletonReport:
    """Check the bracketing invariants and the two segment-mass lemmas.

    Partial sums are recomputed independently with ``math.fsum``.  ``m0`` is
    the first index from which ``alpha_bar_m <= 2 T_m`` holds for every
    remaining segment, provided at least ``min_run`` segments remain.
    """
    alphas = schedule.alphas(skel.horizon)
    lower = upper = True
    for m in range(skel.n_segments):
        lo, hi = skel.segment(m)
        s = math.fsum(alphas[lo:hi])
        T = skel.targets[m]
        if s < T * (1 - rtol):
            lower = False
        if s > (T + alphas[hi - 1]) * (1 + rtol):
            upper = False

    ok = skel.realized <= 2.0 * skel.targets
    bad = np.flatnonzero(~ok)
    m0 = 0 if len(bad) == 0 else int(bad[-1]) + 1
    M = skel.n_segments
    if M - m0 < min_run:
        return SkeletonReport(lower, upper, None, float("nan"), float("nan"), float("nan"), False)

    ratio_max = float(np.max(skel.realized[m0:] / skel.targets[m0:]))
    suffix_max = np.maximum.accumulate(alphas[::-1])[::-1]
    c_m = suffix_max[skel.anchors[m0:M]] / skel.targets[m0:] ** 2
    c_all = float(np.max(c_m))
    c_half = float(np.max(c_m[: max(1, len(c_m) // 2)]))
    stable = abs(c_all - c_half) <= stability * c_all
    return SkeletonReport(lower, upper, m0, ratio_max, c_all, c_half, bool(stable))
