"""Experiment configuration: YAML text in, fully-defaulted typed object out."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any

import yaml

from ..errors import ConfigError, RSLabError
from ..processes import VARIANTS, NoiseModel, PowerSequence, RSSpecialSpec
from ..rl import BUILTIN, PolicyConfig
from ..schedules import KINDS, LR1, Schedule, select_regime

EXPERIMENT_KINDS = ("rs_special", "example1", "rs_general", "skeleton", "linear_q", "sa_generic", "analyze")


class ParseError(RSLabError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


@dataclass(frozen=True)
class PowerSpec:
    """c / (n + offset) ** power."""

    c: float = 1.0
    power: float = 1.0
    offset: float = 1.0

    def sequence(self) -> PowerSequence:
        return PowerSequence(self.c, self.power, self.offset)


@dataclass(frozen=True)
class ScheduleSpec:
    kind: str = LR1
    c_alpha: float = 1.0
    nu: float = 0.8
    table: tuple[float, ...] | None = None

    def build(self) -> Schedule:
        return Schedule(self.kind, self.c_alpha, self.nu, self.table)


@dataclass(frozen=True)
class RegimeSpec:
    nu1: float | None = None
    nu2: float | None = None


@dataclass(frozen=True)
class ProcessSpec:
    alpha: float = 1.0
    xi: float = 1.0
    t_seq: PowerSpec = PowerSpec(1.0, 0.75, 1.0)
    growth_b: float | None = None  # defaults to the noise model's requirement
    noise_variant: str = "bounded_multiplicative"
    sigma: float = 0.5
    z0: float = 0.0

    def noise(self) -> NoiseModel:
        return NoiseModel(self.noise_variant, self.sigma)

    def build(self) -> RSSpecialSpec:
        growth = self.growth_b
        if growth is None:
            growth = max(self.alpha, self.xi) + (self.sigma if self.noise_variant != "deterministic" else 0.0)
        return RSSpecialSpec(self.alpha, self.xi, self.t_seq.sequence(), growth)


@dataclass(frozen=True)
class GeneralSpec:
    a: PowerSpec = PowerSpec(1.0, 2.0, 1.0)
    b: PowerSpec = PowerSpec(1.0, 0.75, 1.0)
    c: PowerSpec = PowerSpec(1.0, 0.9, 1.0)
    threshold_b: float = 2.0
    rho: float = 0.5
    z0: float = 0.0


@dataclass(frozen=True)
class MDPSpec:
    name: str | None = "random5x2"
    file: str | None = None


@dataclass(frozen=True)
class PolicySpec:
    epsilon: float = 0.1
    kappa0: float = 1.0
    adaptive: bool = True

    def build(self) -> PolicyConfig:
        return PolicyConfig(self.epsilon, self.kappa0, self.adaptive)


@dataclass(frozen=True)
class KernelSpec:
    file: str | None = None
    y0: int = 0


@dataclass(frozen=True)
class AnalysisSpec:
    eta: float = 0.5
    deltas: tuple[float, ...] = (0.1,)
    moments: tuple[float, ...] = (1.0, 2.0)
    k: int = 1
    tail_start: float = 0.1  # certificate tail begins at this fraction of the horizon
    record_every: int | None = None  # None: about 10^4 recorded points per path
    input: str | None = None  # binary path blocks for kind=analyze
    target: float = 1.0  # right end of the interval distances are measured to


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    seed: int = 0
    paths: int = 100
    horizon: int = 10_000
    threads: int = 0  # 0 = all cores
    out: str = "rslab-out"
    schedule: ScheduleSpec = ScheduleSpec()
    regime: RegimeSpec = RegimeSpec()
    process: ProcessSpec = ProcessSpec()
    general: GeneralSpec = GeneralSpec()
    mdp: MDPSpec = MDPSpec()
    policy: PolicySpec = PolicySpec()
    kernel: KernelSpec = KernelSpec()
    analysis: AnalysisSpec = AnalysisSpec()

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def replace(self, **changes) -> ExperimentConfig:
        return validate(dataclasses.replace(self, **changes))


def _build(cls, raw: Any, path: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"expected a mapping, got {type(raw).__name__}", path)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown}", path)
    kwargs = {}
    for name, value in raw.items():
        sub = f"{path}.{name}" if path else name
        default = fields[name].default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, sub)
        elif isinstance(default, tuple) or name == "table":
            if value is not None and not isinstance(value, (list, tuple)):
                raise ConfigError("expected a list", sub)
            kwargs[name] = None if value is None else tuple(float(v) for v in value)
        else:
            kwargs[name] = _coerce(value, default, sub, str(fields[name].type))
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(exc.detail, f"{path}.{exc.field}" if path and exc.field else exc.field) from None


def _coerce(value, default, path, annotation=""):
    if value is None:
        return value
    if default is None:
        default = 0.0 if annotation.startswith("float") else 0 if annotation.startswith("int") else ""
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(default, int):
            if isinstance(value, bool) or float(value) != int(value):
                raise TypeError
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, str):
            return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"expected {type(default).__name__}, got {value!r}", path) from None
    return value


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    """Cross-field checks; every failure names the offending field."""
    if cfg.kind not in EXPERIMENT_KINDS:
        raise ConfigError(f"unknown experiment kind {cfg.kind!r}; expected one of {EXPERIMENT_KINDS}", "kind")
    if cfg.seed < 0 or cfg.seed >= 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer", "seed")
    if cfg.paths < 1:
        raise ConfigError("paths must be >= 1", "paths")
    if cfg.horizon < 1:
        raise ConfigError("horizon must be >= 1", "horizon")
    if cfg.threads < 0:
        raise ConfigError("threads must be >= 0", "threads")
    if cfg.schedule.kind not in KINDS:
        raise ConfigError(f"unknown schedule kind {cfg.schedule.kind!r}", "schedule.kind")
    cfg.schedule.build()
    if cfg.kind == "skeleton":
        select_regime(cfg.schedule.kind, cfg.schedule.nu, cfg.regime.nu1, cfg.regime.nu2)
    if cfg.kind == "rs_special":
        if cfg.process.noise_variant not in VARIANTS:
            raise ConfigError(f"unknown noise variant {cfg.process.noise_variant!r}", "process.noise_variant")
        if cfg.process.z0 < 0:
            raise ConfigError("z0 must be non-negative", "process.z0")
        try:
            spec = cfg.process.build()
            noise = cfg.process.noise()
        except ConfigError as exc:
            raise ConfigError(exc.detail, f"process.{exc.field}") from None
        if noise.required_growth(spec) > spec.growth_b * (1 + 1e-12) and noise.variant != "example1":
            raise ConfigError(f"growth_b must be >= max(alpha, xi) + sigma = {noise.required_growth(spec)}",
                              "process.growth_b")
    if cfg.kind == "linear_q":
        cfg.policy.build()
        if cfg.mdp.file is None and cfg.mdp.name not in BUILTIN:
            raise ConfigError(f"unknown built-in MDP {cfg.mdp.name!r}; choose from {sorted(BUILTIN)}", "mdp.name")
    if cfg.kind == "sa_generic" and cfg.kernel.file is None:
        raise ConfigError("sa_generic needs a kernel-table file", "kernel.file")
    if cfg.kind == "analyze" and cfg.analysis.input is None:
        raise ConfigError("analyze needs an input file of path blocks", "analysis.input")
    a = cfg.analysis
    for i, d in enumerate(a.deltas):
        if not (0.0 < d < 1.0):
            raise ConfigError(f"delta must lie in (0, 1), got {d}", f"analysis.deltas[{i}]")
    if any(p < 1 for p in a.moments):
        raise ConfigError("moment orders must be >= 1", "analysis.moments")
    if not (0.0 <= a.tail_start < 1.0):
        raise ConfigError("tail_start must lie in [0, 1)", "analysis.tail_start")
    if a.record_every is not None and a.record_every < 1:
        raise ConfigError("record_every must be >= 1", "analysis.record_every")
    if a.eta <= 0:
        raise ConfigError("eta must be positive", "analysis.eta")
    return cfg


def from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a mapping", "")
    if "kind" not in raw:
        raise ConfigError("missing required key", "kind")
    return validate(_build(ExperimentConfig, raw, ""))


def validate_config(raw: str) -> ExperimentConfig:
    """Parse YAML text and return a validated config with every default filled in."""
    try:
        data = yaml.safe_load(raw)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        raise ParseError(str(exc.problem or exc), None if mark is None else mark.line + 1) from None
    except yaml.YAMLError as exc:
        raise ParseError(str(exc)) from None
    if data is None:
        raise ParseError("empty configuration")
    return from_dict(data)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
