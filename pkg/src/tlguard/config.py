"""Experiment configuration: TOML files mapped onto nested dataclasses.

Every section and key is optional; missing values take the desk defaults.
Unknown keys are rejected so typos do not silently fall back to defaults.
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .attack import AttackConfig
from .defense import EnsembleConfig
from .pruning import PruningPlan, TrainSettings
from .transfer import DEEP, FULL, MID, FreezePolicy

SWEEP_AXES = ("differentiator_count", "attack_layer", "budget", "iteration_count", "threshold",
              "adaptive_knowledge")
ADAPTIVE_MODES = ("unknown", "ratios", "known")


class ConfigError(ValueError):
    pass


@dataclass
class TaskSection:
    num_classes: int = 10
    per_class: int = 200
    noise: float = 0.03
    data_seed: int = 7
    image_dir: str = ""
    student_classes: list = field(default_factory=lambda: [1, 2, 3, 4, 5, 6])
    teacher_epochs: int = 15
    student_epochs: int = 30
    learning_rate: float = 0.05
    batch_size: int = 32


@dataclass
class PolicySection:
    kind: str = DEEP
    cutoff: int | None = None

    def build(self):
        return FreezePolicy(self.kind, self.cutoff)


@dataclass
class DifferentiatorSection:
    kind: str = MID
    cutoff: int | None = 4
    ratios: list = field(default_factory=lambda: [0.0, 0.3, 0.6, 0.8, 0.9])
    iterations: int = 5
    epochs: int = 10
    epochs_per_iteration: int = 4
    learning_rate: float = 0.05
    ratio_delta: float = 0.1

    def policy(self):
        return FreezePolicy(self.kind, self.cutoff)

    def plan(self):
        return PruningPlan(self.ratios)

    def settings(self):
        return TrainSettings(self.epochs, self.epochs_per_iteration, learning_rate=self.learning_rate)


@dataclass
class AttackSection:
    layer: int = 8
    budget: float = 0.05
    iterations: int = 500
    penalty_weight: float = 1e4
    metric: str = "sq_l2"
    candidate_count: int = 5
    targeted_pairs: int = 100
    nontargeted_sources: int = 100
    batch_size: int = 100

    def build(self, **kw):
        cfg = AttackConfig(self.layer, self.budget, self.metric, self.iterations,
                           penalty_weight=self.penalty_weight, candidate_count=self.candidate_count)
        return cfg.replace(**kw) if kw else cfg


@dataclass
class EnsembleSection:
    size: int = 5
    threshold: int = 1
    resample: bool = True

    def build(self, seed, **kw):
        base = dict(size=self.size, threshold=self.threshold, seed=seed, resample=self.resample)
        base.update(kw)
        return EnsembleConfig(**base)


@dataclass
class SweepSection:
    axis: str = "differentiator_count"
    values: list = field(default_factory=lambda: [5])


@dataclass
class ReportSection:
    timing: str = "wall"
    timing_queries: int = 20
    svg: bool = True


@dataclass
class ExperimentConfig:
    seed: int = 0
    task: TaskSection = field(default_factory=TaskSection)
    student: PolicySection = field(default_factory=PolicySection)
    differentiator: DifferentiatorSection = field(default_factory=DifferentiatorSection)
    attack: AttackSection = field(default_factory=AttackSection)
    ensemble: EnsembleSection = field(default_factory=EnsembleSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    report: ReportSection = field(default_factory=ReportSection)

    def to_dict(self):
        return asdict(self)

    def with_sweep(self, axis, values):
        out = replace(self, sweep=SweepSection(axis, list(values)))
        validate(out)
        return out


def _fill(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"[{where}] must be a table")
    known = {f.name: f for f in fields(cls)}
    kw = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown key {where}.{key}" if where else f"unknown key {key}")
        sub = known[key].type
        if isinstance(sub, str):
            sub = _SECTIONS.get(sub)
        if is_dataclass(sub):
            kw[key] = _fill(sub, value, key)
        else:
            kw[key] = value
    try:
        return cls(**kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{where}] {e}") from e


_SECTIONS = {c.__name__: c for c in (TaskSection, PolicySection, DifferentiatorSection, AttackSection,
                                     EnsembleSection, SweepSection, ReportSection)}


def from_dict(data):
    cfg = _fill(ExperimentConfig, data, "")
    validate(cfg)
    return cfg


def load_config(path=None, seed=None):
    """Read a TOML config (or the defaults when ``path`` is None)."""
    data = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"invalid TOML in {path}: {e}") from e
    cfg = from_dict(data)
    if seed is not None:
        cfg.seed = int(seed)
    return cfg


def validate(cfg):
    t = cfg.task
    if not 3 <= t.num_classes <= 12 and not t.image_dir:
        raise ConfigError("task.num_classes must lie in 3..12")
    sc = list(t.student_classes)
    if len(sc) < 3 or len(set(sc)) != len(sc):
        raise ConfigError("task.student_classes needs at least 3 distinct labels")
    if not t.image_dir and any(not 1 <= c <= t.num_classes for c in sc):
        raise ConfigError("task.student_classes outside the task's label range")
    for name, pol in (("student", cfg.student), ("differentiator", cfg.differentiator)):
        if pol.kind not in (DEEP, MID, FULL):
            raise ConfigError(f"{name}.kind must be one of deep, mid, full")
        if pol.kind == MID and pol.cutoff is None:
            raise ConfigError(f"{name}.cutoff is required for a mid policy")
    try:
        cfg.differentiator.plan()
        cfg.attack.build()
        cfg.ensemble.build(cfg.seed)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    k_max = len(sc) - 1
    if cfg.ensemble.size > k_max:
        raise ConfigError(f"ensemble.size must be <= {k_max}")
    if cfg.sweep.axis not in SWEEP_AXES:
        raise ConfigError(f"sweep.axis must be one of {', '.join(SWEEP_AXES)}")
    _validate_sweep(cfg, k_max)
    if cfg.report.timing not in ("wall", "off"):
        raise ConfigError("report.timing must be 'wall' or 'off'")
    if cfg.attack.targeted_pairs < 1 or cfg.attack.nontargeted_sources < 0:
        raise ConfigError("attack corpus sizes must be positive")


def _validate_sweep(cfg, k_max):
    axis, values = cfg.sweep.axis, list(cfg.sweep.values)
    if axis == "differentiator_count" and any(not 1 <= int(v) <= k_max for v in values):
        raise ConfigError(f"differentiator_count values must lie in 1..{k_max}")
    if axis == "threshold" and any(not 1 <= int(v) <= cfg.ensemble.size for v in values):
        raise ConfigError("threshold values must lie in 1..ensemble.size")
    if axis == "budget" and any(not 0 < float(v) <= 0.5 for v in values):
        raise ConfigError("budget values must lie in (0, 0.5]")
    if axis == "iteration_count" and any(not 1 <= int(v) <= cfg.differentiator.iterations for v in values):
        raise ConfigError("iteration_count values must lie in 1..differentiator.iterations")
    if axis == "adaptive_knowledge" and any(v not in ADAPTIVE_MODES for v in values):
        raise ConfigError(f"adaptive_knowledge values must be among {ADAPTIVE_MODES}")
    if axis == "attack_layer" and any(int(v) < 0 for v in values):
        raise ConfigError("attack_layer values must be non-negative")
