"""Run configuration: one JSON file plus ``section.field=value`` overrides.

Every section is a dataclass owned (or mirrored) by the module that consumes
it, and ``RunConfig.validate`` runs each module's own checks plus the
cross-section consistency checks.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from . import diffusion
from .denoiser import DenoiserConfig, OptimizerConfig
from .dmc import GuidanceConfig
from .errors import ConfigError, StorageError
from .mim import FlowParams
from .synthdata import DatasetConfig


@dataclass
class ScheduleConfig:
    steps: int = 50
    beta_start: float = 2e-3
    beta_end: float = 0.2
    sigma_mode: str = "cumulative"

    def build(self) -> diffusion.NoiseSchedule:
        return diffusion.build_schedule(self.steps, self.beta_start, self.beta_end, self.sigma_mode)


@dataclass
class GuidanceSettings(GuidanceConfig):
    # half-widths of the target box around each trajectory point, in pixels
    dx: float = 12.0
    dy: float = 12.0

    def core(self) -> GuidanceConfig:
        return GuidanceConfig(**{f.name: getattr(self, f.name) for f in dataclasses.fields(GuidanceConfig)})


@dataclass
class MimConfig:
    calibration: tuple | None = None  # (lo, hi); None = measure on the training set
    static_floor: float = 0.05
    flow: FlowParams = field(default_factory=FlowParams)

    def validate(self):
        if self.calibration is not None:
            if len(self.calibration) != 2 or not self.calibration[0] < self.calibration[1]:
                raise ConfigError(f"mim.calibration must be (lo, hi) with lo < hi, got {self.calibration}")
        if self.static_floor < 0:
            raise ConfigError(f"mim.static_floor must be >= 0, got {self.static_floor}")
        f = self.flow
        if not 0 < f.pyr_scale < 1 or f.levels < 1 or f.winsize < 3 or f.iterations < 1:
            raise ConfigError(f"mim.flow parameters out of range: {f}")
        if f.poly_n not in (5, 7) or f.poly_sigma <= 0:
            raise ConfigError(f"mim.flow.poly_n must be 5 or 7 and poly_sigma > 0, got {f}")


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    seed: int = 0
    checkpoint_every: int = 500
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(lr=2e-3, decay_steps=2000))

    def validate(self):
        if self.steps < 0 or self.batch_size < 1 or self.checkpoint_every < 1:
            raise ConfigError(f"train.steps >= 0, batch_size >= 1, checkpoint_every >= 1 required, got "
                              f"{self.steps}, {self.batch_size}, {self.checkpoint_every}")
        self.optimizer.validate()


@dataclass
class AblationConfig:
    seeds: tuple = tuple(range(20))
    guided_counts: tuple = (1, 5, 10, 30)
    etas: tuple = (0.0, 0.1, 0.3, 1.0)
    lams: tuple = (0.0, 0.1)
    fusions: tuple = ("none", "text_word", "global_add", "token_concat")
    levels: tuple = (1, 3, 5, 7, 9)
    clips_per_level: int = 10

    def validate(self, steps: int):
        if not self.seeds:
            raise ConfigError("ablate.seeds must list at least one seed")
        bad = [g for g in self.guided_counts if not 1 <= g <= steps]
        if bad:
            raise ConfigError(f"ablate.guided_counts {bad} outside 1..{steps}")
        if any(e < 0 for e in self.etas) or any(v < 0 for v in self.lams):
            raise ConfigError("ablate.etas and ablate.lams must be >= 0")
        if any(not 1 <= k <= 10 for k in self.levels):
            raise ConfigError(f"ablate.levels must be in 1..10, got {self.levels}")


@dataclass
class RunConfig:
    model: DenoiserConfig = field(default_factory=DenoiserConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    guidance: GuidanceSettings = field(default_factory=GuidanceSettings)
    mim: MimConfig = field(default_factory=MimConfig)
    # the toy recipe: one red 24 px shape
    data: DatasetConfig = field(default_factory=lambda: DatasetConfig(size=24.0, colors=("red",)))
    train: TrainConfig = field(default_factory=TrainConfig)
    ablate: AblationConfig = field(default_factory=AblationConfig)
    seed: int = 0
    token_seed: int = 0
    workers: int = 1

    def validate(self) -> "RunConfig":
        self.model.schedule = (self.schedule.steps, self.schedule.beta_start, self.schedule.beta_end)
        self.model.validate()
        self.schedule.build()
        self.guidance.validate(self.schedule.steps)
        if self.guidance.dx <= 0 or self.guidance.dy <= 0:
            raise ConfigError(f"guidance.dx and guidance.dy must be > 0, got {self.guidance.dx}, {self.guidance.dy}")
        bad = [g for g in self.guidance.layers if g not in self.model.guidance_layers]
        if bad:
            raise ConfigError(f"guidance.layers {bad} not exposed by model.guidance_layers")
        self.mim.validate()
        self.data.validate()
        if (self.data.height, self.data.width) != (4 * self.model.height, 4 * self.model.width):
            raise ConfigError(f"data frames {self.data.height}x{self.data.width} do not encode to the "
                              f"model grid {self.model.height}x{self.model.width} (factor 4)")
        if self.data.frames != self.model.frames:
            raise ConfigError(f"data.frames={self.data.frames} != model.frames={self.model.frames}")
        self.train.validate()
        self.ablate.validate(self.schedule.steps)
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        return self

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(default, value, where: str):
    if dataclasses.is_dataclass(default):
        if not isinstance(value, dict):
            raise ConfigError(f"{where} must be an object, got {value!r}")
        return _build(type(default), value, where, base=default)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true/false, got {value!r}")
        return value
    if isinstance(default, (int, float)) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        if isinstance(default, int) and not isinstance(value, int):
            if float(value).is_integer():
                return int(value)
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return type(default)(value)
    if isinstance(default, tuple) or (default is None and isinstance(value, list)):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where} must be a list, got {value!r}")
        return tuple(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{where} must be a string, got {value!r}")
    return value


def _build(cls, data: dict, where: str = "", base=None):
    base = base if base is not None else cls()
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        prefix = f"{where}." if where else ""
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        cur = getattr(base, f.name)
        key = f"{where}.{f.name}" if where else f.name
        kwargs[f.name] = _coerce(cur, data[f.name], key) if f.name in data else cur
    return cls(**kwargs)


def parse_override(text: str) -> tuple[list, object]:
    """``a.b.c=value``; the value is read as JSON, falling back to a bare string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.field=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except ValueError:
        value = raw
    return key.strip().split("."), value


def _nest(path: list, value) -> dict:
    out = value
    for part in reversed(path):
        out = {part: out}
    return out


def _merge(a: dict, b: dict) -> dict:
    out = dict(a)
    for k, v in b.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def load_config(path=None, overrides=(), extra: dict | None = None) -> RunConfig:
    """Defaults, then the JSON file, then ``extra`` (flag values), then overrides."""
    data: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise StorageError(f"cannot read config {path}: {exc}") from exc
        try:
            data = json.loads(text)
        except ValueError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
    if extra:
        data = _merge(data, extra)
    for item in overrides:
        keys, value = parse_override(item)
        data = _merge(data, _nest(keys, value))
    return _build(RunConfig, data).validate()


def write_resolved(cfg: RunConfig, out_dir) -> Path:
    path = Path(out_dir) / "config.json"
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc
    return path
