"""Run configuration: dataclasses, defaults, and the flat key-value file format.

A config file is plain text, one ``section.key = value`` per line, with
``#`` comments. Every key has a default, so an empty file (or no file)
runs the standard desk-scale experiment. Pairs are written ``a,b`` and
sizes ``HxW``; subspace lists are comma-separated kind names.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .metrics import EvalConfig
from .model import ModelConfig
from .scenes import SceneConfig
from .subspaces import ALL_KINDS, parse_kinds

# deterministic seed streams derived from the global run seed
SEED_MODEL = 0
SEED_SCENES = 1
SEED_ADAPTERS = 2
SEED_STAGE1_BATCHES = 3
SEED_STAGE2_BATCHES = 4


@dataclass(frozen=True)
class SplitConfig:
    train: int = 512
    val: int = 64
    test: int = 32

    def __post_init__(self):
        for name in ("train", "val", "test"):
            if getattr(self, name) < 1:
                raise ConfigError(f"split.{name} must be >= 1, got {getattr(self, name)}")


@dataclass(frozen=True)
class Stage1Config:
    rank: int = 4
    lr: float = 1e-3
    steps: int = 500
    batch_size: int = 2
    log_every: int = 25
    subspaces: tuple = ("conv", "mlp", "attention")

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError(f"stage1.rank must be >= 1, got {self.rank}")
        if self.lr <= 0:
            raise ConfigError(f"stage1.lr must be positive, got {self.lr}")
        if self.steps < 0:
            raise ConfigError(f"stage1.steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"stage1.batch_size must be >= 1, got {self.batch_size}")
        if self.log_every < 1:
            raise ConfigError(f"stage1.log_every must be >= 1, got {self.log_every}")
        parse_kinds(",".join(self.subspaces))


@dataclass(frozen=True)
class Stage2Config:
    rank: int = 4
    refresh_period: int = 50
    lr: float = 1e-4
    alpha_beta_lr: float = 1e-3
    steps: int = 200
    batch_size: int = 4
    log_every: int = 25

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError(f"stage2.rank must be >= 1, got {self.rank}")
        if self.refresh_period < 1:
            raise ConfigError(f"stage2.refresh_period must be >= 1, got {self.refresh_period}")
        if self.lr <= 0:
            raise ConfigError(f"stage2.lr must be positive, got {self.lr}")
        if self.alpha_beta_lr < 0:
            raise ConfigError(f"stage2.alpha_beta_lr must be >= 0, got {self.alpha_beta_lr}")
        if self.steps < 0:
            raise ConfigError(f"stage2.steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"stage2.batch_size must be >= 1, got {self.batch_size}")
        if self.log_every < 1:
            raise ConfigError(f"stage2.log_every must be >= 1, got {self.log_every}")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    model: ModelConfig = field(default_factory=ModelConfig)
    scenes: SceneConfig = field(default_factory=SceneConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    eval: EvalConfig = field(default_factory=EvalConfig)


_SECTIONS = {
    "model": ModelConfig,
    "scenes": SceneConfig,
    "split": SplitConfig,
    "stage1": Stage1Config,
    "stage2": Stage2Config,
    "eval": EvalConfig,
}


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines into a string map; malformed lines error."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key or not value:
            raise ConfigError(f"config line {lineno}: empty key or value in {raw!r}")
        if key in values:
            raise ConfigError(f"config line {lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def _coerce(path: str, value: str, target_type) -> object:
    try:
        if target_type is int:
            return int(value)
        if target_type is float:
            return float(value)
        if target_type is str:
            return value
        if target_type is tuple:
            sep = "x" if "x" in value and "," not in value else ","
            parts = [p.strip() for p in value.split(sep) if p.strip()]
            if len(parts) != 2:
                raise ValueError("expected two components")
            # sizes are integer pairs, ranges are float pairs
            try:
                return (int(parts[0]), int(parts[1]))
            except ValueError:
                return (float(parts[0]), float(parts[1]))
    except ValueError as exc:
        raise ConfigError(f"{path}: cannot parse {value!r} ({exc})") from None
    raise ConfigError(f"{path}: unsupported field type {target_type}")


def build_run_config(overrides: Optional[dict] = None) -> RunConfig:
    """Apply flat string overrides to the defaults and derive sub-seeds.

    The global ``seed`` fills ``model.seed`` and ``scenes.seed`` unless the
    file sets them explicitly; batch-sampling streams derive from it inside
    the trainer.
    """
    overrides = dict(overrides or {})
    seed = 0
    if "seed" in overrides:
        seed = int(_coerce("seed", overrides.pop("seed"), int))
    out_dir = overrides.pop("out_dir", "runs/default")

    section_values: dict[str, dict] = {name: {} for name in _SECTIONS}
    for key, value in overrides.items():
        if "." not in key:
            raise ConfigError(f"unknown config key {key!r}")
        section, _, field_name = key.partition(".")
        cls = _SECTIONS.get(section)
        if cls is None:
            raise ConfigError(f"unknown config section {section!r} in key {key!r}")
        field_map = {f.name: f for f in fields(cls)}
        if field_name == "subspaces" and section == "stage1":
            kinds = parse_kinds(value)
            section_values[section][field_name] = tuple(
                k.value for k in ALL_KINDS if k in kinds)
            continue
        if field_name not in field_map:
            raise ConfigError(f"unknown config key {key!r}")
        default = getattr(cls(), field_name)
        target_type = type(default)
        section_values[section][field_name] = _coerce(key, value, target_type)

    if "seed" not in section_values["model"]:
        section_values["model"]["seed"] = seed + SEED_MODEL
    if "seed" not in section_values["scenes"]:
        section_values["scenes"]["seed"] = seed + SEED_SCENES

    built = {}
    for section, cls in _SECTIONS.items():
        try:
            built[section] = cls(**section_values[section])
        except TypeError as exc:
            raise ConfigError(f"{section}: {exc}") from None
    return RunConfig(seed=seed, out_dir=str(out_dir), **built)


def load_run_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return build_run_config({})
    file_path = Path(path)
    if not file_path.exists():
        raise ConfigError(f"config file not found: {path}")
    return build_run_config(parse_config_text(file_path.read_text()))


def run_config_snapshot(cfg: RunConfig) -> dict:
    """Experiment-defining values, nested and ordered; out_dir is runtime-only."""
    def section_dict(obj):
        out = {}
        for f in fields(obj):
            value = getattr(obj, f.name)
            if isinstance(value, tuple):
                value = list(value)
            out[f.name] = value
        return out

    return {
        "seed": cfg.seed,
        "model": section_dict(cfg.model),
        "scenes": section_dict(cfg.scenes),
        "split": section_dict(cfg.split),
        "stage1": section_dict(cfg.stage1),
        "stage2": section_dict(cfg.stage2),
        "eval": section_dict(cfg.eval),
    }


def run_config_from_snapshot(snapshot: dict, out_dir: str = "runs/restored") -> RunConfig:
    """Rebuild a RunConfig from a checkpoint's config snapshot."""
    def tup(section: dict) -> dict:
        return {k: tuple(v) if isinstance(v, list) else v for k, v in section.items()}

    try:
        return RunConfig(
            seed=int(snapshot["seed"]),
            out_dir=out_dir,
            model=ModelConfig(**tup(snapshot["model"])),
            scenes=SceneConfig(**tup(snapshot["scenes"])),
            split=SplitConfig(**snapshot["split"]),
            stage1=Stage1Config(**tup(snapshot["stage1"])),
            stage2=Stage2Config(**snapshot["stage2"]),
            eval=EvalConfig(**snapshot["eval"]),
        )
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"config snapshot is malformed: {exc}") from None
