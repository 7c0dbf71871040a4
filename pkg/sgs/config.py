"""
SGS Config - one structured-text (JSON) file configures the whole pipeline.

Layout:
    {
      "seed": 0,
      "threads": 1,
      "grid":       {"w": 32, "h": 32, "d": 16, "gamma": 0.2},
      "labels":     {"classes": ["cabinet", "bed", ...]},
      "projection": {"semantic_mode": "normalized", "far_depth": null},
      "network":    {"latent_dim": 128, "width_scale": 1.0, ...},
      "train":      {"learning_rate": 2e-4, "batch_size": 128, ...},
      "retrieval":  {"rotations_deg": [0, 45, ...], "lam": 1.0, ...},
      "analytics":  {"view_counts": [1, 2, 4, 6, 8], ...},
      "ingest":     {"max_angle": 45.0, "out_size": [32, 18], ...},
      "paths":      {"pool": null, "out_dir": null, "database": null}
    }

Unknown keys are rejected at every level. Missing keys take the defaults below.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from sgs.errors import ConfigurationError


@dataclass(frozen=True)
class GridConfig:
    w: int = 32
    h: int = 32
    d: int = 16
    gamma: float = 0.2


@dataclass(frozen=True)
class LabelsConfig:
    classes: tuple[str, ...] = (
        "cabinet", "bed", "chair", "picture", "desk",
        "curtain", "television", "nightstand", "lamp",
    )


@dataclass(frozen=True)
class ProjectionConfig:
    semantic_mode: str = "normalized"   # normalized | raw
    far_depth: float | None = None      # None -> grid diagonal


@dataclass(frozen=True)
class NetworkConfig:
    latent_dim: int = 128
    width_scale: float = 1.0
    variant: str = "joint"              # joint | unified | split
    latent_mode: str = "hadamard"       # hadamard | scalar_gate
    image_size: tuple[int, int] = (32, 18)
    head_width: int = 512
    leaky_slope: float = 0.2
    init_std: float = 0.02


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    batch_size: int = 128
    epochs: int = 2000
    views: int = 4
    view_coverage_degrees: float = 110.0
    betas: tuple[float, float] = (0.5, 0.999)
    loss_form: str = "non_saturating"   # non_saturating | saturating | literal
    mask_weight: float = 1.0
    checkpoint_every: int = 50
    depth_bins: int = 32
    room_size_range: tuple[float, float] = (0.5, 1.0)
    steps_per_epoch: int | None = None  # None -> pool size // batch size


@dataclass(frozen=True)
class RetrievalConfig:
    rotations_deg: tuple[float, ...] = (0.0, 45.0, 90.0, 135.0, 180.0, 225.0, 270.0, 315.0)
    lam: float = 1.0
    points_per_entry: int = 512
    mode: str = "shape"                 # shape | bbox
    collision_margin: int | None = None


@dataclass(frozen=True)
class AnalyticsConfig:
    view_counts: tuple[int, ...] = (1, 2, 4, 6, 8)
    coverages: tuple[float, ...] = (45.0, 70.0, 90.0, 110.0, 130.0, 180.0)
    samples: int = 2000
    presence_pixels: int = 4
    clamp: float = 1.5e-2
    denominator: str = "appears"        # appears | alone
    depth_bins: int = 32
    panorama_rows: int = 9


@dataclass(frozen=True)
class IngestConfig:
    max_angle: float = 45.0
    out_size: tuple[int, int] = (32, 18)
    wall_label: int | None = None
    ransac_threshold: float = 0.05
    ransac_iterations: int = 200
    min_wall_pixels: int = 50
    skip_bad: bool = False


@dataclass(frozen=True)
class PathsConfig:
    pool: str | None = None
    out_dir: str | None = None
    database: str | None = None


_SECTIONS: dict[str, type] = {
    "grid": GridConfig,
    "labels": LabelsConfig,
    "projection": ProjectionConfig,
    "network": NetworkConfig,
    "train": TrainConfig,
    "retrieval": RetrievalConfig,
    "analytics": AnalyticsConfig,
    "ingest": IngestConfig,
    "paths": PathsConfig,
}

_CHOICES = {
    ("projection", "semantic_mode"): ("normalized", "raw"),
    ("network", "variant"): ("joint", "unified", "split"),
    ("network", "latent_mode"): ("hadamard", "scalar_gate"),
    ("train", "loss_form"): ("non_saturating", "saturating", "literal"),
    ("retrieval", "mode"): ("shape", "bbox"),
    ("analytics", "denominator"): ("appears", "alone"),
}


@dataclass(frozen=True)
class PipelineConfig:
    """Aggregated, validated configuration for every subcommand."""

    seed: int = 0
    threads: int = 1
    grid: GridConfig = field(default_factory=GridConfig)
    labels: LabelsConfig = field(default_factory=LabelsConfig)
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    analytics: AnalyticsConfig = field(default_factory=AnalyticsConfig)
    ingest: IngestConfig = field(default_factory=IngestConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> PipelineConfig:
        if not isinstance(data, dict):
            raise ConfigurationError("Config root must be an object")
        allowed = {"seed", "threads", *_SECTIONS}
        unknown = sorted(set(data) - allowed)
        if unknown:
            raise ConfigurationError(f"Unknown config keys: {', '.join(unknown)}")

        kwargs: dict[str, Any] = {}
        for key in ("seed", "threads"):
            if key in data:
                if not isinstance(data[key], int) or isinstance(data[key], bool):
                    raise ConfigurationError(f"{key} must be an integer")
                kwargs[key] = data[key]
        for name, section_cls in _SECTIONS.items():
            if name in data:
                kwargs[name] = _build_section(name, section_cls, data[name])
        config = cls(**kwargs)
        config.validate()
        return config

    @classmethod
    def load(cls, path: str | Path) -> PipelineConfig:
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"Config {path} is not valid JSON: {e}") from e
        return cls.from_dict(data)

    def to_dict(self) -> dict[str, Any]:
        return _jsonable(dataclasses.asdict(self))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def with_overrides(self, assignments: list[str]) -> PipelineConfig:
        """Apply `a.b=value` overrides; values parse as JSON, else as strings."""
        data = self.to_dict()
        for assignment in assignments:
            if "=" not in assignment:
                raise ConfigurationError(f"Override must look like key=value: {assignment!r}")
            key, raw = assignment.split("=", 1)
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            node = data
            parts = key.strip().split(".")
            for part in parts[:-1]:
                if part not in node or not isinstance(node[part], dict):
                    raise ConfigurationError(f"Unknown config section in override: {key!r}")
                node = node[part]
            if parts[-1] not in node:
                raise ConfigurationError(f"Unknown config key in override: {key!r}")
            node[parts[-1]] = value
        return PipelineConfig.from_dict(data)

    def hash(self) -> bytes:
        """First 16 bytes of the SHA-256 of the canonical JSON form; the worker count is left out."""
        data = self.to_dict()
        del data["threads"]
        canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).digest()[:16]

    def validate(self) -> None:
        g = self.grid
        if min(g.w, g.h, g.d) < 2:
            raise ConfigurationError(f"Grid dimensions must be >= 2, got {g.w}x{g.h}x{g.d}")
        if g.gamma <= 0:
            raise ConfigurationError(f"Voxel stride must be positive, got {g.gamma}")
        if not self.labels.classes:
            raise ConfigurationError("At least one object class is required")
        if len(set(self.labels.classes)) != len(self.labels.classes):
            raise ConfigurationError("Object class names must be unique")
        if self.train.views < 1:
            raise ConfigurationError("train.views must be >= 1")
        if self.train.learning_rate <= 0:
            raise ConfigurationError("train.learning_rate must be positive")
        if self.train.batch_size < 1 or self.train.epochs < 0:
            raise ConfigurationError("train.batch_size must be >= 1 and train.epochs >= 0")
        if self.threads < 1:
            raise ConfigurationError("threads must be >= 1")
        if not self.retrieval.rotations_deg:
            raise ConfigurationError("retrieval.rotations_deg must not be empty")
        for (section, key), choices in _CHOICES.items():
            value = getattr(getattr(self, section), key)
            if value not in choices:
                raise ConfigurationError(
                    f"{section}.{key} must be one of {', '.join(choices)}, got {value!r}"
                )


def _build_section(name: str, section_cls: type, values: Any) -> Any:
    if not isinstance(values, dict):
        raise ConfigurationError(f"Config section {name!r} must be an object")
    hints = typing.get_type_hints(section_cls)
    unknown = sorted(set(values) - {f.name for f in dataclasses.fields(section_cls)})
    if unknown:
        raise ConfigurationError(f"Unknown keys in {name!r}: {', '.join(unknown)}")
    kwargs = {}
    for key, value in values.items():
        try:
            kwargs[key] = _coerce(value, hints[key])
        except TypeError:
            raise ConfigurationError(
                f"{name}.{key} must be {_describe(hints[key])}, got {value!r}"
            ) from None
    return section_cls(**kwargs)


def _coerce(value: Any, hint: Any) -> Any:
    """Check a JSON value against a field annotation; ints widen to floats, lists become tuples."""
    origin = typing.get_origin(hint)
    if origin in (types.UnionType, typing.Union):
        for arg in typing.get_args(hint):
            try:
                return _coerce(value, arg)
            except TypeError:
                continue
        raise TypeError(hint)
    if hint is type(None):
        if value is None:
            return None
        raise TypeError(hint)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise TypeError(hint)
        args = typing.get_args(hint)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0]) for v in value)
        if len(value) != len(args):
            raise TypeError(hint)
        return tuple(_coerce(v, a) for v, a in zip(value, args))
    if isinstance(value, bool):
        if hint is bool:
            return value
        raise TypeError(hint)
    if hint is float and isinstance(value, (int, float)):
        return float(value)
    if isinstance(hint, type) and isinstance(value, hint):
        return value
    raise TypeError(hint)


_TYPE_NAMES = {int: ("an integer", "integers"), float: ("a number", "numbers"),
               str: ("a string", "strings"), bool: ("a boolean", "booleans")}


def _describe(hint: Any) -> str:
    origin = typing.get_origin(hint)
    if origin in (types.UnionType, typing.Union):
        return " or ".join(_describe(a) for a in typing.get_args(hint))
    if hint is type(None):
        return "null"
    if origin is tuple:
        args = typing.get_args(hint)
        plural = _TYPE_NAMES.get(args[0], (str(args[0]),) * 2)[1]
        if len(args) == 2 and args[1] is Ellipsis:
            return f"a list of {plural}"
        return f"a list of {len(args)} {plural}"
    return _TYPE_NAMES.get(hint, (str(hint),))[0]


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

def preset(name: str) -> PipelineConfig:
    """Named starting points: `full` (full scale) and `reduced` (desk scale)."""
    if name == "full":
        return PipelineConfig()
    if name == "reduced":
        return PipelineConfig(
            grid=GridConfig(w=16, h=16, d=8, gamma=0.4),
            network=NetworkConfig(latent_dim=32, width_scale=1 / 8, head_width=64),
            train=TrainConfig(batch_size=16, epochs=200, checkpoint_every=20),
        )
    raise ConfigurationError(f"Unknown preset {name!r} (expected full or reduced)")


# ---------------------------------------------------------------------------
# Random sub-streams
# ---------------------------------------------------------------------------

def rng_for(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named sub-stream of the master seed."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, zlib.crc32(name.encode("utf-8"))])))
