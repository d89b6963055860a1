"""Pipeline configuration: a dataclass plus a flat ``key=value`` file format.

Lines are UTF-8, ``#`` starts a comment, blank lines are ignored and unknown
keys are rejected.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .core import GridShape
from .match import LAMBDA_BCE, LAMBDA_CLS, LAMBDA_DICE, NUM_POINTS


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    shape: GridShape = field(default_factory=lambda: GridShape(128, 128, 16))
    channels: int = 128
    decoder_channels: int = 192
    levels: int = 4
    collapsed_levels: int = 2
    kernel: int = 3
    num_queries: int = 100
    head_layers: int = 9
    num_classes: int = 16
    seed: int = 0
    density: float = 0.2
    lambda_cls: float = LAMBDA_CLS
    lambda_bce: float = LAMBDA_BCE
    lambda_dice: float = LAMBDA_DICE
    num_points: int = NUM_POINTS

    def __post_init__(self):
        if isinstance(self.shape, str):
            self.shape = GridShape.parse(self.shape)
        for f in dataclasses.fields(self):
            if f.type in ("int", "float") and f.name != "seed":
                if getattr(self, f.name) <= 0:
                    raise ConfigError(f"{f.name} must be positive, got {getattr(self, f.name)}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if not 0 < self.density <= 1:
            raise ConfigError(f"density must lie in (0, 1], got {self.density}")
        if self.kernel % 2 == 0:
            raise ConfigError("kernel must be odd")
        if self.collapsed_levels >= self.levels:
            raise ConfigError("at least the first level must stay 3D")

    @classmethod
    def parse(cls, text: str) -> "PipelineConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            try:
                if types[key] == "GridShape":
                    values[key] = GridShape.parse(value)
                elif types[key] == "int":
                    values[key] = int(value)
                else:
                    values[key] = float(value)
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
        try:
            return cls(**values)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.parse(Path(path).read_text(encoding="utf-8"))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["shape"] = str(self.shape)
        return d

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_dict().items())
