"""Pipeline configuration and the flat ``key = value`` config file format."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional

from .evalkit import DEFAULT_FMR, DEFAULT_FRACTIONS
from .net import ModelConfig
from .train import LossWeights, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    data_root: str = "data"
    output_dir: str = "out"
    checkpoint_dir: str = "checkpoints"
    patch_size: int = 16
    threshold: int = 2
    impostor_ratio: float = 1.0
    fmr_target: float = DEFAULT_FMR
    fractions: tuple[float, ...] = DEFAULT_FRACTIONS
    max_fraction: float = 0.2
    augment_copies: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.patch_size <= 0:
            raise ConfigError("patch_size must be positive")
        if not 0 <= self.threshold <= 4:
            raise ConfigError("threshold must be in 0..4")
        if self.impostor_ratio <= 0:
            raise ConfigError("impostor_ratio must be positive")
        if not 0 < self.fmr_target < 1:
            raise ConfigError("fmr_target must be in (0, 1)")
        if not 0 < self.max_fraction <= 0.98:
            raise ConfigError("max_fraction must be in (0, 0.98]")

    def model_config(self) -> ModelConfig:
        """ModelConfig with spatial and map grids derived from input and patch size unless set."""
        opts = dict(self.model)
        size = tuple(opts.pop("input_size", (224, 224)))
        derived = ModelConfig.for_input(size, self.patch_size)
        opts.setdefault("spatial", derived.spatial)
        opts.setdefault("map_out", derived.map_out)
        return ModelConfig(input_size=size, **opts)

    @property
    def input_size(self) -> tuple[int, int]:
        return tuple(self.model.get("input_size", (224, 224)))

    def to_dict(self) -> dict:
        data = dataclasses.asdict(self)
        data["model"] = self.model_config().to_dict()
        return data

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


_SECTIONS = {
    "train": TrainConfig,
    "weights": LossWeights,
    "model": ModelConfig,
}
_PIPELINE_KEYS = {f.name: f for f in dataclasses.fields(PipelineConfig) if f.name not in _SECTIONS}


def _key_owner() -> dict[str, str]:
    owners = {k: "pipeline" for k in _PIPELINE_KEYS}
    for section, cls in _SECTIONS.items():
        for f in dataclasses.fields(cls):
            if f.name in owners:
                raise AssertionError(f"config key {f.name} is ambiguous")
            owners[f.name] = section
    return owners


KEY_OWNERS = _key_owner()


def _coerce(key: str, raw: Any, default: Any) -> Any:
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            parts = [p for p in text.replace("x", ",").split(",") if p.strip()]
            kind = float if default and isinstance(default[0], float) else int
            values = tuple(kind(p) for p in parts)
            if kind is int and len(default) == 2 and len(values) == 1:
                values = values * 2
            return values
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return text


def parse_config_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in KEY_OWNERS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _defaults() -> dict[str, Any]:
    values: dict[str, Any] = {}
    for name, f in _PIPELINE_KEYS.items():
        values[name] = f.default
    for cls in _SECTIONS.values():
        for f in dataclasses.fields(cls):
            values[f.name] = f.default
    return values


DEFAULTS = _defaults()


def build_config(*layers: Optional[Mapping[str, Any]]) -> PipelineConfig:
    """Merge override layers (later wins; ``None`` values are skipped) over defaults."""
    merged: dict[str, Any] = {}
    for layer in layers:
        for key, value in (layer or {}).items():
            if value is None:
                continue
            if key not in KEY_OWNERS:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = _coerce(key, value, DEFAULTS[key])

    pipeline = {k: v for k, v in merged.items() if KEY_OWNERS[k] == "pipeline"}
    train = {k: v for k, v in merged.items() if KEY_OWNERS[k] == "train"}
    weights = {k: v for k, v in merged.items() if KEY_OWNERS[k] == "weights"}
    model = {k: v for k, v in merged.items() if KEY_OWNERS[k] == "model"}
    try:
        return PipelineConfig(
            **pipeline, train=TrainConfig(**train), weights=LossWeights(**weights), model=model
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: Optional[Path | str], overrides: Optional[Mapping[str, Any]] = None) -> PipelineConfig:
    """Defaults, then the config file at ``path`` (if any), then ``overrides``."""
    file_layer = parse_config_text(Path(path).read_text(encoding="utf-8")) if path else None
    return build_config(file_layer, overrides)


def dump_config(cfg: PipelineConfig) -> str:
    """Serialize ``cfg`` in the ``key = value`` format (reloads to an equal config)."""
    data = cfg.to_dict()
    flat: dict[str, Any] = {k: data[k] for k in _PIPELINE_KEYS}
    for section in _SECTIONS:
        flat.update(data[section])
    lines = []
    for key in sorted(flat):
        value = flat[key]
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
