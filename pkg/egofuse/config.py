"""Run configuration.

Each module owns the dataclass of its settings; :py:class:`PipelineConfig`
gathers them. Configuration files are YAML documents with one section per
module, overlaid on the defaults of ``resources/default_config.yaml``::

    doa:
      segment: 0.25
      grid: {step: 0.5}
    fusion:
      sources: [seg, audio]

The segmentation thresholds and the track sources are shared by the fusion
and the no-map resolver, so they are only set in the ``fusion`` section.
"""

from typing import Any, Mapping, TypeVar
from dataclasses import dataclass, fields, is_dataclass, replace
from enum import Enum
from importlib import resources
from pathlib import Path
import logging

import yaml

from .audio_doa import MIC_SUBSETS, DoaConfig
from .audio_range import CalibrationConfig, WelchConfig
from .base import EgofuseError, Source
from .fusion import FusionConfig
from .geometry import FrameConfig
from .metrics import MetricsConfig
from .providers import ProviderConfig
from .qa import ResolverConfig

logger = logging.getLogger(__name__)

T = TypeVar("T")


@dataclass
class ConfigError(EgofuseError):
    key_path: str
    """Dotted path of the offending key, empty for the whole document."""
    message: str

    def __str__(self) -> str:
        if not self.key_path:
            return self.message
        return f"{self.key_path}: {self.message}"


@dataclass(frozen=True, slots=True)
class PipelineConfig:
    mics: str = "all"
    """Aria microphone subset used when no geometry file is given."""
    frame: FrameConfig = FrameConfig()
    doa: DoaConfig = DoaConfig()
    range: WelchConfig = WelchConfig()
    calibration: CalibrationConfig = CalibrationConfig()
    fusion: FusionConfig = FusionConfig()
    resolver: ResolverConfig = ResolverConfig()
    metrics: MetricsConfig = MetricsConfig()
    provider: ProviderConfig = ProviderConfig()

    def __post_init__(self) -> None:
        if self.mics not in MIC_SUBSETS:
            raise ValueError(f"Unknown mic subset {self.mics!r}")


_SHARED = {ResolverConfig: ("seg", "sources")}
"""Fields set from another section, rejected in their own."""


def _convert(default: Any, value: Any, path: str) -> Any:
    if is_dataclass(default) and not isinstance(default, type):
        if not isinstance(value, Mapping):
            raise ConfigError(path, "expected a mapping")
        return _build(type(default), value, f"{path}.")
    if isinstance(default, frozenset):
        if isinstance(value, str):
            value = [value]
        try:
            return frozenset(Source(str(item).strip().lower()) for item in value)
        except ValueError as error:
            raise ConfigError(path, str(error)) from None
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, "expected a list")
        return tuple(value)
    if isinstance(default, bool) and not isinstance(value, bool):
        raise ConfigError(path, "expected true or false")
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def _build(cls: type[T], data: Mapping[str, Any], prefix: str = "") -> T:
    known = {f.name: f for f in fields(cls) if f.init}  # type: ignore[arg-type]
    skipped = _SHARED.get(cls, ())
    defaults = cls()
    values = {}
    for key, value in data.items():
        path = f"{prefix}{key}"
        if key not in known or key in skipped:
            raise ConfigError(path, "unknown key")
        values[key] = _convert(getattr(defaults, key), value, path)
    try:
        return cls(**values)
    except (TypeError, ValueError) as error:
        raise ConfigError(prefix.rstrip("."), str(error)) from None


def _merge(base: dict[str, Any], overlay: Mapping[str, Any]) -> dict[str, Any]:
    merged = dict(base)
    for key, value in overlay.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def default_config_dict() -> dict[str, Any]:
    text = resources.files("egofuse.resources").joinpath("default_config.yaml").read_text(encoding="utf-8")
    data: dict[str, Any] = yaml.safe_load(text)
    return data


def config_from_dict(data: Mapping[str, Any]) -> PipelineConfig:
    """Build the configuration from a document overlaid on the defaults.
    Raise :py:exc:`.ConfigError` on unknown keys and invalid values."""
    config = _build(PipelineConfig, _merge(default_config_dict(), data))
    resolver = replace(config.resolver, seg=config.fusion.seg, sources=config.fusion.sources)
    return replace(config, resolver=resolver)


def read_config_file(file: str | Path) -> dict[str, Any]:
    with open(file, "r", encoding="utf-8") as f:
        try:
            data = yaml.safe_load(f)
        except yaml.YAMLError as error:
            raise ConfigError("", f"{file}: invalid YAML ({error})") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError("", f"{file}: the configuration must be a mapping")
    logger.info("Read configuration from %s", file)
    return data


def load_config(*files: str | Path) -> PipelineConfig:
    """Read YAML configuration files, each overriding the previous ones;
    without file, return the defaults."""
    data: dict[str, Any] = {}
    for file in files:
        data = _merge(data, read_config_file(file))
    return config_from_dict(data)


def _plain(value: Any) -> Any:
    if is_dataclass(value) and not isinstance(value, type):
        return {f.name: _plain(getattr(value, f.name)) for f in fields(value) if f.init}
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, frozenset):
        return sorted(_plain(item) for item in value)
    if isinstance(value, (tuple, list)):
        return [_plain(item) for item in value]
    return value


def config_to_dict(config: PipelineConfig) -> dict[str, Any]:
    """Plain structure of the configuration, loadable by :py:func:`.config_from_dict`.
    The shared resolver fields and the provider token are left out."""
    data: dict[str, Any] = _plain(config)
    for key in _SHARED[ResolverConfig]:
        del data["resolver"][key]
    del data["provider"]["token"]
    return data
