"""Run configuration: a flat key=value file plus command-line overrides.

Every key maps onto a field of ModelConfig, GateConfig, or the run section
below; unknown keys are rejected up front. Command-line flags win over file
values, which win over defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .model import ModelConfig
from .pipeline import GateConfig

__all__ = ["ConfigError", "RunConfig", "parse_kv_file", "build_run_config"]


class ConfigError(ValueError):
    """Invalid configuration file or option value."""


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    workers: int = 1
    steps: int = 300
    batch_size: int = 8
    lr: float = 2e-3
    gl_iters: int = 60
    sample_seed: int = 0
    decoder_routing: str = "fusion"

    def validate(self) -> None:
        if self.workers < 1 or self.steps < 1 or self.batch_size < 1:
            raise ConfigError("workers, steps and batch_size must be >= 1")
        if self.gl_iters < 0:
            raise ConfigError("gl_iters must be >= 0")
        if self.decoder_routing != "fusion":
            raise ConfigError(
                f"decoder_routing supports only 'fusion', got "
                f"{self.decoder_routing!r}")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    gate: GateConfig
    run: RunSection

    def validate(self) -> None:
        try:
            self.model.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        self.run.validate()


_SECTIONS = (("model", ModelConfig), ("gate", GateConfig), ("run", RunSection))


def _known_fields() -> dict[str, tuple[str, type]]:
    table: dict[str, tuple[str, type]] = {}
    for section, cls in _SECTIONS:
        for f in fields(cls):
            table[f.name] = (section, f.type)
    return table


def _coerce(name: str, value: str, default) -> object:
    if isinstance(default, bool):
        lowered = str(value).strip().lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ConfigError(f"{name}: expected true/false, got {value!r}")
    try:
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from exc
    return str(value)


def parse_kv_file(path: str | Path) -> dict[str, str]:
    """Parse ``key = value`` lines; '#' starts a comment."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(
            Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        values[key] = value.strip()
    return values


def build_run_config(file_values: dict[str, str] | None = None,
                     overrides: dict[str, object] | None = None) -> RunConfig:
    """Merge defaults, file values and overrides into a validated RunConfig."""
    known = _known_fields()
    merged: dict[str, dict[str, object]] = {"model": {}, "gate": {}, "run": {}}

    defaults = {"model": ModelConfig(), "gate": GateConfig(),
                "run": RunSection()}
    for key, value in (file_values or {}).items():
        if key not in known:
            raise ConfigError(f"unknown configuration key {key!r}")
        section, _ = known[key]
        merged[section][key] = _coerce(
            key, value, getattr(defaults[section], key))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in known:
            raise ConfigError(f"unknown configuration key {key!r}")
        section, _ = known[key]
        merged[section][key] = value

    try:
        config = RunConfig(model=ModelConfig(**merged["model"]),
                           gate=GateConfig(**merged["gate"]),
                           run=RunSection(**merged["run"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    config.validate()
    return config
