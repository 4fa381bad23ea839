"""Run configuration: dataclass tree, INI files, presets and ``section.key=value`` overrides.

Layering order is defaults, then preset, then config file, then overrides.
"""
from __future__ import annotations

import configparser
import dataclasses
import io
import types
import typing
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Iterable, Mapping

from ..appearance import AppearanceConfig
from ..condprep import PrepConfig
from ..injection import InjectionConfig
from ..restart import RestartConfig
from ..scheduler import NoiseSchedule


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def build(self) -> NoiseSchedule:
        return NoiseSchedule(self.T, self.beta_start, self.beta_end)


@dataclass(frozen=True)
class CondprepSection:
    enabled: bool = True
    prep: PrepConfig = PrepConfig()


@dataclass(frozen=True)
class ArpConfig:
    enabled: bool = True
    client: str = "env"  # env | mock | echo | live
    fixtures: str | None = None


@dataclass(frozen=True)
class RunSection:
    steps: int = 50
    eta: float = 1.0
    restart_eta: float = 0.0
    clip_x0: float | None = 1.0
    seed: int = 0
    size: int = 32
    output_dir: str = "runs"
    preset: str = "paper-default"
    weights: str | None = None


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = RunSection()
    schedule: ScheduleConfig = ScheduleConfig()
    injection: InjectionConfig = InjectionConfig()
    appearance: AppearanceConfig = AppearanceConfig()
    restart: RestartConfig = RestartConfig()
    condprep: CondprepSection = CondprepSection()
    arp: ArpConfig = ArpConfig()

    # flat view used by the INI format
    def sections(self) -> dict[str, Any]:
        return {
            "run": self.run,
            "schedule": self.schedule,
            "injection": self.injection,
            "appearance": self.appearance,
            "restart": self.restart,
            "condprep": self.condprep,
            "arp": self.arp,
        }

    def to_dict(self) -> dict[str, dict[str, Any]]:
        out = {}
        for name, obj in self.sections().items():
            out[name] = _flat(obj)
        return out

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for name, values in self.to_dict().items():
            cp[name] = {k: _format(v) for k, v in values.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def with_overrides(self, overrides: Mapping[str, Mapping[str, Any]]) -> "RunConfig":
        current = self
        for section, values in overrides.items():
            if section not in self.sections():
                raise ConfigError(f"unknown config section [{section}]")
            current = _set_section(current, section, dict(values))
        return current

    def with_settings(self, settings: Iterable[str]) -> "RunConfig":
        return self.with_overrides(parse_settings(settings))

    def validate(self) -> "RunConfig":
        """Check that referenced files exist; returns ``self``."""
        if self.run.weights is not None and not Path(self.run.weights).is_file():
            raise ConfigError(f"run.weights: {self.run.weights} does not exist")
        if self.arp.fixtures is not None and not Path(self.arp.fixtures).is_dir():
            raise ConfigError(f"arp.fixtures: {self.arp.fixtures} is not a directory")
        if self.arp.client not in ("env", "mock", "echo", "live"):
            raise ConfigError(f"arp.client must be env, mock, echo or live, got {self.arp.client!r}")
        return self


def _flat(obj) -> dict[str, Any]:
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            out.update(_flat(v))
        else:
            out[f.name] = v
    return out


def _format(v: Any) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(raw: Any, hint) -> Any:
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if text.lower() in ("none", ""):
            return None
        return _parse(text, args[0])
    if origin is tuple:
        args = typing.get_args(hint)
        items = [s.strip() for s in text.split(",") if s.strip()]
        elem = args[0]
        return tuple(_parse(s, elem) for s in items)
    if hint is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if hint is int:
        return int(text)
    if hint is float:
        return float(text)
    return text


def _replace_flat(obj, values: dict[str, Any], where: str):
    hints = typing.get_type_hints(type(obj))
    changes = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            changes[f.name] = _replace_flat(v, values, where)
        elif f.name.lower() in values:
            try:
                changes[f.name] = _parse(values.pop(f.name.lower()), hints[f.name])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {where}.{f.name}: {exc}") from exc
    try:
        return replace(obj, **changes)
    except ValueError as exc:
        raise ConfigError(f"[{where}] {exc}") from exc


def _set_section(cfg: RunConfig, section: str, values: dict[str, Any]) -> RunConfig:
    remaining = {k.lower(): v for k, v in values.items()}
    new = _replace_flat(getattr(cfg, section), remaining, section)
    if remaining:
        raise ConfigError(f"unknown key(s) in [{section}]: {sorted(remaining)}")
    return replace(cfg, **{section: new})


def parse_settings(settings: Iterable[str]) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    for item in settings:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not name:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        out.setdefault(section, {})[name] = value
    return out


def read_ini(path: Path | str) -> dict[str, dict[str, str]]:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    cp.read(path, encoding="utf-8")
    return {s: dict(cp[s]) for s in cp.sections()}


PRESETS: dict[str, dict[str, dict[str, Any]]] = {
    "paper-default": {},
    "synchronous": {"injection": {"schedule": "synchronous"}},
    "disabled": {
        "injection": {"layers": ""},
        "appearance": {"layers": ""},
        "restart": {"N": "0", "N_prime": "1"},
        "condprep": {"enabled": "false"},
        "arp": {"enabled": "false"},
    },
}


def preset(name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    cfg = RunConfig().with_overrides(PRESETS[name])
    return cfg.with_overrides({"run": {"preset": name}})


def load_config(preset_name: str = "paper-default", path: Path | str | None = None,
                settings: Iterable[str] = ()) -> RunConfig:
    base = preset(preset_name)
    if path is not None:
        base = base.with_overrides(read_ini(path))
    return base.with_settings(settings).validate()
