"""Line-oriented ``section.key = value`` configuration.

A file may use ``[section]`` headers, after which bare keys get that prefix.
Command-line overrides use the same dotted form and win over file values.
Unknown sections or keys are errors.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, Iterable, Optional, Tuple

from .dataio import DomainShift, SceneConfig
from .pipeline import RunConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 64
    n_test: int = 32
    seed: int = 0


@dataclass(frozen=True)
class AblateConfig:
    seeds: Tuple[int, ...] = (0, 1, 2)


@dataclass(frozen=True)
class Config:
    run: RunConfig = field(default_factory=RunConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    shift: DomainShift = field(default_factory=lambda: DomainShift("seasonal", 0.5))
    data: DataConfig = field(default_factory=DataConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)


SECTIONS = tuple(f.name for f in fields(Config))


def parse_lines(lines: Iterable[str], source: str = "<config>") -> Dict[str, str]:
    out: Dict[str, str] = {}
    section = ""
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{n}: expected key = value")
        key = key.strip()
        if section and "." not in key:
            key = f"{section}.{key}"
        out[key] = value.strip()
    return out


def _coerce(value: str, default, name: str):
    try:
        if isinstance(default, bool):
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(v) for v in value.replace(",", " ").split())
        return value
    except ValueError:
        raise ConfigError(f"bad value for {name}: {value!r}") from None


def apply(cfg: Config, pairs: Dict[str, str]) -> Config:
    updates: Dict[str, dict] = {}
    for key, value in pairs.items():
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"unknown config key {key!r}")
        obj = getattr(cfg, section)
        known = {f.name for f in fields(obj)}
        if name not in known:
            raise ConfigError(f"unknown config key {key!r}")
        updates.setdefault(section, {})[name] = _coerce(value, getattr(obj, name), key)
    try:
        parts = {s: replace(getattr(cfg, s), **kw) for s, kw in updates.items()}
        out = replace(cfg, **parts)
        out.scene.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if len(out.scene.wavelengths) != out.scene.bands:
        raise ConfigError("scene.wavelengths must list one value per band")
    return out


def load(path: Optional[str] = None, overrides: Iterable[str] = (), seed: Optional[int] = None) -> Config:
    pairs: Dict[str, str] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        pairs.update(parse_lines(p.read_text().splitlines(), str(p)))
    over = parse_lines(overrides, "<overrides>")
    pairs.update(over)
    cfg = apply(Config(), pairs)
    if seed is not None and "run.seed" not in over:
        cfg = replace(cfg, run=replace(cfg.run, seed=seed))
    return cfg


def dump(cfg: Config) -> str:
    lines = []
    for section in SECTIONS:
        lines.append(f"[{section}]")
        obj = getattr(cfg, section)
        for f in fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        lines.append("")
    return "\n".join(lines)
