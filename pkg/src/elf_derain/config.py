"""Run configuration: INI-style config files plus command-line overrides.

Sections mirror the component dataclasses ([model], [rain], [optim],
[train]); unknown sections or keys are rejected, and the fully resolved
config is serialized into every run directory so runs are reproducible from
their outputs alone.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import json
import platform
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import RainParams
from .model import ModelConfig, variant_config
from .optim import OptimConfig
from .tensor import EngineError


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 2
    seed: int = 0
    save_every: int = 0          # extra checkpoint every N steps; 0 = final only
    max_steps: int = 0           # stop after N steps; 0 = run all epochs
    patch: int = 0               # crop size; 0 trains on full images
    patches_per_image: int = 1
    resume: str = ""             # checkpoint path to continue from


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    rain: RainParams = field(default_factory=RainParams)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


_SECTIONS = {"model": ModelConfig, "rain": RainParams, "optim": OptimConfig,
             "train": TrainConfig}


def _parse_value(raw: str, current):
    if isinstance(current, bool):
        lowered = raw.strip().lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise EngineError(f"config: cannot parse boolean from {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        parts = [float(p) for p in raw.split(",")]
        if len(parts) != len(current):
            raise EngineError(f"config: expected {len(current)} comma-separated values, got {raw!r}")
        return tuple(parts)
    return raw


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(repr(float(x)) for x in v)
    return str(v)


def _apply(section: str, settings: dict[str, str], base) -> dict:
    cls = _SECTIONS[section]
    valid = {f.name: f for f in fields(cls)}
    kwargs = {}
    # the model variant resets the architecture defaults, so apply it first
    if section == "model" and "variant" in settings:
        base = variant_config(settings.pop("variant"))
    for key, raw in settings.items():
        if key not in valid:
            raise EngineError(f"config: unknown key {key!r} in section [{section}]")
        kwargs[key] = _parse_value(raw, getattr(base, key))
    return dataclasses.replace(base, **kwargs) if kwargs else base


def load_run_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    """Read an INI config file and apply ``section.key=value`` overrides."""
    sections: dict[str, dict[str, str]] = {name: {} for name in _SECTIONS}
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(str(path))
        if not read:
            raise EngineError(f"config file not found: {path}")
        for section in parser.sections():
            if section not in _SECTIONS:
                raise EngineError(f"config: unknown section [{section}]")
            sections[section].update(dict(parser[section]))
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise EngineError(f"override must look like section.key=value, got {item!r}")
        dotted, value = item.split("=", 1)
        section, key = dotted.split(".", 1)
        if section not in _SECTIONS:
            raise EngineError(f"config: unknown section {section!r} in override {item!r}")
        sections[section][key] = value

    rc = RunConfig()
    rc.model = _apply("model", sections["model"], rc.model)
    rc.rain = _apply("rain", sections["rain"], rc.rain)
    rc.optim = _apply("optim", sections["optim"], rc.optim)
    rc.train = _apply("train", sections["train"], rc.train)
    return rc


def serialize_run_config(rc: RunConfig) -> str:
    parser = configparser.ConfigParser()
    for section, obj in (("model", rc.model), ("rain", rc.rain),
                         ("optim", rc.optim), ("train", rc.train)):
        parser[section] = {f.name: _format_value(getattr(obj, f.name))
                           for f in fields(type(obj))}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def write_run_info(out_dir, command: str, seed: int) -> None:
    """Drop a small provenance record (command, versions, seed) in a run dir."""
    import numba

    from . import __version__
    from .kernels import backend_name

    info = {
        "command": command,
        "seed": seed,
        "versions": {
            "elf_derain": __version__,
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "numba": numba.__version__,
        },
        "kernel_backend": backend_name(),
        "platform": platform.platform(),
    }
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    (Path(out_dir) / "run_info.json").write_text(json.dumps(info, indent=2) + "\n",
                                                 encoding="utf-8")
