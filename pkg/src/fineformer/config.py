"""Run configuration: INI sections ``[model] [data] [train] [paths]``.

Keys map one-to-one onto :class:`ModelConfig`, :class:`SyntheticSpec` and
:class:`TrainConfig` fields, plus ``model.arch``, ``model.seed`` and the
``paths`` entries. Unknown sections or keys are errors. Model extents that
the data spec also defines (tokens, channels, ...) are copied from
``[data]`` unless set explicitly, and must agree if both are given.
"""

from __future__ import annotations

import configparser
from dataclasses import MISSING, dataclass, field, fields
from pathlib import Path
from typing import Sequence

from .architectures import ARCHITECTURES, ModelConfig
from .synthdata import SyntheticSpec
from .training import TrainConfig


class ConfigError(ValueError):
    pass


SHARED_EXTENTS = {
    "tokens": "tokens", "channels": "channels", "vocab_size": "num_attributes",
    "num_classes": "num_classes", "frames": "frames", "frame_h": "frame_h", "frame_w": "frame_w",
}
PATH_KEYS = ("dataset", "checkpoint", "out")


@dataclass
class RunConfig:
    model: ModelConfig
    data: SyntheticSpec
    train: TrainConfig
    arch: str = "vision"
    model_seed: int = 0
    paths: dict[str, str] = field(default_factory=lambda: {k: "" for k in PATH_KEYS})

    def path(self, key: str, default: str | Path | None = None) -> Path | None:
        value = self.paths.get(key, "")
        if value:
            return Path(value)
        return Path(default) if default is not None else None

    def to_ini(self) -> str:
        sections = {
            "model": {"arch": self.arch, "seed": self.model_seed, **self.model.to_dict()},
            "data": self.data.to_dict(),
            "train": self.train.to_dict(),
            "paths": self.paths,
        }
        lines = []
        for name, values in sections.items():
            lines.append(f"[{name}]")
            lines += [f"{k} = {_format(v)}" for k, v in values.items()]
            lines.append("")
        return "\n".join(lines)


def _format(value) -> str:
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _coerce(cls, key: str, raw: str):
    f = {f.name: f for f in fields(cls)}[key]
    default = f.default if f.default is not MISSING else None
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from exc
    return raw


def _section(cls, values: dict[str, str], section: str) -> dict:
    known = {f.name for f in fields(cls)}
    out = {}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"unknown key {section}.{key}")
        out[key] = _coerce(cls, key, raw)
    return out


def parse_overrides(items: Sequence[str]) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    for item in items:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        key, value = item.split("=", 1)
        section, name = key.strip().split(".", 1)
        out.setdefault(section, {})[name] = value
    return out


def load_run_config(path: str | Path | None = None, overrides: Sequence[str] = ()) -> RunConfig:
    raw: dict[str, dict[str, str]] = {s: {} for s in ("model", "data", "train", "paths")}
    if path is not None:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            with open(path) as f:
                cp.read_file(f)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        for section in cp.sections():
            if section not in raw:
                raise ConfigError(f"unknown section [{section}]")
            raw[section].update(cp[section])
    for section, values in parse_overrides(overrides).items():
        if section not in raw:
            raise ConfigError(f"unknown section {section!r} in override")
        raw[section].update(values)

    model_raw = dict(raw["model"])
    arch = model_raw.pop("arch", "vision").strip()
    if arch not in ARCHITECTURES:
        raise ConfigError(f"model.arch must be one of {sorted(ARCHITECTURES)}, got {arch!r}")
    try:
        seed = int(model_raw.pop("seed", "0"))
    except ValueError as exc:
        raise ConfigError("model.seed must be an integer") from exc

    for key in raw["paths"]:
        if key not in PATH_KEYS:
            raise ConfigError(f"unknown key paths.{key}")
    paths = {k: raw["paths"].get(k, "").strip() for k in PATH_KEYS}

    try:
        data = SyntheticSpec(**_section(SyntheticSpec, raw["data"], "data"))
        model_vals = _section(ModelConfig, model_raw, "model")
        for mkey, dkey in SHARED_EXTENTS.items():
            dval = getattr(data, dkey)
            if mkey in model_vals and model_vals[mkey] != dval:
                raise ConfigError(f"model.{mkey}={model_vals[mkey]} disagrees with data.{dkey}={dval}")
            model_vals[mkey] = dval
        model = ModelConfig(**model_vals)
        train = TrainConfig(**_section(TrainConfig, raw["train"], "train"))
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(model, data, train, arch, seed, paths)
