"""YAML training configuration with line-numbered diagnostics, plus CLI overrides."""
from __future__ import annotations

import argparse
import dataclasses
import re
from pathlib import Path
from typing import Any

import yaml

from .training import ConfigError, OptimConfig, TrainConfig
from .data import DatasetSpec
from .networks import NetConfig

_NESTED = {"optim": OptimConfig, "net": NetConfig, "data": DatasetSpec}


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads exponent floats without a dot (``1e-5``) as numbers."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
    |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
    |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
    |[-+]?\.(?:inf|Inf|INF)
    |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."))


class ConfigFileError(ValueError):
    def __init__(self, path: str, line: int | None, field: str | None, message: str):
        where = f"{path}:{line}" if line else path
        prefix = f"{where}: field '{field}': " if field else f"{where}: "
        super().__init__(prefix + message)
        self.path, self.line, self.field = path, line, field


def _key_lines(node, prefix: str = "") -> dict[str, int]:
    """Map dotted keys to 1-based line numbers of their key in the document."""
    out: dict[str, int] = {}
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            name = f"{prefix}{k.value}"
            out[name] = k.start_mark.line + 1
            out.update(_key_lines(v, name + "."))
    return out


def _check_type(name: str, default: Any, value: Any) -> Any:
    """Accept ``value`` for a field whose default is ``default``; return it coerced."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", name)
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", name)
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", name)
        value = float(value)
    elif isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"expected a list, got {value!r}", name)
        value = tuple(value)
    elif isinstance(default, str) or default is None:
        if value is not None and not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", name)
    return value


def _defaults(typ) -> dict[str, Any]:
    inst = typ()
    return {f.name: getattr(inst, f.name) for f in dataclasses.fields(typ)}


def _typed(raw: dict) -> dict:
    top = _defaults(TrainConfig)
    out = {}
    for key, value in raw.items():
        if key in _NESTED:
            if value is None:
                continue
            if not isinstance(value, dict):
                raise ConfigError("expected a mapping", key)
            sub_defaults = _defaults(_NESTED[key])
            sub = {}
            for k, v in value.items():
                if k not in sub_defaults:
                    raise ConfigError("unknown field", f"{key}.{k}")
                sub[k] = _check_type(f"{key}.{k}", sub_defaults[k], v)
            out[key] = sub
        elif key in top:
            out[key] = _check_type(key, top[key], value)
        else:
            raise ConfigError("unknown field", key)
    return out


def parse_config(text: str, path: str = "<config>", overrides: dict[str, Any] | None = None) -> TrainConfig:
    try:
        node = yaml.compose(text, Loader=_Loader)
        raw = yaml.load(text, Loader=_Loader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigFileError(path, mark.line + 1 if mark else None, None,
                              f"YAML syntax error: {getattr(exc, 'problem', exc)}") from exc
    raw = {} if raw is None else raw
    if not isinstance(raw, dict):
        raise ConfigFileError(path, 1, None, "top level must be a mapping")
    lines = _key_lines(node)
    for dotted, value in (overrides or {}).items():
        head, _, tail = dotted.partition(".")
        if tail:
            raw.setdefault(head, {})
            if raw[head] is None:
                raw[head] = {}
            raw[head][tail] = value
        else:
            raw[head] = value
    try:
        return TrainConfig.from_dict(_typed(raw))
    except ConfigError as exc:
        line = lines.get(exc.field) if exc.field else None
        if line is None and exc.field:
            line = lines.get(exc.field.split(".")[0])
        msg = str(exc)
        raise ConfigFileError(path, line, exc.field, msg) from exc


def load_config(path: str | Path, overrides: dict[str, Any] | None = None) -> TrainConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigFileError(str(path), None, None, "configuration file not found")
    return parse_config(path.read_text(), str(path), overrides)


def dump_config(cfg: TrainConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


# -- command-line overrides ------------------------------------------------------

def field_names() -> list[str]:
    names = []
    for f in dataclasses.fields(TrainConfig):
        if f.name in _NESTED:
            names += [f"{f.name}.{g.name}" for g in dataclasses.fields(_NESTED[f.name])]
        else:
            names.append(f.name)
    return names


def add_override_flags(parser: argparse.ArgumentParser) -> None:
    """One ``--<field>`` flag per configuration field (nested ones as ``--net.stages``)."""
    group = parser.add_argument_group("configuration overrides (YAML syntax values)")
    for name in field_names():
        group.add_argument(f"--{name.replace('_', '-')}", dest=f"set:{name}", metavar="V",
                           default=None)


def collect_overrides(args: argparse.Namespace) -> dict[str, Any]:
    out = {}
    for key, value in vars(args).items():
        if key.startswith("set:") and value is not None:
            out[key[4:]] = yaml.load(value, Loader=_Loader)
    return out
