"""Strict dict <-> dataclass conversion for configs and checkpoints."""

from __future__ import annotations

import dataclasses
import typing
from typing import Any, Dict, Type, TypeVar

T = TypeVar("T")


def from_nested_dict(cls: Type[T], data: Dict[str, Any],
                     path: str = "") -> T:
    """Build a (possibly nested) dataclass from a plain dict.

    Unknown keys raise with their dotted path; missing keys fall back to
    the dataclass defaults. Lists feeding tuple-typed fields are coerced
    to tuples so round trips through YAML/JSON stay equal.
    """
    if not dataclasses.is_dataclass(cls):
        raise TypeError(f"{cls!r} is not a dataclass")
    if not isinstance(data, dict):
        where = path or cls.__name__
        raise ValueError(f"{where}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for key, value in data.items():
        if key not in fields:
            where = f"{path}.{key}" if path else key
            raise ValueError(f"unknown configuration key: {where}")
        hint = hints.get(key, fields[key].type)
        sub_path = f"{path}.{key}" if path else key
        kwargs[key] = _coerce(hint, value, sub_path)
    return cls(**kwargs)


def _coerce(hint: Any, value: Any, path: str) -> Any:
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if value is None:
            return None
        if len(args) == 1:
            return _coerce(args[0], value, path)
        return value
    if dataclasses.is_dataclass(hint):
        return from_nested_dict(hint, value, path)
    if origin is tuple and isinstance(value, (list, tuple)):
        return tuple(value)
    if origin is list and isinstance(value, (list, tuple)):
        return list(value)
    return value


def to_nested_dict(obj: Any) -> Dict[str, Any]:
    """dataclasses.asdict with tuples rendered as lists (YAML-friendly)."""
    def factory(items):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in items}

    return dataclasses.asdict(obj, dict_factory=factory)
