"""Helpers mapping frozen dataclasses to camelCase JSON sections."""
from __future__ import annotations

import dataclasses
import re


def camel(name: str) -> str:
    head, *rest = name.split("_")
    return head + "".join(p.title() for p in rest)


def snake(name: str) -> str:
    return re.sub(r"(?<!^)(?=[A-Z])", "_", name).lower()


def to_dict(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, tuple):
            v = list(v)
        out[camel(f.name)] = v
    return out


def from_dict(cls, data: dict | None, section: str, forbid: tuple = (), base=None):
    """Build ``cls`` from a camelCase mapping; unknown keys raise ``ValueError``.

    Keys missing from ``data`` take their value from ``base`` when given.
    """
    data = dict(data or {})
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        name = snake(key)
        if name not in fields or name in forbid:
            raise ValueError(f"unknown key {key!r} in config section {section!r}")
        default = fields[name].default
        if isinstance(default, tuple) and isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    if base is not None:
        return dataclasses.replace(base, **kwargs)
    return cls(**kwargs)
