"""JSON emission with 17-significant-digit decimal floats.

The stdlib json encoder always uses repr() for floats; the on-disk teacher and
target-cache formats pin 17 significant digits, which round-trips every finite
double exactly, so these files are emitted by a small recursive writer.
"""
from __future__ import annotations

import json
import math

from .errors import InvalidInput, ParseError


def format_float(x: float) -> str:
    if not math.isfinite(x):
        raise InvalidInput("on-disk formats only carry finite reals")
    return format(float(x), ".17g")


def _emit(obj, parts: list[str]) -> None:
    if isinstance(obj, dict):
        parts.append("{")
        for i, (k, v) in enumerate(obj.items()):
            if i:
                parts.append(",")
            parts.append(json.dumps(k))
            parts.append(":")
            _emit(v, parts)
        parts.append("}")
    elif isinstance(obj, (list, tuple)):
        parts.append("[")
        for i, v in enumerate(obj):
            if i:
                parts.append(",")
            _emit(v, parts)
        parts.append("]")
    elif isinstance(obj, bool):
        parts.append("true" if obj else "false")
    elif isinstance(obj, int):
        parts.append(str(obj))
    elif isinstance(obj, float):
        parts.append(format_float(obj))
    elif isinstance(obj, str):
        parts.append(json.dumps(obj))
    elif obj is None:
        parts.append("null")
    else:
        raise InvalidInput(f"cannot serialize {type(obj).__name__}")


def dumps(obj) -> str:
    parts: list[str] = []
    _emit(obj, parts)
    return "".join(parts)


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(obj))
        fh.write("\n")


def read_json(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON at line {exc.lineno}") from exc
