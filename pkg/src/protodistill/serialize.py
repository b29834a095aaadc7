"""Canonical JSON writing so every emitted artifact is byte-comparable.

Keys are sorted, there is no whitespace, and floats are always printed
with 17 significant digits (enough to round-trip any float64 exactly).
Standard json.loads reads the output back.
"""

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import DataError, NumericError


def _emit(obj, parts):
    if obj is None:
        parts.append("null")
    elif isinstance(obj, bool) or isinstance(obj, np.bool_):
        parts.append("true" if obj else "false")
    elif isinstance(obj, (int, np.integer)):
        parts.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not np.isfinite(x):
            raise NumericError("refusing to serialize a non-finite float")
        parts.append(format(x, ".17g"))
    elif isinstance(obj, str):
        parts.append(json.dumps(obj, ensure_ascii=True))
    elif isinstance(obj, dict):
        parts.append("{")
        for idx, key in enumerate(sorted(obj)):
            if not isinstance(key, str):
                raise DataError(f"canonical JSON keys must be strings, got {type(key)!r}")
            if idx:
                parts.append(",")
            parts.append(json.dumps(key, ensure_ascii=True))
            parts.append(":")
            _emit(obj[key], parts)
        parts.append("}")
    elif isinstance(obj, (list, tuple)):
        parts.append("[")
        for idx, item in enumerate(obj):
            if idx:
                parts.append(",")
            _emit(item, parts)
        parts.append("]")
    elif isinstance(obj, np.ndarray):
        _emit(obj.tolist(), parts)
    else:
        raise DataError(f"cannot canonically serialize {type(obj)!r}")


def canonical_dumps(obj) -> str:
    parts = []
    _emit(obj, parts)
    return "".join(parts)


def write_json(path, obj) -> None:
    Path(path).write_text(canonical_dumps(obj) + "\n", encoding="ascii")


def read_json(path):
    p = Path(path)
    if not p.exists():
        raise DataError(f"no such file: {p}")
    try:
        return json.loads(p.read_text(encoding="ascii"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DataError(f"malformed JSON in {p}: {exc}") from exc


def sha256_bytes(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def float_key(x: float) -> str:
    """Stable string key for a float (used for tau-indexed tables)."""
    return format(float(x), ".17g")
