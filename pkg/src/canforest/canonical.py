"""Byte-stable text encoding and seed derivation.

Objects are JSON with sorted keys, no whitespace, and floats in their shortest
round-trip form, so equal models always hash to equal digests.
"""

from __future__ import annotations

import hashlib
import json
import math

import numpy as np


def _enc(obj, out: list[str]) -> None:
    if obj is None or isinstance(obj, (bool, np.bool_)):
        out.append(json.dumps(None if obj is None else bool(obj)))
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        v = float(obj)
        if not math.isfinite(v):
            raise ValueError(f"cannot encode non-finite float {v}")
        out.append(repr(v))
    elif isinstance(obj, str):
        out.append(json.dumps(obj, ensure_ascii=True))
    elif isinstance(obj, dict):
        out.append("{")
        for i, key in enumerate(sorted(obj)):
            if not isinstance(key, str):
                raise TypeError("canonical dict keys must be strings")
            if i:
                out.append(",")
            out.append(json.dumps(key, ensure_ascii=True))
            out.append(":")
            _enc(obj[key], out)
        out.append("}")
    elif isinstance(obj, (list, tuple, np.ndarray)):
        out.append("[")
        for i, item in enumerate(obj):
            if i:
                out.append(",")
            _enc(item, out)
        out.append("]")
    else:
        raise TypeError(f"cannot canonically encode {type(obj).__name__}")


def dumps(obj) -> str:
    out: list[str] = []
    _enc(obj, out)
    return "".join(out)


def dump_bytes(obj) -> bytes:
    return dumps(obj).encode("ascii")


def loads(data: str | bytes):
    return json.loads(data)


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def derive_seed(master: int, *names) -> int:
    """Per-component seed: hash of (master seed, component path)."""
    key = ":".join([str(int(master))] + [str(n) for n in names]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "big") >> 1
