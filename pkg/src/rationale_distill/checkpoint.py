"""Named-parameter checkpoints.

A checkpoint directory holds ``manifest.txt`` (one ``name shape offset`` line
per parameter, shape written as ``AxB``, offset counted in float64 elements)
and ``params.bin`` (little-endian float64 values in manifest order).
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

MANIFEST = "manifest.txt"
BLOB = "params.bin"


def _fmt_shape(shape) -> str:
    return "x".join(str(s) for s in shape) if shape else "scalar"


def _parse_shape(text: str) -> tuple[int, ...]:
    return () if text == "scalar" else tuple(int(s) for s in text.split("x"))


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = []
    offset = 0
    chunks = []
    for name, arr in arrays.items():
        if any(c.isspace() for c in name):
            raise ValueError(f"parameter name {name!r} contains whitespace")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        lines.append(f"{name} {_fmt_shape(arr.shape)} {offset}\n")
        chunks.append(arr.tobytes())
        offset += arr.size
    (path / MANIFEST).write_text("".join(lines))
    (path / BLOB).write_bytes(b"".join(chunks))


def load_arrays(path) -> dict[str, np.ndarray]:
    path = Path(path)
    blob = np.frombuffer((path / BLOB).read_bytes(), dtype="<f8")
    out: dict[str, np.ndarray] = {}
    for line in (path / MANIFEST).read_text().splitlines():
        if not line.strip():
            continue
        name, shape_text, offset_text = line.split()
        shape = _parse_shape(shape_text)
        size = int(np.prod(shape)) if shape else 1
        offset = int(offset_text)
        if offset + size > blob.size:
            raise ValueError(f"checkpoint blob too short for parameter {name}")
        out[name] = blob[offset:offset + size].reshape(shape).astype(np.float64)
    return out


def write_keyvalue(path, values: dict) -> None:
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in values.items()))


def read_keyvalue(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out
