"""CSV / binary serialization shared by all modules.

Floats are written with 17 significant digits so every value round-trips
bit-exactly through text.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np


def fmt(x: Any) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.17g}"


def write_csv(path: str | Path, header: Sequence[str], columns: Sequence[Sequence[Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = len(columns[0]) if columns else 0
    if any(len(c) != n for c in columns):
        raise ValueError("columns must have equal length")
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(n):
            writer.writerow([fmt(c[i]) for c in columns])
    return path


def read_csv(path: str | Path) -> dict[str, np.ndarray]:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [row for row in reader]
    out: dict[str, np.ndarray] = {}
    for j, name in enumerate(header):
        col = [row[j] for row in rows]
        try:
            out[name] = np.array([int(v) for v in col], dtype=np.int64)
        except ValueError:
            out[name] = np.array([float(v) for v in col], dtype=np.float64)
    return out


def write_path_csv(path: str | Path, values: np.ndarray) -> Path:
    values = np.asarray(values, dtype=np.float64)
    return write_csv(path, ["n", "z"], [np.arange(len(values)), values])


def write_blocks(path: str | Path, blocks: Iterable[np.ndarray]) -> Path:
    """Concatenate length-prefixed little-endian float64 blocks."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        for block in blocks:
            arr = np.ascontiguousarray(block, dtype="<f8").ravel()
            fh.write(struct.pack("<Q", arr.size))
            fh.write(arr.tobytes())
    return path


def read_blocks(path: str | Path) -> list[np.ndarray]:
    data = Path(path).read_bytes()
    out = []
    pos = 0
    while pos < len(data):
        if pos + 8 > len(data):
            raise ValueError(f"truncated length prefix at byte {pos}")
        (n,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        end = pos + 8 * n
        if end > len(data):
            raise ValueError(f"truncated block at byte {pos}")
        out.append(np.frombuffer(data[pos:end], dtype="<f8").astype(np.float64))
        pos = end
    return out


def _canonical(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {"__type__": type(obj).__name__,
                **{f.name: _canonical(getattr(obj, f.name)) for f in dataclasses.fields(obj)}}
    if isinstance(obj, np.ndarray):
        return {"__array__": list(obj.shape),
                "sha256": hashlib.sha256(np.ascontiguousarray(obj, dtype=np.float64).tobytes()).hexdigest()}
    if isinstance(obj, dict):
        return {str(k): _canonical(v) for k, v in sorted(obj.items(), key=lambda kv: str(kv[0]))}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return fmt(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if callable(obj):
        return getattr(obj, "__qualname__", repr(obj))
    return obj


def canonical_json(obj: Any) -> str:
    return json.dumps(_canonical(obj), sort_keys=True, separators=(",", ":"))


def fingerprint(obj: Any) -> str:
    """Stable short hash of a spec object (dataclasses, arrays, plain data)."""
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]
