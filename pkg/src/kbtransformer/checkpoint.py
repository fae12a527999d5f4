"""Versioned plain-text tensor files.

Layout::

    kbtransformer-checkpoint 1 <kind>
    meta <key> <value>
    tensor <name> <dim0>x<dim1>...
    <one line of space separated %.17g floats per leading index>
    end

Seventeen significant digits make every float64 round-trip bit-exactly.
"""
from __future__ import annotations

import io
from pathlib import Path

import numpy as np

MAGIC = "kbtransformer-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _fmt(a: np.ndarray) -> str:
    a = np.asarray(a, dtype=float)
    rows = a.reshape(a.shape[0], -1) if a.ndim > 1 else a.reshape(1, -1)
    return "\n".join(" ".join("%.17g" % v for v in row) for row in rows)


def dumps(kind: str, tensors: dict, meta: dict | None = None) -> str:
    out = io.StringIO()
    out.write(f"{MAGIC} {VERSION} {kind}\n")
    for k, v in (meta or {}).items():
        out.write(f"meta {k} {v}\n")
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=float)
        shape = "x".join(str(s) for s in arr.shape) if arr.ndim else "scalar"
        out.write(f"tensor {name} {shape}\n")
        if arr.size:
            out.write(_fmt(arr.reshape(-1) if arr.ndim == 0 else arr) + "\n")
    out.write("end\n")
    return out.getvalue()


def loads(text: str, kind: str | None = None, required=()) -> tuple[dict, dict]:
    lines = text.splitlines()
    if not lines:
        raise CheckpointError("empty checkpoint")
    head = lines[0].split()
    if len(head) != 3 or head[0] != MAGIC:
        raise CheckpointError("not a kbtransformer checkpoint")
    if head[1] != str(VERSION):
        raise CheckpointError(f"unsupported checkpoint version {head[1]} (expected {VERSION})")
    if kind is not None and head[2] != kind:
        raise CheckpointError(f"checkpoint holds {head[2]!r}, expected {kind!r}")
    meta, tensors = {}, {}
    i, ended = 1, False
    while i < len(lines):
        parts = lines[i].split()
        i += 1
        if not parts:
            continue
        if parts[0] == "end":
            ended = True
            break
        if parts[0] == "meta":
            meta[parts[1]] = " ".join(parts[2:])
        elif parts[0] == "tensor":
            name, spec = parts[1], parts[2]
            shape = () if spec == "scalar" else tuple(int(s) for s in spec.split("x"))
            n_rows = 1 if len(shape) <= 1 else shape[0]
            size = int(np.prod(shape)) if shape else 1
            if size == 0:
                tensors[name] = np.zeros(shape)
                continue
            if i + n_rows > len(lines):
                raise CheckpointError(f"truncated data for tensor {name!r}")
            try:
                vals = [float(v) for ln in lines[i:i + n_rows] for v in ln.split()]
            except ValueError as exc:
                raise CheckpointError(f"malformed value in tensor {name!r}: {exc}") from None
            if len(vals) != size:
                raise CheckpointError(f"tensor {name!r}: expected {size} values, got {len(vals)}")
            tensors[name] = np.array(vals).reshape(shape)
            i += n_rows
        else:
            raise CheckpointError(f"unexpected line {i}: {lines[i - 1][:40]!r}")
    names = required(meta) if callable(required) else required
    missing = [r for r in names if r not in tensors]
    if missing:
        raise CheckpointError(f"missing tensor {missing[0]!r}")
    if not ended:
        raise CheckpointError("truncated checkpoint: no end marker")
    return tensors, meta


def save(path, kind: str, tensors: dict, meta: dict | None = None) -> None:
    Path(path).write_text(dumps(kind, tensors, meta))


def load(path, kind: str | None = None, required=()) -> tuple[dict, dict]:
    return loads(Path(path).read_text(), kind=kind, required=required)
