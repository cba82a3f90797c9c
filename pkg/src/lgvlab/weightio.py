"""LGVW weight files: a small binary container for K stacked weight vectors.

Layout (little-endian)::

    b"LGVW" | u32 version=1 | u8 dtype (0=f32, 1=f64) | u32 K | u64 p | K*p values

A JSON sidecar (``<path>.json``) carries the model spec and collection metadata.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"LGVW"
VERSION = 1
_HEADER = struct.Struct("<4sIBIQ")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class WeightFileError(IOError):
    pass


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_weights(path, weights: np.ndarray, *, spec=None, meta: dict | None = None,
                  dtype: str = "f64") -> Path:
    weights = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    if weights.ndim != 2:
        raise ValueError("weights must be a K x p matrix")
    tag = {"f32": 0, "f64": 1}[dtype]
    K, p = weights.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, tag, K, p))
        fh.write(weights.astype(_DTYPES[tag]).tobytes())
    side = {"dtype": dtype, "K": K, "p": p, "meta": meta or {}}
    if spec is not None:
        side["spec"] = spec.to_dict()
        side["spec_hash"] = spec.spec_hash
    sidecar_path(path).write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
    return path


def read_weights(path) -> tuple[np.ndarray, dict]:
    """Return the (K, p) float64 matrix and the sidecar dict (empty if absent)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise WeightFileError(f"cannot read weight file {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise WeightFileError(f"{path}: truncated header")
    magic, version, tag, K, p = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise WeightFileError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise WeightFileError(f"{path}: unsupported version {version}")
    if tag not in _DTYPES:
        raise WeightFileError(f"{path}: unknown dtype tag {tag}")
    dt = _DTYPES[tag]
    expected = _HEADER.size + K * p * dt.itemsize
    if len(raw) != expected:
        raise WeightFileError(f"{path}: expected {expected} bytes, found {len(raw)}")
    values = np.frombuffer(raw, dtype=dt, offset=_HEADER.size).astype(np.float64)
    side = {}
    sp = sidecar_path(path)
    if sp.exists():
        side = json.loads(sp.read_text())
    return values.reshape(K, p), side
