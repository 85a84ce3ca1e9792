"""Numeric primitives shared by every other module.

Tensors are plain ``numpy.ndarray`` values; everything numeric is float64.
Randomness comes from ``numpy.random.Generator`` backed by the PCG64 bit
generator, which numpy guarantees to be stream-stable across platforms for a
given seed.

The SGT1 on-disk format (little-endian)::

    bytes 0-3   magic b"SGT1"
    byte  4     dtype code: 1 = f32, 2 = f64, 3 = u8
    byte  5     rank r
    4*r bytes   extents as u32
    payload     row-major elements, no padding, no checksum
"""

from __future__ import annotations

import os
import struct

import numpy as np

EPS_P = 1e-12  # probability floor inside every log

MAGIC = b"SGT1"
DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("u1")}


class ShapeMismatchError(ValueError):
    pass


class TensorFormatError(ValueError):
    """Base class for malformed SGT1 files."""


class BadMagicError(TensorFormatError):
    pass


class TruncatedPayloadError(TensorFormatError):
    pass


class UnknownDtypeError(TensorFormatError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; identical seed gives an identical stream everywhere."""
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def sub_seed(seed: int, *path: int) -> int:
    """Derive an independent child seed from ``seed`` and an index path."""
    ss = np.random.SeedSequence(seed, spawn_key=tuple(int(p) for p in path))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "operands") -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{what}: shape {tuple(a.shape)} vs {tuple(b.shape)}")


def add(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    check_same_shape(a, b, "add")
    return a + b


def mul(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    check_same_shape(a, b, "mul")
    return a * b


def maximum(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    check_same_shape(a, b, "maximum")
    return np.maximum(a, b)


def reduce_sum(t, axis=None):
    t = np.asarray(t, dtype=np.float64)
    _check_axis(t, axis)
    return t.sum(axis=axis)


def reduce_mean(t, axis=None):
    t = np.asarray(t, dtype=np.float64)
    _check_axis(t, axis)
    return t.mean(axis=axis)


def _check_axis(t, axis):
    if axis is not None and not -t.ndim <= axis < t.ndim:
        raise ValueError(f"axis {axis} invalid for tensor of shape {t.shape}")


def safe_log(p):
    """Natural log with the global probability floor applied first."""
    return np.log(np.maximum(p, EPS_P))


def softmax_channels(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    """Softmax over the class axis (axis 1 for ``[B, K, H, W]`` maps)."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim == 0 or logits.shape[axis] < 2:
        raise ValueError(f"class axis needs extent >= 2, got shape {logits.shape}")
    if not np.all(np.isfinite(logits)):
        raise ValueError("softmax_channels: non-finite logits")
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def save_tensor(t: np.ndarray, path, dtype: str | None = None) -> None:
    """Write ``t`` as SGT1. ``dtype`` in {"f32", "f64", "u8"} overrides the array's own."""
    t = np.asarray(t)
    if dtype is not None:
        target = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "u8": np.dtype("u1")}[dtype]
        t = t.astype(target)
    code = next((c for c, dt in DTYPE_CODES.items()
                 if t.dtype.kind == dt.kind and t.dtype.itemsize == dt.itemsize), None)
    if code is None:
        raise UnknownDtypeError(f"cannot store dtype {t.dtype}; use f32, f64 or u8")
    if t.ndim < 1 or t.ndim > 255 or any(s < 1 for s in t.shape):
        raise ValueError(f"unsupported shape {t.shape}")
    header = MAGIC + struct.pack("<BB", code, t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
    payload = np.ascontiguousarray(t, dtype=DTYPE_CODES[code]).tobytes()
    with open(os.fspath(path), "wb") as fh:
        fh.write(header)
        fh.write(payload)


def load_tensor(path) -> np.ndarray:
    with open(os.fspath(path), "rb") as fh:
        raw = fh.read()
    return decode_tensor(raw)


def decode_tensor(raw: bytes) -> np.ndarray:
    if len(raw) < 6:
        raise TruncatedPayloadError(f"header needs 6 bytes, file has {len(raw)}")
    if raw[:4] != MAGIC:
        raise BadMagicError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    code, rank = raw[4], raw[5]
    if code not in DTYPE_CODES:
        raise UnknownDtypeError(f"unknown dtype code {code}")
    if rank < 1:
        raise TensorFormatError("rank must be >= 1")
    hdr_end = 6 + 4 * rank
    if len(raw) < hdr_end:
        raise TruncatedPayloadError("file ends inside the extent table")
    shape = struct.unpack(f"<{rank}I", raw[6:hdr_end])
    dt = DTYPE_CODES[code]
    n = int(np.prod(shape))
    expected = n * dt.itemsize
    got = len(raw) - hdr_end
    if got < expected:
        raise TruncatedPayloadError(f"header declares {n} elements ({expected} bytes), payload has {got} bytes")
    if got > expected:
        raise TensorFormatError(f"{got - expected} trailing bytes after payload")
    return np.frombuffer(raw, dtype=dt, count=n, offset=hdr_end).reshape(shape).copy()
