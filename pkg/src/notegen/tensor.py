"""Numeric kernel: checked numpy primitives, seeded RNG, gradient checking
and the named-tensor checkpoint container.

Container layout (all integers little-endian)::

    magic        8 bytes   b"NGTENSR1"
    manifest     u32 length + UTF-8 JSON
    count        u32
    per tensor:  u16 name length, UTF-8 name,
                 u8 ndim, ndim x u64 shape,
                 prod(shape) x f64 data
    crc          u32 CRC-32 of every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .errors import BadRate, CorruptCheckpoint, EmptyInput, ShapeMismatch

MAGIC = b"NGTENSR1"


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator; streams are platform independent."""
    return np.random.Generator(np.random.Philox(seed))


def child_rng(seed: int, *path: int) -> np.random.Generator:
    """Independent stream keyed by ``seed`` and an integer path."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *path])))


def matmul(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def sigmoid(x):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def softmax(x, axis: int = -1):
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0 or x.shape[axis] == 0:
        raise EmptyInput("softmax of an empty vector")
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


_UNARY = {"tanh": np.tanh, "sigmoid": sigmoid}
_BINARY = {"add": np.add, "mul": np.multiply}


def elementwise(op: str, a, b=None):
    """Pointwise op; binary ops accept equal shapes or a scalar operand."""
    a = np.asarray(a, dtype=np.float64)
    if op in _UNARY:
        return _UNARY[op](a)
    if op not in _BINARY:
        raise ValueError(f"unknown op {op!r}")
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape and a.ndim and b.ndim:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} differ")
    return _BINARY[op](a, b)


def dropout_mask(shape, rate: float, rng: np.random.Generator):
    """Inverted dropout: zeros with probability ``rate``, else ``1/(1-rate)``."""
    if not 0.0 <= rate < 1.0:
        raise BadRate(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def numeric_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f(x)
        flat[i] = old - eps
        lo = f(x)
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def grad_check(f, x: np.ndarray, analytic_grad, eps: float = 1e-5) -> float:
    """Max over coordinates of ``|a - n| / max(1e-8, |a| + |n|)``."""
    num = numeric_grad(f, x, eps)
    a = np.asarray(analytic_grad, dtype=np.float64)
    if a.shape != num.shape:
        raise ShapeMismatch(f"gradient shape {a.shape} != input shape {num.shape}")
    if not a.size:
        return 0.0
    err = np.abs(a - num) / np.maximum(1e-8, np.abs(a) + np.abs(num))
    return float(err.max())


# ---------------------------------------------------------------------------
# checkpoint container


def dump_tensors(tensors: dict, manifest: dict | None = None) -> bytes:
    buf = bytearray(MAGIC)
    meta = json.dumps(manifest or {}, sort_keys=True).encode("utf-8")
    buf += struct.pack("<I", len(meta)) + meta
    buf += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += arr.tobytes(order="C")
    buf += struct.pack("<I", zlib.crc32(buf))
    return bytes(buf)


def load_tensors(data: bytes) -> tuple[dict, dict]:
    """Inverse of :func:`dump_tensors`; returns ``(tensors, manifest)``."""
    if len(data) < len(MAGIC) + 12 or data[:len(MAGIC)] != MAGIC:
        raise CorruptCheckpoint("not a tensor container")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != crc:
        raise CorruptCheckpoint("CRC mismatch")
    try:
        pos = len(MAGIC)
        (mlen,) = struct.unpack_from("<I", data, pos)
        manifest = json.loads(data[pos + 4:pos + 4 + mlen].decode("utf-8"))
        pos += 4 + mlen
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2:pos + 2 + nlen].decode("utf-8")
            pos += 2 + nlen
            (ndim,) = struct.unpack_from("<B", data, pos)
            shape = struct.unpack_from(f"<{ndim}Q", data, pos + 1)
            pos += 1 + 8 * ndim
            n = int(np.prod(shape, dtype=np.int64))
            tensors[name] = np.frombuffer(data, "<f8", n, pos).astype(np.float64).reshape(shape)
            pos += 8 * n
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CorruptCheckpoint(f"malformed container: {exc}") from None
    if pos != len(data) - 4:
        raise CorruptCheckpoint("trailing bytes in container")
    return tensors, manifest
