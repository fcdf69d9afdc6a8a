"""Little-endian binary containers for feature tensors, demixing tensors and networks.

``IVFT``  magic, u32 version, u32 N, u32 T, u32 K, then N*T*K f32 with k
          slowest, then t, then n fastest.
``IVFW``  magic, u32 version, u32 N, u32 K, then K*N*N f32 (k slowest, each
          matrix row-major).
``IVFN``  magic, u32 version, u32 length + UTF-8 JSON network spec, u32 tensor
          count, then per tensor: u32 ndim, ndim * u32 dims, f32 data (C order).
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

VERSION = 1
_U32 = struct.Struct("<I")


class FormatError(ValueError):
    pass


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"unexpected end of file (wanted {n} bytes, got {len(buf)})")
    return buf


def _read_u32(fh, count: int = 1):
    vals = struct.unpack(f"<{count}I", _read_exact(fh, 4 * count))
    return vals if count > 1 else vals[0]


def _check_header(fh, magic: bytes) -> None:
    got = _read_exact(fh, 4)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    version = _read_u32(fh)
    if version != VERSION:
        raise FormatError(f"unsupported {magic.decode()} version {version}")


def _read_f32(fh, shape) -> np.ndarray:
    count = int(np.prod(shape))
    return np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4").reshape(shape).astype(np.float64)


def tensor_bytes(X: np.ndarray) -> bytes:
    """Serialise a ``(K, N, T)`` feature tensor."""
    X = np.asarray(X)
    if X.ndim != 3:
        raise FormatError("feature tensor must be (K, N, T)")
    K, N, T = X.shape
    body = np.ascontiguousarray(X.transpose(0, 2, 1), dtype="<f4").tobytes()
    return b"IVFT" + struct.pack("<4I", VERSION, N, T, K) + body


def write_tensor(path, X: np.ndarray) -> None:
    Path(path).write_bytes(tensor_bytes(X))


def read_tensor(path) -> np.ndarray:
    """Load an IVFT file as a ``(K, N, T)`` float64 array."""
    with open(path, "rb") as fh:
        _check_header(fh, b"IVFT")
        N, T, K = _read_u32(fh, 3)
        data = _read_f32(fh, (K, T, N))
    return data.transpose(0, 2, 1).copy()


def demixing_bytes(W: np.ndarray) -> bytes:
    W = np.asarray(W)
    if W.ndim != 3 or W.shape[1] != W.shape[2]:
        raise FormatError("demixing tensor must be (K, N, N)")
    K, N, _ = W.shape
    return b"IVFW" + struct.pack("<3I", VERSION, N, K) + np.ascontiguousarray(W, dtype="<f4").tobytes()


def write_demixing(path, W: np.ndarray) -> None:
    Path(path).write_bytes(demixing_bytes(W))


def read_demixing(path) -> np.ndarray:
    with open(path, "rb") as fh:
        _check_header(fh, b"IVFW")
        N, K = _read_u32(fh, 2)
        return _read_f32(fh, (K, N, N))


def network_bytes(spec: dict, tensors: list[np.ndarray]) -> bytes:
    buf = io.BytesIO()
    meta = json.dumps(spec, sort_keys=True).encode("utf-8")
    buf.write(b"IVFN" + _U32.pack(VERSION) + _U32.pack(len(meta)) + meta)
    buf.write(_U32.pack(len(tensors)))
    for t in tensors:
        t = np.asarray(t)
        buf.write(struct.pack(f"<{1 + t.ndim}I", t.ndim, *t.shape))
        buf.write(np.ascontiguousarray(t, dtype="<f4").tobytes())
    return buf.getvalue()


def write_network(path, spec: dict, tensors: list[np.ndarray]) -> None:
    Path(path).write_bytes(network_bytes(spec, tensors))


def read_network(path) -> tuple[dict, list[np.ndarray]]:
    with open(path, "rb") as fh:
        _check_header(fh, b"IVFN")
        meta = _read_exact(fh, _read_u32(fh))
        try:
            spec = json.loads(meta.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"corrupt network spec: {exc}") from exc
        tensors = []
        for _ in range(_read_u32(fh)):
            ndim = _read_u32(fh)
            shape = tuple(struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))) if ndim else ()
            tensors.append(_read_f32(fh, shape))
        if fh.read(1):
            raise FormatError("trailing bytes after last tensor")
    return spec, tensors
