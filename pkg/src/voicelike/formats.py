"""Little-endian binary containers for features, codebooks and speaker embeddings.

    LKBF  u32 T, u32 D, float32[T*D]              frame-level features / mels
    LKBC  u32 k, u32 D, float32[k*D], u64[k]      k-means codebook + counts
    LKBE  u32 D, float32[D]                       speaker embedding
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError


def _read(path, magic):
    raw = Path(path).read_bytes()
    if raw[:4] != magic:
        raise FormatError(f"{path}: expected {magic.decode()} magic")
    return raw


def _payload(raw, offset, dtype, count, path):
    need = offset + np.dtype(dtype).itemsize * count
    if len(raw) < need:
        raise FormatError(f"{path}: truncated (need {need} bytes, have {len(raw)})")
    return np.frombuffer(raw, dtype=dtype, count=count, offset=offset)


def write_features(path, frames) -> None:
    frames = np.asarray(frames)
    if frames.ndim != 2:
        raise ValueError("features must be a (T, D) matrix")
    Path(path).write_bytes(b"LKBF" + struct.pack("<II", *frames.shape)
                           + np.ascontiguousarray(frames, dtype="<f4").tobytes())


def read_features(path) -> np.ndarray:
    raw = _read(path, b"LKBF")
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header")
    T, D = struct.unpack_from("<II", raw, 4)
    return _payload(raw, 12, "<f4", T * D, path).reshape(T, D).astype(np.float32)


def write_codebook(path, centroids, counts) -> None:
    centroids = np.asarray(centroids)
    k, d = centroids.shape
    Path(path).write_bytes(b"LKBC" + struct.pack("<II", k, d)
                           + np.ascontiguousarray(centroids, dtype="<f4").tobytes()
                           + np.ascontiguousarray(counts, dtype="<u8").tobytes())


def read_codebook(path) -> tuple[np.ndarray, np.ndarray]:
    raw = _read(path, b"LKBC")
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header")
    k, d = struct.unpack_from("<II", raw, 4)
    centroids = _payload(raw, 12, "<f4", k * d, path).reshape(k, d).astype(np.float32)
    counts = _payload(raw, 12 + 4 * k * d, "<u8", k, path).astype(np.int64)
    return centroids, counts


def write_embedding(path, values) -> None:
    values = np.asarray(values).ravel()
    Path(path).write_bytes(b"LKBE" + struct.pack("<I", values.size)
                           + np.ascontiguousarray(values, dtype="<f4").tobytes())


def read_embedding(path) -> np.ndarray:
    raw = _read(path, b"LKBE")
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated header")
    (d,) = struct.unpack_from("<I", raw, 4)
    return _payload(raw, 8, "<f4", d, path).astype(np.float32)
