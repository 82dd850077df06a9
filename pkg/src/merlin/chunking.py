"""Fixed-size chunking of flat weight vectors, and chunk-index codes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ChunkError(ValueError):
    pass


@dataclass(frozen=True)
class WeightChunk:
    values: np.ndarray
    chunk_index: int
    total_chunks: int
    original_length: int

    def __post_init__(self):
        if not 0 <= self.chunk_index < self.total_chunks:
            raise ChunkError(f"chunk_index {self.chunk_index} outside [0, {self.total_chunks})")


def n_chunks(length: int, chunk_size: int) -> int:
    return -(-length // chunk_size)


def chunk_matrix(values: np.ndarray, chunk_size: int) -> np.ndarray:
    """(n_chunks, chunk_size) array: ``values`` followed by zero padding."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ChunkError("cannot chunk an empty weight vector")
    if chunk_size < 1:
        raise ChunkError(f"chunk_size must be >= 1, got {chunk_size}")
    out = np.zeros(n_chunks(values.size, chunk_size) * chunk_size)
    out[: values.size] = values
    return out.reshape(-1, chunk_size)


def chunk(w, chunk_size: int) -> list[WeightChunk]:
    """Split a weight vector (array or anything with ``.values``) into chunks."""
    values = np.asarray(getattr(w, "values", w), dtype=np.float64).ravel()
    mat = chunk_matrix(values, chunk_size)
    n = mat.shape[0]
    return [WeightChunk(mat[i].copy(), i, n, values.size) for i in range(n)]


def assemble(chunks) -> np.ndarray:
    """Concatenate chunks in index order and drop the padding."""
    chunks = list(chunks)
    if not chunks:
        raise ChunkError("no chunks to assemble")
    total, length, size = chunks[0].total_chunks, chunks[0].original_length, len(chunks[0].values)
    for c in chunks:
        if (c.total_chunks, c.original_length, len(c.values)) != (total, length, size):
            raise ChunkError(f"chunk {c.chunk_index}: inconsistent metadata")
    idx = sorted(c.chunk_index for c in chunks)
    if idx != list(range(total)):
        missing = sorted(set(range(total)) - set(idx))
        dup = sorted({i for i in idx if idx.count(i) > 1})
        raise ChunkError(f"incomplete chunk set: missing {missing[:5]}, duplicated {dup[:5]}")
    if length > total * size or length <= (total - 1) * size:
        raise ChunkError(f"original_length {length} inconsistent with {total} chunks of {size}")
    ordered = sorted(chunks, key=lambda c: c.chunk_index)
    return np.concatenate([c.values for c in ordered])[:length]


def assemble_matrix(mat: np.ndarray, original_length: int) -> np.ndarray:
    return np.asarray(mat).reshape(-1)[:original_length]


def chunk_index_encoding(chunk_index: int, total_chunks: int, n_freq: int = 1) -> np.ndarray:
    """``[i/N, sin(2^f 2 pi i/N), cos(2^f 2 pi i/N) for f < n_freq]``.

    ``n_freq=1`` is the 3-dim code ``[i/N, sin, cos]``. More octaves let a small
    decoder tell neighbouring chunks apart.
    """
    if not 0 <= chunk_index < total_chunks:
        raise ChunkError(f"chunk_index {chunk_index} outside [0, {total_chunks})")
    return chunk_codes(total_chunks, n_freq)[chunk_index]


def chunk_codes(total_chunks: int, n_freq: int = 1) -> np.ndarray:
    """Encodings for every chunk index, shape ``(total_chunks, 1 + 2 * n_freq)``."""
    frac = np.arange(total_chunks) / total_chunks
    cols = [frac]
    for f in range(n_freq):
        ang = 2.0 * np.pi * (2.0**f) * frac
        cols += [np.sin(ang), np.cos(ang)]
    return np.stack(cols, axis=1)
