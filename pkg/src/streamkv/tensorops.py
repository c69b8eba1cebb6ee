"""Dense numeric kernels for single-query attention.

Everything here runs at 32-bit precision with max-subtracted softmax, matching
what small inference engines do in practice. All functions are pure and safe
to call from any number of workers.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

F32 = np.float32


def _as_f32_vector(x, name: str = "vector") -> np.ndarray:
    v = np.asarray(x, dtype=F32)
    if v.ndim != 1 or v.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-D vector")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains non-finite entries")
    return v


def softmax_row(logits) -> np.ndarray:
    """Numerically stable softmax over a single row of logits.

    Returns a float32 probability row summing to 1 within 1e-4.
    """
    z = _as_f32_vector(logits, "logits")
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum(dtype=F32)


def rope_apply(v, position: int, base: float = 10000.0) -> np.ndarray:
    """Rotate consecutive pairs of ``v`` by position-dependent angles.

    Pair ``i`` is rotated by ``position * base**(-2*i/dim)``, so dot products
    of rotated queries and keys depend only on the position difference.
    Preserves the Euclidean norm. ``dim`` must be even.
    """
    x = _as_f32_vector(v, "v")
    if x.size % 2 != 0:
        raise ValueError("rope_apply requires an even-dimensional vector")
    if position < 0:
        raise ValueError("position must be non-negative")
    if base <= 1.0:
        raise ValueError("base must be > 1")
    half = x.size // 2
    # Angles in float64: position * freq underflows float32 for large offsets.
    freqs = base ** (-2.0 * np.arange(half, dtype=np.float64) / x.size)
    ang = position * freqs
    cos = np.cos(ang).astype(F32)
    sin = np.sin(ang).astype(F32)
    even = x[0::2]
    odd = x[1::2]
    out = np.empty_like(x)
    out[0::2] = even * cos - odd * sin
    out[1::2] = even * sin + odd * cos
    return out


def rope_rotate_rows(rows: np.ndarray, positions: np.ndarray, base: float = 10000.0) -> np.ndarray:
    """Vectorised :func:`rope_apply` over a (n, dim) matrix with per-row positions."""
    x = np.asarray(rows, dtype=F32)
    if x.ndim != 2 or x.shape[1] % 2 != 0:
        raise ValueError("rows must be (n, even_dim)")
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    if pos.shape[0] != x.shape[0]:
        raise ValueError("one position per row required")
    half = x.shape[1] // 2
    freqs = base ** (-2.0 * np.arange(half, dtype=np.float64) / x.shape[1])
    ang = pos * freqs
    cos = np.cos(ang).astype(F32)
    sin = np.sin(ang).astype(F32)
    even = x[:, 0::2]
    odd = x[:, 1::2]
    out = np.empty_like(x)
    out[:, 0::2] = even * cos - odd * sin
    out[:, 1::2] = even * sin + odd * cos
    return out


def attn_probs(query, keys: Sequence, scale: Optional[float] = None) -> np.ndarray:
    """Attention probability row of ``query`` against cached ``keys``.

    ``scale`` defaults to 1/sqrt(dim). Equals softmax of scaled dot products.
    """
    q = _as_f32_vector(query, "query")
    k = np.asarray(keys, dtype=F32)
    if k.ndim != 2 or k.shape[0] == 0:
        raise ValueError("keys must be a non-empty sequence of vectors")
    if k.shape[1] != q.size:
        raise ValueError(f"key dim {k.shape[1]} does not match query dim {q.size}")
    if scale is None:
        scale = 1.0 / np.sqrt(q.size)
    if scale <= 0:
        raise ValueError("scale must be positive")
    logits = (k @ q) * F32(scale)
    return softmax_row(logits)


def weighted_sum(probs, values: Sequence) -> np.ndarray:
    """Probability-weighted sum of value vectors: sum_i probs[i] * values[i]."""
    p = _as_f32_vector(probs, "probs")
    v = np.asarray(values, dtype=F32)
    if v.ndim != 2 or v.shape[0] != p.size:
        raise ValueError(f"expected {p.size} value vectors, got shape {v.shape}")
    return p @ v
