"""Per-layer, per-head key/value store with indexed compaction.

The cache owns raw (un-rotated) key and value vectors plus per-token metadata.
Layers are independent: different layers may retain different token subsets,
while heads within a layer always stay in lockstep. Eviction is expressed as
``gather_keep`` with an ascending index set; evicted entries are irrecoverable.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

F32 = np.float32

MODALITY_TEXT = 0
MODALITY_VISUAL = 1

BYTES_PER_REAL = 4


class PositionMode(str, Enum):
    """How rotary positions are assigned to cached entries.

    ``cache_relative`` renumbers survivors by cache slot after eviction,
    which keeps positions inside the pre-training window no matter how long
    the stream runs. ``original`` keeps the position each token had in the
    uncompressed stream; retained for ablation.
    """

    CACHE_RELATIVE = "cache_relative"
    ORIGINAL = "original"


@dataclass(frozen=True)
class TokenMeta:
    original_position: int
    modality: int = MODALITY_TEXT
    round_id: int = 0


class _LayerStore:
    """Growable (heads, capacity, head_dim) arrays for one layer."""

    def __init__(self, heads: int, head_dim: int):
        self.n = 0
        cap = 64
        self.k = np.zeros((heads, cap, head_dim), dtype=F32)
        self.v = np.zeros((heads, cap, head_dim), dtype=F32)
        self.orig_pos = np.zeros(cap, dtype=np.int64)
        self.modality = np.zeros(cap, dtype=np.int8)
        self.round_id = np.zeros(cap, dtype=np.int32)

    def _grow(self):
        cap = self.k.shape[1] * 2
        for name in ("k", "v"):
            arr = getattr(self, name)
            new = np.zeros((arr.shape[0], cap, arr.shape[2]), dtype=F32)
            new[:, : self.n] = arr[:, : self.n]
            setattr(self, name, new)
        for name in ("orig_pos", "modality", "round_id"):
            arr = getattr(self, name)
            new = np.zeros(cap, dtype=arr.dtype)
            new[: self.n] = arr[: self.n]
            setattr(self, name, new)


class KvCache:
    """Key/value cache for ``layers`` layers of ``heads`` heads each."""

    def __init__(self, layers: int, heads: int, head_dim: int):
        if layers < 1 or heads < 1 or head_dim < 1:
            raise ValueError("layers, heads and head_dim must be positive")
        if head_dim % 2 != 0:
            raise ValueError("head_dim must be even (rotary pairs)")
        self.layers = layers
        self.heads = heads
        self.head_dim = head_dim
        self._stores = [_LayerStore(heads, head_dim) for _ in range(layers)]

    # -- state access ------------------------------------------------------

    def _store(self, layer: int) -> _LayerStore:
        if not 0 <= layer < self.layers:
            raise ValueError(f"layer {layer} out of range [0, {self.layers})")
        return self._stores[layer]

    def length(self, layer: int) -> int:
        return self._store(layer).n

    def keys(self, layer: int) -> np.ndarray:
        """(heads, n, head_dim) view of the layer's raw keys."""
        s = self._store(layer)
        return s.k[:, : s.n]

    def values(self, layer: int) -> np.ndarray:
        s = self._store(layer)
        return s.v[:, : s.n]

    def original_positions(self, layer: int) -> np.ndarray:
        s = self._store(layer)
        return s.orig_pos[: s.n]

    def modalities(self, layer: int) -> np.ndarray:
        s = self._store(layer)
        return s.modality[: s.n]

    # -- mutation ----------------------------------------------------------

    def append(self, layer: int, keys, values, meta: TokenMeta) -> None:
        """Append one token's per-head KV vectors to ``layer``.

        ``keys`` and ``values`` must be (heads, head_dim) arrays.
        """
        s = self._store(layer)
        k = np.asarray(keys, dtype=F32)
        v = np.asarray(values, dtype=F32)
        want = (self.heads, self.head_dim)
        if k.shape != want:
            raise ValueError(f"keys shape {k.shape} != {want}")
        if v.shape != want:
            raise ValueError(f"values shape {v.shape} != {want}")
        if s.n > 0 and meta.original_position <= s.orig_pos[s.n - 1]:
            raise ValueError("original_position must be strictly increasing")
        if s.n == s.k.shape[1]:
            s._grow()
        s.k[:, s.n] = k
        s.v[:, s.n] = v
        s.orig_pos[s.n] = meta.original_position
        s.modality[s.n] = meta.modality
        s.round_id[s.n] = meta.round_id
        s.n += 1

    def gather_keep(self, layer: int, kept) -> None:
        """Reduce the layer to exactly the ``kept`` index set (ascending).

        Temporal order is preserved; everything else is dropped for good.
        """
        s = self._store(layer)
        idx = np.asarray(kept, dtype=np.int64)
        if idx.ndim != 1:
            raise ValueError("kept must be a 1-D index set")
        if idx.size:
            if idx[0] < 0 or idx[-1] >= s.n:
                raise ValueError(f"kept indices out of range [0, {s.n})")
            if np.any(np.diff(idx) <= 0):
                raise ValueError("kept indices must be strictly ascending")
        m = idx.size
        s.k[:, :m] = s.k[:, idx]
        s.v[:, :m] = s.v[:, idx]
        s.orig_pos[:m] = s.orig_pos[idx]
        s.modality[:m] = s.modality[idx]
        s.round_id[:m] = s.round_id[idx]
        s.n = m

    # -- bookkeeping -------------------------------------------------------

    def positions_for(self, layer: int, mode: PositionMode) -> np.ndarray:
        """Rotary positions of the layer's entries under ``mode``."""
        s = self._store(layer)
        if mode == PositionMode.CACHE_RELATIVE:
            return np.arange(s.n, dtype=np.int64)
        return s.orig_pos[: s.n].copy()

    def memory_bytes(self) -> int:
        """Bytes held in keys+values at 32-bit precision."""
        per_entry = 2 * self.head_dim * self.heads * BYTES_PER_REAL
        return sum(s.n for s in self._stores) * per_entry

    def debug_snapshot(self) -> dict:
        """Implementation-defined dump for debugging; not a stable format."""
        return {
            "layers": self.layers,
            "heads": self.heads,
            "head_dim": self.head_dim,
            "lengths": [s.n for s in self._stores],
            "original_positions": [s.orig_pos[: s.n].tolist() for s in self._stores],
        }
