"""Streaming session engine around a tiny deterministic multi-head decoder.

The decoder is a desk-scale stand-in for a real model: seeded random
projections, seeded-hash token embeddings, rotary positions, and a residual
stream of ``x + attention_output`` per layer with no feed-forward or
normalisation. It exists to produce real attention rows over a live KV cache
so eviction mechanics can be exercised and checked exactly.

Eviction runs only at round boundaries (when a new prompt arrives); between
boundaries the cache grows by exactly one entry per decoded token. An
optional shadow cache that never evicts provides oracle metrics and the
masked-attention equivalence check.
"""

from __future__ import annotations

from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Deque, List, Optional, Sequence

import numpy as np

from .cache import MODALITY_TEXT, KvCache, PositionMode, TokenMeta
from .metrics import MetricsRow, flops_per_token, retained_mass, topk_overlap
from .policies import (
    AttentionWindow,
    EvictionDecision,
    PolicyConfig,
    aggregate_heads,
    heavy_hitter_accumulate,
    heavy_hitter_decide,
    inf_mllm_decide,
    sink_recent_decide,
    sliding_window_decide,
)

F32 = np.float32

POLICY_INF_MLLM = "inf-mllm"
POLICY_WINDOW = "window"
POLICY_SINK_RECENT = "sink-recent"
POLICY_HEAVY_HITTER = "heavy-hitter"
POLICY_NONE = "none"

POLICY_NAMES = (
    POLICY_INF_MLLM,
    POLICY_SINK_RECENT,
    POLICY_WINDOW,
    POLICY_HEAVY_HITTER,
    POLICY_NONE,
)

_STREAM_WEIGHTS = 0
_STREAM_EMBED = 1
_STREAM_SCRIPT = 2
_STREAM_PROBE = 3


@dataclass(frozen=True)
class TinyDecoderSpec:
    """Shape and seed of the deterministic decoder."""

    layers: int = 2
    heads: int = 2
    head_dim: int = 8
    seed: int = 0
    position_mode: PositionMode = PositionMode.CACHE_RELATIVE
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.layers < 1 or self.heads < 1:
            raise ValueError("layers and heads must be positive")
        if self.head_dim < 2 or self.head_dim % 2 != 0:
            raise ValueError("head_dim must be a positive even integer")

    @property
    def model_dim(self) -> int:
        return self.heads * self.head_dim


@dataclass(frozen=True)
class RoundScript:
    """One conversation round: a prompt plus a number of decode steps."""

    prompt_token_ids: Sequence[int]
    decode_steps: int = 0
    modality: Optional[Sequence[int]] = None

    def __post_init__(self):
        if len(self.prompt_token_ids) == 0:
            raise ValueError("prompt must be non-empty")
        if self.decode_steps < 0:
            raise ValueError("decode_steps must be >= 0")
        if self.modality is not None and len(self.modality) != len(self.prompt_token_ids):
            raise ValueError("one modality label per prompt token required")


class _RotatedKeys:
    """Rotary-rotated mirror of one layer's keys, rebuilt on compaction."""

    def __init__(self, heads: int, head_dim: int):
        self.n = 0
        self.data = np.zeros((heads, 64, head_dim), dtype=F32)

    def append(self, rot: np.ndarray) -> None:
        if self.n == self.data.shape[1]:
            new = np.zeros((self.data.shape[0], self.data.shape[1] * 2, self.data.shape[2]), dtype=F32)
            new[:, : self.n] = self.data[:, : self.n]
            self.data = new
        self.data[:, self.n] = rot
        self.n += 1

    def view(self) -> np.ndarray:
        return self.data[:, : self.n]

    def set_all(self, rot_rows: np.ndarray) -> None:
        n = rot_rows.shape[1]
        if n > self.data.shape[1]:
            cap = max(n, self.data.shape[1] * 2)
            self.data = np.zeros((rot_rows.shape[0], cap, rot_rows.shape[2]), dtype=F32)
        self.data[:, :n] = rot_rows
        self.n = n


class Session:
    """One streaming inference session owning a cache and policy state."""

    def __init__(
        self,
        spec: TinyDecoderSpec,
        policy: str = POLICY_NONE,
        cfg: Optional[PolicyConfig] = None,
        oracle: bool = False,
        workers: int = 1,
    ):
        if policy not in POLICY_NAMES:
            raise ValueError(f"unknown policy {policy!r}; expected one of {POLICY_NAMES}")
        self.spec = spec
        self.policy = policy
        self.cfg = cfg if cfg is not None else PolicyConfig()
        self.oracle = oracle
        self.workers = max(1, workers)

        self.cache = KvCache(spec.layers, spec.heads, spec.head_dim)
        self.shadow_cache = KvCache(spec.layers, spec.heads, spec.head_dim) if oracle else None
        self.windows = [AttentionWindow(self.cfg.recent_len) for _ in range(spec.layers)]
        self.accumulators = [np.zeros(0, dtype=F32) for _ in range(spec.layers)]
        self._shadow_rows: List[Deque[np.ndarray]] = [
            deque(maxlen=self.cfg.recent_len) for _ in range(spec.layers)
        ]

        self.round_id = -1
        self.step_id = 0
        self._global_pos = 0
        self.metrics_rows: List[MetricsRow] = []

        self._scale = F32(1.0 / np.sqrt(spec.head_dim))
        self._rot = [_RotatedKeys(spec.heads, spec.head_dim) for _ in range(spec.layers)]
        self._shadow_rot = (
            [_RotatedKeys(spec.heads, spec.head_dim) for _ in range(spec.layers)] if oracle else None
        )

        rng = np.random.default_rng(np.random.SeedSequence((spec.seed, _STREAM_WEIGHTS)))
        scale = 1.0 / np.sqrt(spec.head_dim)
        shape = (spec.heads, spec.head_dim, spec.model_dim)
        self.wq, self.wk, self.wv = [], [], []
        for _ in range(spec.layers):
            self.wq.append(((rng.random(shape) - 0.5) * scale).astype(F32))
            self.wk.append(((rng.random(shape) - 0.5) * scale).astype(F32))
            self.wv.append(((rng.random(shape) - 0.5) * scale).astype(F32))

        self._script_rng = np.random.default_rng(np.random.SeedSequence((spec.seed, _STREAM_SCRIPT)))
        self._embed_cache: dict = {}
        half = spec.head_dim // 2
        self._inv_freq = spec.rope_base ** (
            -2.0 * np.arange(half, dtype=np.float64) / spec.head_dim
        )
        self._cos = np.zeros((0, half), dtype=F32)
        self._sin = np.zeros((0, half), dtype=F32)

    # -- deterministic inputs -------------------------------------------------

    def embed(self, token_id: int) -> np.ndarray:
        """Seeded-hash embedding; no learned table."""
        e = self._embed_cache.get(token_id)
        if e is None:
            rng = np.random.default_rng(
                np.random.SeedSequence((self.spec.seed, _STREAM_EMBED, int(token_id)))
            )
            e = (rng.random(self.spec.model_dim) - 0.5).astype(F32)
            self._embed_cache[token_id] = e
        return e

    def next_decode_token(self) -> int:
        return int(self._script_rng.integers(0, 1_000_000))

    # -- rotary helpers -------------------------------------------------------

    def _trig(self, upto: int) -> None:
        if upto <= self._cos.shape[0]:
            return
        size = max(upto, 256, self._cos.shape[0] * 2)
        pos = np.arange(size, dtype=np.float64)[:, None]
        ang = pos * self._inv_freq
        self._cos = np.cos(ang).astype(F32)
        self._sin = np.sin(ang).astype(F32)

    def _rotate_one(self, vec: np.ndarray, position: int) -> np.ndarray:
        """Rotate a (heads, head_dim) block at one position."""
        self._trig(position + 1)
        cos = self._cos[position]
        sin = self._sin[position]
        even = vec[:, 0::2]
        odd = vec[:, 1::2]
        out = np.empty_like(vec)
        out[:, 0::2] = even * cos - odd * sin
        out[:, 1::2] = even * sin + odd * cos
        return out

    def _rotate_many(self, block: np.ndarray, positions: np.ndarray) -> np.ndarray:
        """Rotate a (heads, n, head_dim) block with one position per entry."""
        if positions.size == 0:
            return block.copy()
        self._trig(int(positions.max()) + 1)
        cos = self._cos[positions]
        sin = self._sin[positions]
        even = block[:, :, 0::2]
        odd = block[:, :, 1::2]
        out = np.empty_like(block)
        out[:, :, 0::2] = even * cos - odd * sin
        out[:, :, 1::2] = even * sin + odd * cos
        return out

    def _attend(self, rot_keys: np.ndarray, values: np.ndarray, rot_q: np.ndarray):
        """Per-head probabilities and pooled outputs of one query."""
        heads, n = rot_keys.shape[0], rot_keys.shape[1]
        probs = np.empty((heads, n), dtype=F32)
        out = np.empty((heads, rot_keys.shape[2]), dtype=F32)
        for h in range(heads):
            logits = (rot_keys[h] @ rot_q[h]) * self._scale
            logits -= logits.max()
            np.exp(logits, out=logits)
            probs[h] = logits / logits.sum(dtype=F32)
            out[h] = probs[h] @ values[h]
        return probs, out

    # -- core stepping --------------------------------------------------------

    def decode_step(self, token_id: int, modality: int = MODALITY_TEXT) -> List[np.ndarray]:
        """Process one token: append KV, attend over the cache, record rows.

        Returns the head-aggregated attention row per layer. Never evicts.
        """
        spec = self.spec
        x = self.embed(token_id)
        meta = TokenMeta(self._global_pos, modality, max(self.round_id, 0))
        rows: List[np.ndarray] = []
        cache_relative = spec.position_mode == PositionMode.CACHE_RELATIVE
        for layer in range(spec.layers):
            q = self.wq[layer] @ x
            k = self.wk[layer] @ x
            v = self.wv[layer] @ x
            self.cache.append(layer, k, v, meta)
            n = self.cache.length(layer)
            pos = n - 1 if cache_relative else self._global_pos
            self._rot[layer].append(self._rotate_one(k, pos))
            rot_q = self._rotate_one(q, pos)
            probs, out = self._attend(
                self._rot[layer].view(), self.cache.values(layer), rot_q
            )
            row = aggregate_heads(probs, self.cfg.head_agg)
            self.windows[layer].push(row)
            self.accumulators[layer] = heavy_hitter_accumulate(self.accumulators[layer], row)
            if self.oracle:
                self.shadow_cache.append(layer, k, v, meta)
                ns = self.shadow_cache.length(layer)
                spos = ns - 1 if cache_relative else self._global_pos
                self._shadow_rot[layer].append(self._rotate_one(k, spos))
                srot_q = self._rotate_one(q, spos)
                sprobs, _ = self._attend(
                    self._shadow_rot[layer].view(), self.shadow_cache.values(layer), srot_q
                )
                self._shadow_rows[layer].append(aggregate_heads(sprobs, self.cfg.head_agg))
            x = x + out.reshape(spec.model_dim)
            rows.append(row)
        self._global_pos += 1
        self.step_id += 1
        return rows

    # -- round boundaries -------------------------------------------------------

    def _decide(self, layer: int) -> EvictionDecision:
        n = self.cache.length(layer)
        cfg = self.cfg
        if self.policy == POLICY_NONE:
            return EvictionDecision.keep_all(n, min(cfg.recent_len, n))
        if self.policy == POLICY_INF_MLLM:
            return inf_mllm_decide(self.windows[layer], n, cfg)
        if self.policy == POLICY_WINDOW:
            return sliding_window_decide(n, cfg.budget)
        if self.policy == POLICY_SINK_RECENT:
            return sink_recent_decide(n, cfg.sink_count, cfg.budget)
        if self.policy == POLICY_HEAVY_HITTER:
            return heavy_hitter_decide(
                self.accumulators[layer], n, cfg.relevant_budget, cfg.recent_len
            )
        raise AssertionError(self.policy)

    def _evict_layer(self, layer: int):
        decision = self._decide(layer)
        kept = decision.kept
        layer_metrics = None
        if self.oracle:
            orig = self.cache.original_positions(layer)
            kept_ids = orig[kept]
            relevant_ids = orig[decision.relevant]
            srows = list(self._shadow_rows[layer])
            mass = retained_mass(srows, kept_ids)
            overlap = None
            ns = self.shadow_cache.length(layer)
            l = self.cfg.recent_len
            if ns > l and self.cfg.relevant_budget >= 1:
                cols = ns - l
                acc = np.zeros(cols, dtype=F32)
                for row in srows:
                    m = min(row.size, cols)
                    acc[:m] += row[:m]
                oracle_scores = acc / F32(len(srows))
                overlap = topk_overlap(oracle_scores, relevant_ids, self.cfg.relevant_budget)
            layer_metrics = (mass, overlap)
        if kept.size != self.cache.length(layer):
            self.cache.gather_keep(layer, kept)
            self.windows[layer].remap(kept)
            self.accumulators[layer] = self.accumulators[layer][kept]
            self._refresh_rotations(layer)
        return decision, layer_metrics

    def _refresh_rotations(self, layer: int) -> None:
        positions = self.cache.positions_for(layer, self.spec.position_mode)
        rot = self._rotate_many(self.cache.keys(layer), positions)
        self._rot[layer].set_all(rot)

    def start_round(self, script: RoundScript) -> List[EvictionDecision]:
        """Process the round's prompt, then evict once per layer.

        The prompt's QKV states are computed before eviction, so prompt
        tokens participate both as queries and as eviction candidates.
        """
        self.round_id += 1
        modality = script.modality or [MODALITY_TEXT] * len(script.prompt_token_ids)
        for tid, mod in zip(script.prompt_token_ids, modality):
            self.decode_step(int(tid), int(mod))

        layers = range(self.spec.layers)
        if self.workers > 1 and self.spec.layers > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                results = list(pool.map(self._evict_layer, layers))
        else:
            results = [self._evict_layer(layer) for layer in layers]

        decisions = [r[0] for r in results]
        masses = [m[0] for _, m in results if m is not None]
        overlaps = [m[1] for _, m in results if m is not None and m[1] is not None]
        n0 = self.cache.length(0)
        self.metrics_rows.append(
            MetricsRow(
                round_id=self.round_id,
                policy=self.policy,
                retained_mass=float(np.mean(masses)) if masses else None,
                topk_overlap=float(np.mean(overlaps)) if overlaps else None,
                planted_recall=None,
                cache_len=n0,
                memory_bytes=self.cache.memory_bytes(),
                flops_per_token=flops_per_token(
                    n0, self.spec.layers, self.spec.heads, self.spec.head_dim
                ),
            )
        )
        return decisions

    def run_round(self, script: RoundScript) -> List[EvictionDecision]:
        """start_round plus the round's decode steps with synthesised tokens."""
        decisions = self.start_round(script)
        for _ in range(script.decode_steps):
            self.decode_step(self.next_decode_token())
        return decisions

    # -- oracle checks ----------------------------------------------------------

    def attention_equivalence_check(
        self, layer: int, masked_mode: Optional[PositionMode] = None
    ) -> float:
        """Max deviation between compressed-cache and masked-full-cache attention.

        Runs one probe query two ways: (a) over the compressed cache, and
        (b) over the shadow cache with non-kept entries masked out and the
        kept entries given the identical position assignment. Passing a
        different ``masked_mode`` deliberately mismatches positions; the
        deviation is then reported rather than meaningful.
        """
        if not self.oracle:
            raise ValueError("attention_equivalence_check requires oracle=True")
        spec = self.spec
        mode_a = spec.position_mode
        mode_b = masked_mode if masked_mode is not None else mode_a

        rng = np.random.default_rng(
            np.random.SeedSequence((spec.seed, _STREAM_PROBE, max(self.round_id, 0)))
        )
        x = (rng.random(spec.model_dim) - 0.5).astype(F32)
        q = self.wq[layer] @ x

        n_c = self.cache.length(layer)
        if n_c == 0:
            raise ValueError("cache is empty")
        pos_a = self.cache.positions_for(layer, mode_a)
        qpos_a = n_c if mode_a == PositionMode.CACHE_RELATIVE else self._global_pos
        rot_q_a = self._rotate_one(q, qpos_a)
        probs_a, out_a = self._attend(
            self._rot[layer].view(), self.cache.values(layer), rot_q_a
        )

        ns = self.shadow_cache.length(layer)
        kept_ids = self.cache.original_positions(layer)
        if mode_b == PositionMode.CACHE_RELATIVE:
            kept_positions = np.arange(n_c, dtype=np.int64)
            qpos_b = n_c
        else:
            kept_positions = kept_ids.copy()
            qpos_b = self._global_pos
        positions_b = np.zeros(ns, dtype=np.int64)
        positions_b[kept_ids] = kept_positions
        rot_keys_b = self._rotate_many(self.shadow_cache.keys(layer), positions_b)
        rot_q_b = self._rotate_one(q, qpos_b)

        mask = np.zeros(ns, dtype=bool)
        mask[kept_ids] = True
        values_b = self.shadow_cache.values(layer)
        deviation = 0.0
        for h in range(spec.heads):
            logits = (rot_keys_b[h] @ rot_q_b[h]) * self._scale
            logits[~mask] = -np.inf
            logits -= logits[mask].max()
            p = np.exp(logits, dtype=F32)
            p[~mask] = 0.0
            p /= p.sum(dtype=F32)
            out_b = p @ values_b[h]
            deviation = max(deviation, float(np.abs(out_a[h] - out_b).max()))
            deviation = max(deviation, float(np.abs(probs_a[h] - p[kept_ids]).max()))
        return deviation
