"""Eviction policies: windowed saddle selection with recency bias, plus baselines.

Every policy is a pure decision function from scoring state to an
:class:`EvictionDecision`. The main policy scores non-recent cache columns by
their mean attention probability over a rolling window of recent query rows,
adds a linear age penalty (the attention bias), and keeps the top-``r``
columns alongside the last ``l`` recent ones. Baselines: plain sliding
window, sink+recent, and accumulated heavy-hitter selection.

Scoring uses post-softmax probabilities. Ties always break toward the newer
token, which keeps decisions deterministic and consistent with the bias's
recency pressure.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np

F32 = np.float32

HEAD_AGG_MEAN = "mean"
HEAD_AGG_MAX = "max"


@dataclass
class PolicyConfig:
    """Shared policy parameters.

    ``recent_len`` is the retrieval window length l, ``relevant_budget`` the
    number r of non-recent tokens retained by top-k selection, ``bias`` the
    age-penalty strength b, and ``sink_count`` the sink prefix kept by the
    sink+recent baseline. Total cache budget is ``recent_len +
    relevant_budget`` for every policy.
    """

    recent_len: int = 32
    relevant_budget: int = 2016
    bias: float = 0.1
    sink_count: int = 4
    head_agg: str = HEAD_AGG_MEAN

    def __post_init__(self):
        if self.recent_len < 1:
            raise ValueError("recent_len must be >= 1")
        if self.relevant_budget < 0:
            raise ValueError("relevant_budget must be >= 0")
        if self.bias < 0:
            raise ValueError("bias must be >= 0")
        if self.sink_count < 0:
            raise ValueError("sink_count must be >= 0")
        if self.head_agg not in (HEAD_AGG_MEAN, HEAD_AGG_MAX):
            raise ValueError(f"unknown head_agg {self.head_agg!r}")

    @property
    def budget(self) -> int:
        return self.recent_len + self.relevant_budget


@dataclass(frozen=True)
class EvictionDecision:
    """Index sets of a single eviction: relevant, recent, and their union."""

    relevant: np.ndarray
    recent: np.ndarray
    kept: np.ndarray

    @staticmethod
    def from_sets(relevant, recent) -> "EvictionDecision":
        rel = np.asarray(sorted(set(int(i) for i in relevant)), dtype=np.int64)
        rec = np.asarray(sorted(set(int(i) for i in recent)), dtype=np.int64)
        kept = np.union1d(rel, rec).astype(np.int64)
        return EvictionDecision(relevant=rel, recent=rec, kept=kept)

    @staticmethod
    def keep_all(n: int, recent_len: int) -> "EvictionDecision":
        k = min(recent_len, n)
        return EvictionDecision(
            relevant=np.arange(0, n - k, dtype=np.int64),
            recent=np.arange(n - k, n, dtype=np.int64),
            kept=np.arange(n, dtype=np.int64),
        )


class AttentionWindow:
    """Rolling buffer of the last ``capacity`` attention probability rows.

    Rows are ragged: an older row has as many columns as the cache had when
    it was recorded. Because the cache only appends between evictions, every
    stored row stays aligned to a *prefix* of the current column order; a
    column absent from an older row contributes nothing to its scores.
    ``remap`` must be called with the kept index set whenever columns are
    evicted so the alignment survives compaction.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("window capacity must be >= 1")
        self.capacity = capacity
        self.rows: List[np.ndarray] = []

    def __len__(self) -> int:
        return len(self.rows)

    def push(self, row) -> None:
        r = np.asarray(row, dtype=F32)
        if r.ndim != 1 or r.size == 0:
            raise ValueError("row must be a non-empty vector")
        if self.rows and r.size < self.rows[-1].size:
            raise ValueError("row column count may not shrink between evictions")
        self.rows.append(r)
        if len(self.rows) > self.capacity:
            del self.rows[0]

    def remap(self, kept) -> None:
        """Restrict every stored row to the surviving columns.

        ``kept`` is ascending over the pre-eviction indexing, so surviving
        entries of a shorter (older) row form a prefix of the new order.
        """
        idx = np.asarray(kept, dtype=np.int64)
        self.rows = [row[idx[idx < row.size]] for row in self.rows]

    def clear(self) -> None:
        self.rows = []


def window_mean_scores(window: AttentionWindow, n: int, l: int) -> np.ndarray:
    """Mean attention probability per non-recent column.

    Averages each of the ``n - l`` scorable columns over the retained rows,
    counting a column that predates a row as 0 while dividing by the retained
    row count. Accumulation is sequential float32 so results are reproducible
    bit-for-bit regardless of backend.
    """
    if len(window) == 0:
        raise ValueError("attention window is empty")
    if n <= l:
        raise ValueError(f"no scorable columns: n={n} <= l={l}")
    cols = n - l
    acc = np.zeros(cols, dtype=F32)
    for row in window.rows:
        m = min(row.size, cols)
        acc[:m] += row[:m]
    return acc / F32(len(window))


def bias_vector(n: int, l: int, b: float) -> np.ndarray:
    """Linear age penalty over the ``n - l`` scorable columns.

    Step is ``b / (n - l)``; the oldest column is penalised most and the
    newest scorable column not at all.
    """
    if n <= l:
        raise ValueError(f"no scorable columns: n={n} <= l={l}")
    if b < 0:
        raise ValueError("bias must be >= 0")
    cols = n - l
    d = F32(b) / F32(cols)
    return (-d) * np.arange(cols - 1, -1, -1, dtype=F32)


def top_k_indices(scores, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores, ties broken toward the larger index.

    Returns an ascending index array; all indices when ``k`` exceeds the
    score count.
    """
    s = np.asarray(scores, dtype=F32)
    if k < 0:
        raise ValueError("k must be >= 0")
    if k == 0:
        return np.empty(0, dtype=np.int64)
    if k >= s.size:
        return np.arange(s.size, dtype=np.int64)
    idx = np.arange(s.size, dtype=np.int64)
    # lexsort: primary -scores ascending (largest first), then -index (newer first)
    order = np.lexsort((-idx, -s))
    return np.sort(order[:k])


def inf_mllm_decide(window: AttentionWindow, n: int, cfg: PolicyConfig) -> EvictionDecision:
    """Saddle-selection decision: biased window-mean top-r plus the recent l.

    Keeps everything when the cache fits the budget. Otherwise the non-recent
    columns are scored by window mean plus bias, the top ``relevant_budget``
    survive, and the last ``recent_len`` columns are always retained.
    """
    if len(window) == 0:
        raise ValueError("attention window is empty")
    l, r = cfg.recent_len, cfg.relevant_budget
    if n <= r + l:
        return EvictionDecision.keep_all(n, l)
    scores = window_mean_scores(window, n, l)
    biased = scores + bias_vector(n, l, cfg.bias)
    relevant = top_k_indices(biased, r)
    recent = np.arange(n - l, n, dtype=np.int64)
    kept = np.concatenate([relevant, recent])
    return EvictionDecision(relevant=relevant, recent=recent, kept=kept)


def sliding_window_decide(n: int, budget: int) -> EvictionDecision:
    """Keep only the last ``budget`` positions."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    k = min(budget, n)
    recent = np.arange(n - k, n, dtype=np.int64)
    return EvictionDecision(
        relevant=np.empty(0, dtype=np.int64), recent=recent, kept=recent
    )


def sink_recent_decide(n: int, s: int, budget: int) -> EvictionDecision:
    """Keep the first ``s`` sink positions plus the most recent ``budget - s``."""
    if not budget > s >= 0:
        raise ValueError("require budget > sink_count >= 0")
    if n <= budget:
        return EvictionDecision.keep_all(n, min(budget - s, n))
    sinks = np.arange(min(s, n), dtype=np.int64)
    recent = np.arange(n - (budget - s), n, dtype=np.int64)
    keep_sinks = sinks[sinks < recent[0]] if recent.size else sinks
    return EvictionDecision(
        relevant=keep_sinks,
        recent=recent,
        kept=np.concatenate([keep_sinks, recent]),
    )


def heavy_hitter_accumulate(acc: np.ndarray, new_row) -> np.ndarray:
    """Extend the running attention-mass accumulator with one more row."""
    a = np.asarray(acc, dtype=F32)
    row = np.asarray(new_row, dtype=F32)
    if a.size > row.size:
        raise ValueError("accumulator longer than the new row")
    out = row.copy()
    out[: a.size] += a
    return out


def heavy_hitter_decide(acc: np.ndarray, n: int, r: int, l: int) -> EvictionDecision:
    """Keep the ``r`` highest accumulated-mass columns plus the last ``l``.

    The caller drops accumulator entries of evicted columns afterwards.
    """
    a = np.asarray(acc, dtype=F32)
    if a.size != n:
        raise ValueError(f"accumulator length {a.size} != n={n}")
    if n <= r + l:
        return EvictionDecision.keep_all(n, l)
    relevant = top_k_indices(a[: n - l], r)
    recent = np.arange(n - l, n, dtype=np.int64)
    return EvictionDecision(
        relevant=relevant, recent=recent, kept=np.concatenate([relevant, recent])
    )


def aggregate_heads(per_head: np.ndarray, how: str) -> np.ndarray:
    """Collapse a (heads, n) probability block to a single row."""
    if how == HEAD_AGG_MEAN:
        return per_head.mean(axis=0, dtype=F32)
    if how == HEAD_AGG_MAX:
        return per_head.max(axis=0)
    raise ValueError(f"unknown head aggregation {how!r}")
