"""Trace-driven policy replay: feed recorded attention rows to a policy.

No decoder runs here. Each layer keeps a virtual cache of surviving stream
column ids. Every full-stream row is projected onto the survivors and
renormalised, which is exactly the attention a model with the evicted cache
would have produced for unchanged logits (softmax over a subset rescales the
retained probabilities by their total). Eviction fires once per round, after
the round's prompt rows, mirroring the engine's timing.

Because the full rows are available, the replayed metrics need no shadow
cache: retained mass and the top-k oracle come straight from the trace, and
planted recall uses the SADDLE_TRUTH side channel when present.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Iterable, List, Optional

import numpy as np

from .metrics import MetricsRow, flops_per_token, planted_recall, retained_mass, topk_overlap
from .policies import (
    AttentionWindow,
    EvictionDecision,
    PolicyConfig,
    heavy_hitter_accumulate,
    heavy_hitter_decide,
    inf_mllm_decide,
    sink_recent_decide,
    sliding_window_decide,
)
from .traceio import AttnRow, RoundStart, SaddleTruth, Tokens, TraceEvent, TraceHeader

F32 = np.float32


class _LayerReplay:
    """Virtual cache, window and accumulator state for one trace layer."""

    def __init__(self, cfg: PolicyConfig):
        self.live = np.empty(0, dtype=np.int64)  # surviving stream column ids
        self.window = AttentionWindow(cfg.recent_len)
        self.acc = np.zeros(0, dtype=F32)
        self.raw_rows: deque = deque(maxlen=cfg.recent_len)
        self.rows_this_round = 0
        self.evicted_this_round = False


@dataclass
class ReplayResult:
    rows: List[MetricsRow]
    decisions_per_round: List[List[EvictionDecision]]


def _decide(policy: str, state: _LayerReplay, cfg: PolicyConfig) -> EvictionDecision:
    n = state.live.size
    if policy == "none":
        return EvictionDecision.keep_all(n, min(cfg.recent_len, n))
    if policy == "inf-mllm":
        return inf_mllm_decide(state.window, n, cfg)
    if policy == "window":
        return sliding_window_decide(n, cfg.budget)
    if policy == "sink-recent":
        return sink_recent_decide(n, cfg.sink_count, cfg.budget)
    if policy == "heavy-hitter":
        return heavy_hitter_decide(state.acc, n, cfg.relevant_budget, cfg.recent_len)
    raise ValueError(f"unknown policy {policy!r}")


def replay_trace(
    header: TraceHeader,
    events: Iterable[TraceEvent],
    policy: str,
    cfg: PolicyConfig,
    head_dim: int = 8,
) -> ReplayResult:
    """Run ``policy`` over a recorded trace and measure it per round.

    ``head_dim`` only feeds the memory/FLOP cost columns; the trace itself
    carries no vector payloads.
    """
    layers = max(1, header.layers)
    states = [_LayerReplay(cfg) for _ in range(layers)]
    truth: Optional[np.ndarray] = None
    round_id: Optional[int] = None
    prompt_len = 0
    rows_out: List[MetricsRow] = []
    all_decisions: List[List[EvictionDecision]] = []
    pending: List[Optional[dict]] = [None] * layers

    def finish_round():
        if round_id is None:
            return
        done = [p for p in pending if p is not None]
        if not done:
            return
        masses = [p["mass"] for p in done]
        overlaps = [p["overlap"] for p in done if p["overlap"] is not None]
        recalls = [p["recall"] for p in done if p["recall"] is not None]
        n0 = done[0]["cache_len"]
        rows_out.append(
            MetricsRow(
                round_id=round_id,
                policy=policy,
                retained_mass=float(np.mean(masses)),
                topk_overlap=float(np.mean(overlaps)) if overlaps else None,
                planted_recall=float(np.mean(recalls)) if recalls else None,
                cache_len=n0,
                memory_bytes=2 * sum(p["cache_len"] for p in done) * head_dim * header.heads * 4,
                flops_per_token=flops_per_token(n0, layers, header.heads, head_dim),
            )
        )
        all_decisions.append([p["decision"] for p in done])

    for event in events:
        if isinstance(event, RoundStart):
            finish_round()
            round_id = event.round_id
            prompt_len = event.prompt_len
            pending = [None] * layers
            for st in states:
                st.rows_this_round = 0
                st.evicted_this_round = False
        elif isinstance(event, SaddleTruth):
            truth = event.ids.astype(np.int64)
        elif isinstance(event, Tokens):
            continue
        elif isinstance(event, AttnRow):
            layer = event.layer
            if layer >= layers:
                raise ValueError(f"row layer {layer} outside header layers {layers}")
            st = states[layer]
            n = event.probs.size
            if n > st.live.size and (st.live.size == 0 or st.live[-1] < n - 1):
                new_ids = np.arange(st.live[-1] + 1 if st.live.size else 0, n, dtype=np.int64)
                st.live = np.concatenate([st.live, new_ids])
            projected = event.probs[st.live]
            total = projected.sum(dtype=np.float64)
            if total > 0:
                projected = (projected / total).astype(F32)
            st.window.push(projected)
            st.acc = heavy_hitter_accumulate(st.acc, projected)
            st.raw_rows.append(event.probs)
            st.rows_this_round += 1
            if not st.evicted_this_round and st.rows_this_round >= prompt_len:
                st.evicted_this_round = True
                decision = _decide(policy, st, cfg)
                kept = decision.kept
                kept_ids = st.live[kept]
                relevant_ids = st.live[decision.relevant]
                mass = retained_mass(list(st.raw_rows), kept_ids)
                overlap = None
                l = cfg.recent_len
                stream_n = int(event.probs.size)
                if stream_n > l and cfg.relevant_budget >= 1:
                    cols = stream_n - l
                    acc = np.zeros(cols, dtype=F32)
                    for row in st.raw_rows:
                        m = min(row.size, cols)
                        acc[:m] += row[:m]
                    oracle_scores = acc / F32(len(st.raw_rows))
                    overlap = topk_overlap(oracle_scores, relevant_ids, cfg.relevant_budget)
                recall = planted_recall(truth, kept_ids) if truth is not None else None
                if kept.size != st.live.size:
                    st.live = kept_ids
                    st.window.remap(kept)
                    st.acc = st.acc[kept]
                pending[layer] = {
                    "decision": decision,
                    "mass": mass,
                    "overlap": overlap,
                    "recall": recall,
                    "cache_len": int(st.live.size),
                }
        else:
            raise ValueError(f"unexpected trace event {event!r}")
    finish_round()
    return ReplayResult(rows=rows_out, decisions_per_round=all_decisions)
