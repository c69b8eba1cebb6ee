"""Per-round policy quality measurements and report emission.

Retained attention mass is the artifact's stand-in for answer quality: the
fraction of a full-cache attention distribution that falls on the retained
token set. Planted-saddle recall grounds detection of the persistent
high-score columns a synthetic trace plants. The memory and FLOP columns are
simple cost models, linear in cache length.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence

import numpy as np

F32 = np.float32

CSV_HEADER = (
    "round",
    "policy",
    "retained_mass",
    "topk_overlap",
    "planted_recall",
    "cache_len",
    "memory_bytes",
    "flops_per_token",
)


@dataclass
class MetricsRow:
    round_id: int
    policy: str
    retained_mass: Optional[float]
    topk_overlap: Optional[float]
    planted_recall: Optional[float]
    cache_len: int
    memory_bytes: int
    flops_per_token: int


def retained_mass(oracle_rows: Sequence[np.ndarray], kept) -> float:
    """Mean, over the scoring rows, of the probability mass on ``kept``.

    ``oracle_rows`` are full-cache probability rows; ``kept`` indexes into
    that full ordering. Columns newer than an older row contribute nothing.
    """
    rows = list(oracle_rows)
    if not rows:
        raise ValueError("retained_mass needs at least one scoring row")
    idx = np.asarray(kept, dtype=np.int64)
    total = 0.0
    for row in rows:
        sel = idx[idx < row.size]
        total += float(row[sel].sum(dtype=np.float64)) if sel.size else 0.0
    return total / len(rows)


def topk_overlap(oracle_scores, relevant_ids, r: int) -> float:
    """|relevant ∩ oracle top-r| / r with the oracle top-r over un-evicted scores."""
    from .policies import top_k_indices

    if r < 1:
        raise ValueError("r must be >= 1")
    oracle_top = set(int(i) for i in top_k_indices(np.asarray(oracle_scores, dtype=F32), r))
    chosen = set(int(i) for i in np.asarray(relevant_ids, dtype=np.int64))
    return len(oracle_top & chosen) / r


def planted_recall(truth, kept) -> Optional[float]:
    """Fraction of the active planted set that survived eviction.

    Returns ``None`` (an absent value, not an error) when nothing is planted.
    """
    truth_set = set(int(i) for i in truth)
    if not truth_set:
        return None
    kept_set = set(int(i) for i in np.asarray(kept, dtype=np.int64))
    return len(truth_set & kept_set) / len(truth_set)


def flops_per_token(cache_len: int, layers: int, heads: int, head_dim: int) -> int:
    """Multiply-add proxy for one decode step: QK^T plus attention-times-V."""
    if layers < 1 or heads < 1 or head_dim < 1 or cache_len < 0:
        raise ValueError("dimensions must be positive")
    return 4 * cache_len * head_dim * heads * layers


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else format(value, ".6g")


def emit_report(rows: Iterable[MetricsRow], format: str = "csv") -> bytes:
    """Serialise metric rows as CSV (fixed header) or a JSON array."""
    rows = list(rows)
    if format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow(
                [
                    r.round_id,
                    r.policy,
                    _fmt(r.retained_mass),
                    _fmt(r.topk_overlap),
                    _fmt(r.planted_recall),
                    r.cache_len,
                    r.memory_bytes,
                    r.flops_per_token,
                ]
            )
        return buf.getvalue().encode()
    if format == "json":
        payload = [
            {
                "round": r.round_id,
                "policy": r.policy,
                "retained_mass": None if r.retained_mass is None else float(format_float(r.retained_mass)),
                "topk_overlap": None if r.topk_overlap is None else float(format_float(r.topk_overlap)),
                "planted_recall": None if r.planted_recall is None else float(format_float(r.planted_recall)),
                "cache_len": r.cache_len,
                "memory_bytes": r.memory_bytes,
                "flops_per_token": r.flops_per_token,
            }
            for r in rows
        ]
        return (json.dumps(payload, indent=2) + "\n").encode()
    raise ValueError(f"unknown report format {format!r}")


def format_float(x: float) -> str:
    return format(x, ".6g")


def parse_csv_report(data: bytes) -> List[MetricsRow]:
    """Inverse of the CSV emitter, for tooling and tests."""
    text = data.decode()
    reader = csv.reader(io.StringIO(text))
    header = tuple(next(reader))
    if header != CSV_HEADER:
        raise ValueError(f"unexpected CSV header {header}")
    out = []
    for rec in reader:
        out.append(
            MetricsRow(
                round_id=int(rec[0]),
                policy=rec[1],
                retained_mass=float(rec[2]) if rec[2] else None,
                topk_overlap=float(rec[3]) if rec[3] else None,
                planted_recall=float(rec[4]) if rec[4] else None,
                cache_len=int(rec[5]),
                memory_bytes=int(rec[6]),
                flops_per_token=int(rec[7]),
            )
        )
    return out
