"""Binary attention-trace format (.imtrace) plus a synthetic trace generator.

Layout, all little-endian:

    header   magic "IMT1" | version u32 (=1) | layers u32 | heads u32 | flags u32
    events   tag u8 followed by the tag's payload:
      1 ROUND_START   round_id u32 | prompt_len u32
      2 TOKENS        count u32 | count modality bytes (0 text, 1 visual)
      3 ATTN_ROW      layer u32 | n u32 | n float32 probabilities
      4 SADDLE_TRUTH  round_id u32 | count u32 | count u32 column ids

Flags bit 0 set means rows are head-aggregated. ATTN_ROW probabilities must
sum to 1 within 1e-3 and n may not decrease within a round. The format is
append-only with no compression or random-access index.

The synthetic generator plants structure with ground-truth labels: uniform
baseline mass, a recency boost on the newest columns, a sink boost on the
first columns, and a persistent gain on a set of "saddle" columns that is
resampled every ``shift_every`` rounds (recorded via SADDLE_TRUTH, which is
a side channel the policies never see).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Iterator, List, Optional, Tuple, Union

import numpy as np

F32 = np.float32

MAGIC = b"IMT1"
VERSION = 1
FLAG_HEAD_AGGREGATED = 1

TAG_ROUND_START = 1
TAG_TOKENS = 2
TAG_ATTN_ROW = 3
TAG_SADDLE_TRUTH = 4

HEADER_STRUCT = struct.Struct("<4sIIII")
ROW_SUM_TOLERANCE = 1e-3


class TraceFormatError(Exception):
    """Malformed trace data; carries the byte offset where parsing failed."""

    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


@dataclass(frozen=True)
class TraceHeader:
    layers: int
    heads: int
    flags: int = FLAG_HEAD_AGGREGATED
    version: int = VERSION


@dataclass(frozen=True)
class RoundStart:
    round_id: int
    prompt_len: int


@dataclass(frozen=True)
class Tokens:
    modality: np.ndarray  # uint8 per token: 0 text, 1 visual

    @property
    def count(self) -> int:
        return int(self.modality.size)

    def __eq__(self, other):
        return isinstance(other, Tokens) and np.array_equal(self.modality, other.modality)


@dataclass(frozen=True)
class AttnRow:
    layer: int
    probs: np.ndarray  # float32, sums to 1 within 1e-3

    @property
    def n(self) -> int:
        return int(self.probs.size)

    def __eq__(self, other):
        return (
            isinstance(other, AttnRow)
            and self.layer == other.layer
            and np.array_equal(self.probs, other.probs)
        )


@dataclass(frozen=True)
class SaddleTruth:
    round_id: int
    ids: np.ndarray  # uint32 column ids

    def __eq__(self, other):
        return (
            isinstance(other, SaddleTruth)
            and self.round_id == other.round_id
            and np.array_equal(self.ids, other.ids)
        )


TraceEvent = Union[RoundStart, Tokens, AttnRow, SaddleTruth]


# -- writing -----------------------------------------------------------------


def write_header(sink: BinaryIO, header: TraceHeader) -> int:
    sink.write(HEADER_STRUCT.pack(MAGIC, header.version, header.layers, header.heads, header.flags))
    return HEADER_STRUCT.size


def write_event(sink: BinaryIO, event: TraceEvent) -> int:
    if isinstance(event, RoundStart):
        data = struct.pack("<BII", TAG_ROUND_START, event.round_id, event.prompt_len)
    elif isinstance(event, Tokens):
        mod = np.ascontiguousarray(event.modality, dtype=np.uint8)
        data = struct.pack("<BI", TAG_TOKENS, mod.size) + mod.tobytes()
    elif isinstance(event, AttnRow):
        probs = np.ascontiguousarray(event.probs, dtype=F32)
        if probs.size == 0:
            raise ValueError("ATTN_ROW must have at least one column")
        total = float(probs.sum(dtype=np.float64))
        if abs(total - 1.0) > ROW_SUM_TOLERANCE:
            raise ValueError(f"ATTN_ROW sums to {total:.6f}, expected 1 +/- {ROW_SUM_TOLERANCE}")
        data = struct.pack("<BII", TAG_ATTN_ROW, event.layer, probs.size) + probs.tobytes()
    elif isinstance(event, SaddleTruth):
        ids = np.ascontiguousarray(event.ids, dtype=np.uint32)
        data = struct.pack("<BII", TAG_SADDLE_TRUTH, event.round_id, ids.size) + ids.tobytes()
    else:
        raise ValueError(f"unknown trace event {event!r}")
    sink.write(data)
    return len(data)


def write_trace(sink: BinaryIO, header: TraceHeader, events: Iterable[TraceEvent]) -> int:
    """Write header then events; returns the total byte count."""
    count = write_header(sink, header)
    for event in events:
        count += write_event(sink, event)
    return count


# -- reading -----------------------------------------------------------------


def _read_exact(source: BinaryIO, size: int, offset: int, what: str) -> bytes:
    data = source.read(size)
    if len(data) != size:
        raise TraceFormatError(f"truncated {what}: wanted {size} bytes, got {len(data)}", offset)
    return data


def read_header(source: BinaryIO) -> TraceHeader:
    raw = _read_exact(source, HEADER_STRUCT.size, 0, "header")
    magic, version, layers, heads, flags = HEADER_STRUCT.unpack(raw)
    if magic != MAGIC:
        raise TraceFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise TraceFormatError(f"unsupported version {version}, expected {VERSION}", 4)
    return TraceHeader(layers=layers, heads=heads, flags=flags, version=version)


def read_trace(source: BinaryIO, strict: bool = True) -> Tuple[TraceHeader, Iterator[TraceEvent]]:
    """Parse a trace stream into its header and a lazy event iterator.

    With ``strict`` set, ATTN_ROW sums are validated against the 1e-3
    tolerance and n is checked to be non-decreasing within a round as events
    are consumed. Parse errors name the byte offset.
    """
    header = read_header(source)

    def events() -> Iterator[TraceEvent]:
        offset = HEADER_STRUCT.size
        last_n = 0
        while True:
            tag_byte = source.read(1)
            if len(tag_byte) == 0:
                return
            tag = tag_byte[0]
            start = offset
            offset += 1
            if tag == TAG_ROUND_START:
                raw = _read_exact(source, 8, offset, "ROUND_START")
                offset += 8
                round_id, prompt_len = struct.unpack("<II", raw)
                last_n = 0
                yield RoundStart(round_id, prompt_len)
            elif tag == TAG_TOKENS:
                raw = _read_exact(source, 4, offset, "TOKENS count")
                offset += 4
                (count,) = struct.unpack("<I", raw)
                body = _read_exact(source, count, offset, "TOKENS modality bytes")
                offset += count
                yield Tokens(np.frombuffer(body, dtype=np.uint8).copy())
            elif tag == TAG_ATTN_ROW:
                raw = _read_exact(source, 8, offset, "ATTN_ROW header")
                offset += 8
                layer, n = struct.unpack("<II", raw)
                body = _read_exact(source, 4 * n, offset, "ATTN_ROW probabilities")
                probs = np.frombuffer(body, dtype="<f4").astype(F32)
                if strict:
                    total = float(probs.sum(dtype=np.float64))
                    if abs(total - 1.0) > ROW_SUM_TOLERANCE:
                        raise TraceFormatError(
                            f"ATTN_ROW sums to {total:.6f}, expected 1 +/- {ROW_SUM_TOLERANCE}",
                            start,
                        )
                    if n < last_n:
                        raise TraceFormatError(
                            f"ATTN_ROW n decreased within a round ({n} < {last_n})", start
                        )
                last_n = max(last_n, n)
                offset += 4 * n
                yield AttnRow(layer, probs)
            elif tag == TAG_SADDLE_TRUTH:
                raw = _read_exact(source, 8, offset, "SADDLE_TRUTH header")
                offset += 8
                round_id, count = struct.unpack("<II", raw)
                body = _read_exact(source, 4 * count, offset, "SADDLE_TRUTH ids")
                offset += 4 * count
                yield SaddleTruth(round_id, np.frombuffer(body, dtype="<u4").copy())
            else:
                raise TraceFormatError(f"unknown event tag {tag}", start)

    return header, events()


def read_trace_file(path, strict: bool = True) -> Tuple[TraceHeader, List[TraceEvent]]:
    with open(path, "rb") as fh:
        header, it = read_trace(fh, strict=strict)
        return header, list(it)


# -- synthetic generation ------------------------------------------------------


@dataclass
class SynthConfig:
    """Parameters of the planted-pattern generator.

    Gains are multiplicative mass factors (>= 1). ``shift_every`` rounds the
    active saddle set is resampled from recently-arrived columns; saddle plant
    ages are drawn uniformly from [``saddle_age_lo``, ``saddle_age_hi``),
    defaulting to within the last round's worth of tokens.
    """

    rounds: int = 10
    prompt_len: int = 8
    decode_len: int = 8
    saddle_count: int = 8
    saddle_gain: float = 5.0
    shift_every: int = 5
    sink_count: int = 0
    sink_gain: float = 1.0
    recent_gain: float = 1.0
    recent_len: int = 32
    seed: int = 0
    saddle_age_lo: int = 0
    saddle_age_hi: Optional[int] = None

    def __post_init__(self):
        if self.rounds < 0 or self.prompt_len < 1 or self.decode_len < 0:
            raise ValueError("rounds >= 0, prompt_len >= 1, decode_len >= 0 required")
        if self.saddle_count < 0 or self.sink_count < 0 or self.recent_len < 0:
            raise ValueError("counts must be >= 0")
        for name in ("saddle_gain", "sink_gain", "recent_gain"):
            if getattr(self, name) < 1.0:
                raise ValueError(f"{name} must be >= 1")
        if self.shift_every < 1:
            raise ValueError("shift_every must be >= 1")
        if self.saddle_age_lo < 0:
            raise ValueError("saddle_age_lo must be >= 0")

    @property
    def round_span(self) -> int:
        return self.prompt_len + self.decode_len


def generate_synthetic(cfg: SynthConfig) -> List[TraceEvent]:
    """Build the event sequence of a planted-pattern trace.

    Rows are deterministic given the seed: uniform mass scaled by the
    configured gains, renormalised in float64, then quantised to float32.
    Randomness only drives where saddles are planted.
    """
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xA77)))
    events: List[TraceEvent] = []
    active = np.empty(0, dtype=np.uint32)
    total = 0
    age_hi_default = max(1, cfg.round_span)

    for round_id in range(cfg.rounds):
        if round_id % cfg.shift_every == 0 and cfg.saddle_count > 0:
            if total == 0:
                # Nothing has streamed in yet: plant among the first round's tokens.
                pool = np.arange(max(cfg.round_span, cfg.saddle_count), dtype=np.int64)
                chosen = rng.choice(pool.size, size=min(cfg.saddle_count, pool.size), replace=False)
                active = np.sort(pool[chosen]).astype(np.uint32)
            else:
                age_hi = cfg.saddle_age_hi if cfg.saddle_age_hi is not None else age_hi_default
                age_hi = max(cfg.saddle_age_lo + 1, age_hi)
                lo = min(cfg.saddle_age_lo, total - 1)
                hi = min(age_hi, total)
                ages = np.arange(lo, max(hi, lo + 1), dtype=np.int64)
                take = min(cfg.saddle_count, ages.size)
                chosen = rng.choice(ages.size, size=take, replace=False)
                ids = total - 1 - ages[chosen]
                active = np.sort(ids).astype(np.uint32)
            events.append(SaddleTruth(round_id, active.copy()))
        events.append(RoundStart(round_id, cfg.prompt_len))
        events.append(Tokens(np.zeros(cfg.round_span, dtype=np.uint8)))
        for _ in range(cfg.round_span):
            total += 1
            n = total
            w = np.ones(n, dtype=np.float64)
            if cfg.recent_gain > 1.0 and cfg.recent_len > 0:
                w[max(0, n - cfg.recent_len):] *= cfg.recent_gain
            if cfg.sink_gain > 1.0 and cfg.sink_count > 0:
                w[: min(cfg.sink_count, n)] *= cfg.sink_gain
            if active.size:
                live = active[active < n].astype(np.int64)
                if live.size:
                    w[live] *= cfg.saddle_gain
            w /= w.sum()
            events.append(AttnRow(0, w.astype(F32)))
    return events


def synthetic_header(cfg: SynthConfig) -> TraceHeader:
    return TraceHeader(layers=1, heads=1, flags=FLAG_HEAD_AGGREGATED)
