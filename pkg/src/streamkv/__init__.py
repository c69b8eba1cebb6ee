"""KV-cache eviction engine and streaming-inference simulator."""

from .cache import KvCache, PositionMode, TokenMeta
from .engine import POLICY_NAMES, RoundScript, Session, TinyDecoderSpec
from .metrics import MetricsRow, emit_report, flops_per_token, planted_recall, retained_mass, topk_overlap
from .policies import (
    AttentionWindow,
    EvictionDecision,
    PolicyConfig,
    bias_vector,
    heavy_hitter_accumulate,
    heavy_hitter_decide,
    inf_mllm_decide,
    sink_recent_decide,
    sliding_window_decide,
    top_k_indices,
    window_mean_scores,
)
from .replay import ReplayResult, replay_trace
from .tensorops import attn_probs, rope_apply, softmax_row, weighted_sum
from .traceio import (
    AttnRow,
    RoundStart,
    SaddleTruth,
    SynthConfig,
    Tokens,
    TraceFormatError,
    TraceHeader,
    generate_synthetic,
    read_trace,
    write_trace,
)

__version__ = "0.1.0"
