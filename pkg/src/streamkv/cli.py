"""Command line entry point: generate traces, simulate, replay, compare.

Exit codes: 0 success, 1 runtime or I/O failure, 2 usage error. Every source
of randomness flows from an explicit ``--seed``; the flag is required
wherever randomness exists so runs are reproducible by construction.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .cache import PositionMode
from .engine import POLICY_NAMES, RoundScript, Session, TinyDecoderSpec
from .metrics import MetricsRow, emit_report
from .policies import PolicyConfig
from .replay import replay_trace
from .traceio import (
    SynthConfig,
    TraceFormatError,
    generate_synthetic,
    read_trace,
    synthetic_header,
    write_trace,
)


def _positive_int(value: str) -> int:
    n = int(value)
    if n < 0:
        raise argparse.ArgumentTypeError(f"{value} must be >= 0")
    return n


def _gain(value: str) -> float:
    g = float(value)
    if g < 1.0:
        raise argparse.ArgumentTypeError(f"gain {value} must be >= 1")
    return g


def _add_scenario_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--recent", type=int, default=32, help="retrieval window length l")
    p.add_argument("--relevant", type=int, default=2016, help="relevant token budget r")
    p.add_argument("--bias", type=float, default=None, help="attention bias b (inf-mllm)")
    p.add_argument("--sink", type=int, default=None, help="sink token count (sink-recent)")
    p.add_argument("--head-agg", choices=("mean", "max"), default="mean")


def _add_engine_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--head-dim", type=int, default=8)
    p.add_argument("--rounds", type=int, default=10)
    p.add_argument("--prompt-len", type=int, default=16)
    p.add_argument("--decode-len", type=int, default=16)
    p.add_argument(
        "--position-mode",
        choices=tuple(m.value for m in PositionMode),
        default=PositionMode.CACHE_RELATIVE.value,
    )
    p.add_argument("--rope-base", type=float, default=10000.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="streamkv",
        description="KV-cache eviction policies over streaming attention, with trace tooling",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-trace", help="write a synthetic planted-pattern trace")
    g.add_argument("--rounds", type=_positive_int, required=True)
    g.add_argument("--prompt-len", type=int, default=8)
    g.add_argument("--decode-len", type=int, default=8)
    g.add_argument("--saddles", type=_positive_int, default=8)
    g.add_argument("--gain", type=_gain, default=5.0, help="saddle mass gain, >= 1")
    g.add_argument("--shift-every", type=int, default=5)
    g.add_argument("--sinks", type=_positive_int, default=0)
    g.add_argument("--sink-gain", type=_gain, default=1.0)
    g.add_argument("--recent-gain", type=_gain, default=1.0)
    g.add_argument("--recent-len", type=_positive_int, default=32)
    g.add_argument("--saddle-age-lo", type=_positive_int, default=0)
    g.add_argument("--saddle-age-hi", type=int, default=None)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)

    s = sub.add_parser("simulate", help="run an engine session under a policy")
    s.add_argument("--policy", choices=POLICY_NAMES, required=True)
    _add_scenario_flags(s)
    _add_engine_flags(s)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--oracle", action="store_true", help="keep a shadow cache for oracle metrics")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--metrics", default=None, help="metrics output path (.csv or .json)")

    r = sub.add_parser("replay", help="feed a recorded trace to a policy")
    r.add_argument("--trace", required=True)
    r.add_argument("--policy", choices=POLICY_NAMES, required=True)
    _add_scenario_flags(r)
    r.add_argument("--head-dim", type=int, default=8, help="head dim for the cost columns")
    r.add_argument("--metrics", default=None)

    c = sub.add_parser("compare", help="run several policies over one scenario")
    c.add_argument("--policies", required=True, help="comma-separated policy names")
    _add_scenario_flags(c)
    _add_engine_flags(c)
    c.add_argument("--trace", default=None, help="replay this trace instead of running the engine")
    c.add_argument("--seed", type=int, required=True)
    c.add_argument("--oracle", action="store_true")
    c.add_argument("--report", required=True, help="summary JSON output path")
    c.add_argument("--metrics-dir", default=None, help="directory for per-policy metric CSVs")

    return parser


def _policy_config(args, parser, policy: str) -> PolicyConfig:
    if args.bias is not None and policy not in ("inf-mllm",):
        parser.error(f"--bias applies to policy inf-mllm, not {policy}")
    if args.sink is not None and policy not in ("sink-recent",):
        parser.error(f"--sink applies to policy sink-recent, not {policy}")
    try:
        return PolicyConfig(
            recent_len=args.recent,
            relevant_budget=args.relevant,
            bias=args.bias if args.bias is not None else 0.1,
            sink_count=args.sink if args.sink is not None else 4,
            head_agg=args.head_agg,
        )
    except ValueError as exc:
        parser.error(str(exc))


def _shared_policy_config(args) -> PolicyConfig:
    return PolicyConfig(
        recent_len=args.recent,
        relevant_budget=args.relevant,
        bias=args.bias if args.bias is not None else 0.1,
        sink_count=args.sink if args.sink is not None else 4,
        head_agg=args.head_agg,
    )


def _write_metrics(rows: List[MetricsRow], path: Optional[str]) -> None:
    if path is None:
        sys.stdout.write(emit_report(rows, "csv").decode())
        return
    fmt = "json" if path.endswith(".json") else "csv"
    Path(path).write_bytes(emit_report(rows, fmt))


def _build_scripts(args, rng: np.random.Generator) -> List[RoundScript]:
    return [
        RoundScript(
            prompt_token_ids=rng.integers(0, 1_000_000, size=args.prompt_len).tolist(),
            decode_steps=args.decode_len,
        )
        for _ in range(args.rounds)
    ]


def _run_engine(args, policy: str, cfg: PolicyConfig) -> List[MetricsRow]:
    spec = TinyDecoderSpec(
        layers=args.layers,
        heads=args.heads,
        head_dim=args.head_dim,
        seed=args.seed,
        position_mode=PositionMode(args.position_mode),
        rope_base=args.rope_base,
    )
    session = Session(
        spec, policy=policy, cfg=cfg, oracle=args.oracle, workers=getattr(args, "workers", 1)
    )
    rng = np.random.default_rng(np.random.SeedSequence((args.seed, 0x5C)))
    for script in _build_scripts(args, rng):
        session.run_round(script)
    return session.metrics_rows


def cmd_generate_trace(args, parser) -> int:
    cfg = SynthConfig(
        rounds=args.rounds,
        prompt_len=args.prompt_len,
        decode_len=args.decode_len,
        saddle_count=args.saddles,
        saddle_gain=args.gain,
        shift_every=args.shift_every,
        sink_count=args.sinks,
        sink_gain=args.sink_gain,
        recent_gain=args.recent_gain,
        recent_len=args.recent_len,
        seed=args.seed,
        saddle_age_lo=args.saddle_age_lo,
        saddle_age_hi=args.saddle_age_hi,
    )
    events = generate_synthetic(cfg)
    out = Path(args.out)
    with open(out, "wb") as fh:
        write_trace(fh, synthetic_header(cfg), events)
    print(f"wrote {len(events)} events to {out}")
    return 0


def cmd_simulate(args, parser) -> int:
    cfg = _policy_config(args, parser, args.policy)
    rows = _run_engine(args, args.policy, cfg)
    _write_metrics(rows, args.metrics)
    return 0


def cmd_replay(args, parser) -> int:
    cfg = _policy_config(args, parser, args.policy)
    with open(args.trace, "rb") as fh:
        header, events = read_trace(fh, strict=True)
        result = replay_trace(header, events, args.policy, cfg, head_dim=args.head_dim)
    _write_metrics(result.rows, args.metrics)
    return 0


def _mean_or_none(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def cmd_compare(args, parser) -> int:
    names = [p.strip() for p in args.policies.split(",") if p.strip()]
    if not names:
        parser.error(f"--policies is empty; valid names: {', '.join(POLICY_NAMES)}")
    for name in names:
        if name not in POLICY_NAMES:
            parser.error(f"unknown policy {name!r}; valid names: {', '.join(POLICY_NAMES)}")
    cfg = _shared_policy_config(args)

    summary = {}
    for name in names:
        if args.trace is not None:
            with open(args.trace, "rb") as fh:
                header, events = read_trace(fh, strict=True)
                rows = replay_trace(header, events, name, cfg, head_dim=args.head_dim).rows
        else:
            rows = _run_engine(args, name, cfg)
        if args.metrics_dir:
            out_dir = Path(args.metrics_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / f"{name}.csv").write_bytes(emit_report(rows, "csv"))
        summary[name] = {
            "rounds": len(rows),
            "retained_mass": _mean_or_none([r.retained_mass for r in rows]),
            "topk_overlap": _mean_or_none([r.topk_overlap for r in rows]),
            "planted_recall": _mean_or_none([r.planted_recall for r in rows]),
            "cache_len": _mean_or_none([r.cache_len for r in rows]),
            "memory_bytes": _mean_or_none([r.memory_bytes for r in rows]),
            "flops_per_token": _mean_or_none([r.flops_per_token for r in rows]),
        }
    report = {"policies": summary}
    Path(args.report).write_text(json.dumps(report, indent=2) + "\n")
    print(f"compared {len(names)} policies -> {args.report}")
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "generate-trace": cmd_generate_trace,
        "simulate": cmd_simulate,
        "replay": cmd_replay,
        "compare": cmd_compare,
    }
    try:
        return handlers[args.command](args, parser)
    except TraceFormatError as exc:
        print(f"trace error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
