"""``avlkv`` command line: generate, compare, analyze, bench.

Exit codes: 0 success, 1 internal error, 2 bad input.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path

from . import bench as bench_mod
from ._csv import fmt_float, write_csv, write_text
from .cache import write_stats_csv
from .errors import AvlError, ConfigError, PolicyError, PromptError, TraceError
from .files import load_model_config, load_policy, load_prompt, load_weights, save_weights
from .metrics import (SEGMENT_HEADER, AttentionTrace, mean_segment_rows, ppci_matrix,
                      segment_rows, write_ppci_csv)
from .model import generate, init_weights
from .segments import Segment

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT = 0, 1, 2
_INPUT_ERRORS = (ConfigError, PromptError, PolicyError, TraceError, FileNotFoundError)


@dataclass
class RunSpec:
    config: object
    weights: object
    prompt: object
    max_new: int
    trace: bool
    out: Path
    weight_seed: int | None = None
    eos: int | None = None
    trace_max_rows: int | None = None


def _run_spec(args) -> RunSpec:
    if args.weights is not None:
        wpath = Path(args.weights)
        if not wpath.exists():
            raise ConfigError(f"{wpath}: weight file not found")
        config, weights = load_weights(wpath)
        if args.config is not None and load_model_config(args.config) != config:
            raise ConfigError(f"{wpath}: model config does not match --config")
    else:
        if args.config is None:
            raise ConfigError("--seed needs --config for the model dimensions")
        config = load_model_config(args.config)
        weights = init_weights(config, args.seed)
    prompt = load_prompt(args.prompt, config.d_model)
    if args.max_new < 1:
        raise ConfigError("--max-new must be >= 1")
    return RunSpec(config, weights, prompt, args.max_new, args.trace, Path(args.out),
                   args.seed if args.weights is None else None, args.eos, args.trace_max_rows)


def _tokens_text(tokens) -> str:
    return " ".join(map(str, tokens)) + "\n"


def cmd_generate(args) -> int:
    spec = _run_spec(args)
    policy = load_policy(args.policy)
    result = generate(spec.weights, spec.config, spec.prompt, policy, spec.max_new,
                      trace=spec.trace, eos_token=spec.eos)
    out = spec.out
    if spec.weight_seed is not None:
        save_weights(out / "weights.bin", spec.config, spec.weights)
    write_text(out / "tokens.txt", _tokens_text(result.tokens))
    write_stats_csv(out / "stats.csv", policy.name, result.records)
    if result.trace is not None:
        result.trace.to_csv(out / "trace.csv", max_rows=spec.trace_max_rows)
    print(f"{policy.name}: {len(result.tokens)} tokens, stored {float(result.stats.stored_fraction):.4f}, "
          f"used {float(result.stats.used_fraction):.4f} -> {out}")
    return EXIT_OK


COMPARE_HEADER = ["policy", "tokens", "n_tokens", "stored_fraction", "used_fraction",
                  "attention_flops_ratio", "first_divergence", "match_prefix"]


def _policy_items(text: str) -> list[tuple[str, object]]:
    items = []
    seen: dict[str, int] = {}
    for raw in (s.strip() for s in text.split(",")):
        if not raw:
            continue
        policy = load_policy(raw)
        label = raw if raw == policy.name else Path(raw).stem
        seen[label] = seen.get(label, 0) + 1
        if seen[label] > 1:
            label = f"{label}#{seen[label]}"
        items.append((label, policy))
    return items


def divergence(tokens, reference) -> tuple[int, int]:
    """(first divergent index or -1, length of the exact-match prefix)."""
    n = 0
    for a, b in zip(tokens, reference):
        if a != b:
            break
        n += 1
    same = n == len(tokens) == len(reference)
    return (-1 if same else n), n


def cmd_compare(args) -> int:
    spec = _run_spec(args)
    items = _policy_items(args.policies)
    if len(items) < 2:
        raise ConfigError("--policies needs at least two entries")
    if not any(p.name == "full" for _, p in items):
        items.append(("full", load_policy("full")))
    runs = {}
    for label, policy in items:
        runs[label] = (policy, generate(spec.weights, spec.config, spec.prompt, policy, spec.max_new,
                                        eos_token=spec.eos))
        write_stats_csv(spec.out / f"stats_{label}.csv", policy.name, runs[label][1].records)
    reference = next(r.tokens for p, r in runs.values() if p.name == "full")
    rows = []
    for label in sorted(runs):
        _, res = runs[label]
        first, prefix = divergence(res.tokens, reference)
        rows.append([label, " ".join(map(str, res.tokens)), str(len(res.tokens)),
                     fmt_float(res.stats.stored_fraction), fmt_float(res.stats.used_fraction),
                     fmt_float(res.stats.attention_flops_ratio), str(first), str(prefix)])
    write_csv(spec.out / "compare.csv", COMPARE_HEADER, rows)
    for row in rows:
        print(f"{row[0]:>12}  stored {float(row[3]):.4f}  used {float(row[4]):.4f}  match_prefix {row[7]}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    traces = []
    for path in args.traces:
        if not Path(path).exists():
            raise TraceError(f"{path}: trace file not found")
        traces.append(AttentionTrace.from_csv(path))
    out = Path(args.out)
    segment = Segment.parse(args.segment) if args.segment else None
    if args.mode == "segments":
        rows = []
        for i, tr in enumerate(traces):
            rows += segment_rows(tr, sample=str(i))
        if len(traces) > 1:
            rows += mean_segment_rows(traces)
        write_csv(out / "segments.csv", SEGMENT_HEADER, rows)
    elif args.mode == "ppci-layers":
        for i, tr in enumerate(traces):
            cells = ppci_matrix(tr, "layer", args.p, step=args.step, segment=segment)
            write_ppci_csv(out / _numbered("ppci_layers", i, len(traces)), cells)
    else:
        for i, tr in enumerate(traces):
            cells = ppci_matrix(tr, "step", args.p, anchor_step=args.anchor_step, segment=segment)
            write_ppci_csv(out / _numbered("ppci_steps", i, len(traces)), cells)
    print(f"{args.mode}: {len(traces)} trace(s) -> {out}")
    return EXIT_OK


def _numbered(stem: str, i: int, n: int) -> str:
    return f"{stem}.csv" if n == 1 else f"{stem}_{i}.csv"


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _ratio_list(text: str) -> list[float]:
    out = []
    for x in (s.strip() for s in text.split(",")):
        if not x:
            continue
        try:
            r = float(x[:-1]) / 100 if x.endswith("%") else float(x)
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad ratio {x!r}") from None
        if not 0 < r <= 1:
            raise argparse.ArgumentTypeError(f"ratio {x!r} must be in (0, 1] or (0%, 100%]")
        out.append(r)
    return out


def cmd_bench(args) -> int:
    rows = bench_mod.run_bench(args.dims, args.ratios, args.batch, iters=args.iters,
                               warmup=args.warmup, seed=args.seed, block=args.block)
    path = bench_mod.write_bench_csv(Path(args.out) / "bench.csv", rows)
    for r in rows:
        print(f"d={r.d} ratio={r.ratio:g} batch={r.batch}: full {r.full_s * 1e3:.3f} ms, "
              f"slice {r.slice_s * 1e3:.3f} ms, indexed {r.indexed_s * 1e3:.3f} ms")
    print(f"-> {path}")
    return EXIT_OK


def _add_run_args(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--seed", type=int, help="generate weights from this seed (needs --config)")
    src.add_argument("--weights", help="AVLW weight file")
    p.add_argument("--config", help="model config JSON file or inline JSON")
    p.add_argument("--prompt", required=True, help="prompt JSON file")
    p.add_argument("--max-new", type=int, default=16)
    p.add_argument("--eos", type=int, default=None, help="stop after feeding this token id")
    p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avlkv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="run one generation under a cache policy")
    _add_run_args(g)
    g.add_argument("--policy", default="full", help="policy name, inline JSON or JSON file")
    g.add_argument("--trace", action="store_true", help="write trace.csv")
    g.add_argument("--trace-max-rows", type=int, default=None)
    g.set_defaults(func=cmd_generate)

    c = sub.add_parser("compare", help="run several policies on the same inputs")
    _add_run_args(c)
    c.add_argument("--policies", required=True, help="comma list of policy names or JSON files")
    c.set_defaults(func=cmd_compare, trace=False, trace_max_rows=None)

    a = sub.add_parser("analyze", help="segment shares and PPCI tables from trace files")
    a.add_argument("traces", nargs="+")
    a.add_argument("--mode", choices=["segments", "ppci-layers", "ppci-steps"], required=True)
    a.add_argument("--p", type=float, default=50.0, help="percentile for PPCI")
    a.add_argument("--step", type=int, default=0, help="step compared across layers")
    a.add_argument("--anchor-step", type=int, default=1, help="first step for ppci-steps")
    a.add_argument("--segment", default=None, help="restrict PPCI to one segment, e.g. vision")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_analyze)

    b = sub.add_parser("bench", help="indexed kernel latency vs slicing")
    b.add_argument("--dims", type=_int_list, default=[2048])
    b.add_argument("--ratios", type=_ratio_list, default=[0.3])
    b.add_argument("--batch", type=_int_list, default=[1, 8, 32])
    b.add_argument("--iters", type=int, default=100)
    b.add_argument("--warmup", type=int, default=10)
    b.add_argument("--block", type=int, default=64)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (AvlError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
