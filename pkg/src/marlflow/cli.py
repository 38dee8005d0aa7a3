"""Operator commands: train, eval, inspect, export-metrics.

Exit codes: 0 success, 2 configuration error, 3 runtime divergence.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import parse_config, with_overrides
from .errors import ConfigError, DivergenceError
from .loop import (build_environment, evaluate, load_workers_from_checkpoints,
                   train_loop)
from .rewards import RewardWeights, combine

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3


def _load_config(path: str, seed=None, iterations=None, out=None):
    text = Path(path).read_text(encoding="utf-8")
    cfg = parse_config(text)
    return with_overrides(cfg, seed=seed, iterations=iterations, out_dir=out)


def cmd_train(args) -> int:
    try:
        cfg = _load_config(args.config, args.seed, args.iterations, args.out)
        summary = train_loop(cfg)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"divergence: {exc} (last good checkpoint retained)",
              file=sys.stderr)
        return EXIT_DIVERGENCE
    print(f"family {summary.family}: baseline {summary.metric_name}="
          f"{summary.baseline:.4f}, best {summary.best:.4f} at iteration "
          f"{summary.best_iteration}, final {summary.final:.4f}")
    if summary.best_used_turns is not None:
        print(f"used turns: baseline {summary.baseline_used_turns:.3f}, "
              f"best {summary.best_used_turns:.3f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        cfg = _load_config(args.config)
        env = build_environment(cfg)
        workers = load_workers_from_checkpoints(cfg, env, args.ckpt)
        report = evaluate(cfg, env, workers)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    line = f"eval {report.metric_name}={report.value!r} n={report.n_tasks}"
    if report.used_turns_mean is not None:
        line += f" used_turns={report.used_turns_mean!r}"
    print(line)
    return EXIT_OK


def _parse_weights(header_line: str) -> dict[str, RewardWeights]:
    weights: dict[str, RewardWeights] = {}
    payload = header_line.split(" ", 2)[2] if header_line.count(" ") >= 2 else ""
    for entry in payload.split(";"):
        if ":" not in entry:
            continue
        role, triple = entry.split(":", 1)
        n, t, tr = (float(x) for x in triple.split(","))
        weights[role] = RewardWeights(n, t, tr)
    return weights


def cmd_inspect(args) -> int:
    try:
        lines = Path(args.log).read_text(encoding="utf-8").splitlines()
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    vocab_surfaces: list[str] = []
    weights: dict[str, RewardWeights] = {}
    for line in lines:
        if line.startswith("# vocab "):
            vocab_surfaces = line[len("# vocab "):].split(" ")
        elif line.startswith("# weights "):
            weights = _parse_weights(line)

    def decode(tok_field: str) -> str:
        if tok_field == "-" or not tok_field:
            return "-"
        out = []
        for tok in tok_field.split(" "):
            i = int(tok)
            out.append(vocab_surfaces[i] if i < len(vocab_surfaces) else f"<{i}>")
        return " ".join(out)

    found = False
    mismatches = 0
    for line in lines:
        parts = line.split("\t")
        if parts[0] == "step" and parts[1] == args.id:
            found = True
            _, _, t, role, model, digest, toks, reward, parents = parts
            line_out = (f"  step {t} {role} model={model} parents={parents} "
                        f"out: {decode(toks)}")
            if reward != "-":
                node, turn, traj, total = (float(x) for x in reward.split(","))
                w = weights.get(role, RewardWeights())
                expected = combine(node, turn, traj, w)
                flag = ""
                if expected != total:
                    mismatches += 1
                    flag = f"  [ARITHMETIC MISMATCH: expected {expected!r}]"
                line_out += (f"  reward node={node} turn={turn} traj={traj} "
                             f"total={total}{flag}")
            print(line_out)
        elif parts[0] == "end" and parts[1] == args.id:
            found = True
            print("  " + " ".join(parts[2:5]))
            for fieldval in parts[5:]:
                name, _, val = fieldval.partition("=")
                if name in ("answer", "program"):
                    print(f"  {name}: {decode(val)}")
                else:
                    print(f"  {name}: {val}")
    if not found:
        print(f"config error: trajectory {args.id!r} not found in {args.log}",
              file=sys.stderr)
        return EXIT_CONFIG
    if mismatches:
        print(f"{mismatches} reward arithmetic mismatch(es) flagged",
              file=sys.stderr)
    return EXIT_OK


def cmd_export_metrics(args) -> int:
    if args.format != "csv":
        print(f"config error: unsupported format {args.format!r}", file=sys.stderr)
        return EXIT_CONFIG
    path = Path(args.run) / "metrics.csv"
    if not path.exists():
        print(f"config error: no metrics at {path}", file=sys.stderr)
        return EXIT_CONFIG
    sys.stdout.write(path.read_text(encoding="utf-8"))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="marlflow",
        description="Train and inspect multi-agent workflow policies")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the optimization loop")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="greedy evaluation from checkpoints")
    p.add_argument("--config", required=True)
    p.add_argument("--ckpt", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("inspect", help="render one trajectory from a log")
    p.add_argument("--log", required=True)
    p.add_argument("--id", required=True)
    p.set_defaults(fn=cmd_inspect)

    p = sub.add_parser("export-metrics", help="emit a run's metrics")
    p.add_argument("--run", required=True)
    p.add_argument("--format", default="csv")
    p.set_defaults(fn=cmd_export_metrics)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
