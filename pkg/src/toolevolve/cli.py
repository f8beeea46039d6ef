"""Command-line entry point.

Exit codes: 0 success, 1 other failure, 2 config error, 3 fixture error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from collections import Counter
from typing import Sequence

from .errors import ConfigError, FixtureInvalid, MalformedRecord, ToolEvolveError

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_FIXTURE = 0, 1, 2, 3


def _cmd_evolve(args) -> int:
    from .evolve import RunConfig, load_checkpoint, run_evolution

    config = RunConfig.from_file(args.config)
    overrides = {k: v for k, v in (("steps", args.steps), ("seed", args.seed), ("out_dir", args.out)) if v is not None}
    if overrides:
        config = RunConfig.from_mapping({**config.to_dict(), **overrides})
    state = load_checkpoint(args.resume) if args.resume else None
    if state is not None:
        state.config = config

    def report(s):
        h = s.history[-1]
        if not args.quiet:
            print(f"step {h['step']:4d} reward {h['mean_reward']:.4f} sdl {h['sdl_loss']:.4f} "
                  f"buffer {h['buffer_size']}", file=sys.stderr)

    state = run_evolution(config, state=state, on_step=report)
    final = state.history[-1]["mean_reward"] if state.history else None
    print(json.dumps({"steps": state.step, "final_mean_reward": final, "out_dir": config.out_dir}))
    return EXIT_OK


def _cmd_rollout(args) -> int:
    from .environment import load_world, run_rollout
    from .policy import load_params
    from .protocol import serialize_trajectory

    world = load_world(args.world)
    try:
        world.prompt(args.prompt)
    except KeyError:
        raise FixtureInvalid(f"unknown prompt {args.prompt!r}") from None
    params = load_params(args.params) if args.params else world.space.initial_params(args.seed)
    print(serialize_trajectory(run_rollout(world, params, args.prompt, args.seed)))
    return EXIT_OK


def _cmd_validate(args) -> int:
    from .protocol import check_hard_filters, parse_trajectory

    counts: Counter[str] = Counter()
    bad = 0
    with open(args.trajectories, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                t = parse_trajectory(line)
            except MalformedRecord as exc:
                print(json.dumps({"line": lineno, "error": str(exc)}))
                bad += 1
                continue
            rep = check_hard_filters(t, args.max_tool_calls, args.max_refs)
            counts.update(rep.reasons)
            print(json.dumps({"line": lineno, "prompt_id": t.prompt_id, "keep": rep.keep, "reasons": list(rep.reasons)}))
            bad += not rep.keep
    print(json.dumps({"summary": dict(sorted(counts.items())), "rejected": bad}), file=sys.stderr)
    return EXIT_OK if bad == 0 else EXIT_FAIL


def _cmd_inspect_buffer(args) -> int:
    from .experience import load_snapshot

    buf = load_snapshot(args.snapshot)
    for b in sorted(buf.entries, key=lambda e: (-e.reward_gap, e.insertion_index)):
        print(f"#{b.insertion_index:<5d} gap {b.reward_gap:.3f}  {b.source_prompt_id}  {b.decision_focus}")
        if args.verbose:
            for name, items in b.guidance().items():
                for item in items:
                    print(f"    {name}: {item}")
    print(f"{len(buf)} / {buf.capacity} entries")
    return EXIT_OK


def _cmd_diagnose(args) -> int:
    from .diagnostics import curves_to_csv, export_curves

    path = os.path.join(args.run, "metrics.jsonl")
    with open(path, encoding="utf-8") as fh:
        history = [json.loads(line) for line in fh if line.strip()]
    rows = export_curves(history, args.window)
    with open(os.path.join(args.run, "curves.csv"), "w", encoding="utf-8") as fh:
        fh.write(curves_to_csv(rows))
    summary = {"steps": len(rows)}
    if rows:
        k = min(20, len(rows))
        summary.update(
            first_mean_reward=sum(r["mean_reward"] for r in rows[:k]) / k,
            last_mean_reward=sum(r["mean_reward"] for r in rows[-k:]) / k,
            final_moving_average=rows[-1]["mean_reward_ma"],
            patched_context_samples=history[-1].get("patched_context_samples", 0),
        )
    print(json.dumps(summary, indent=1))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="toolevolve", description="Self-evolving tool-use agent trainer (toy scale).")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("evolve", help="run the self-evolution loop")
    e.add_argument("--config", required=True, help="YAML or JSON run config")
    e.add_argument("--steps", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--out", help="output directory (overrides out_dir)")
    e.add_argument("--resume", help="checkpoint directory to continue from")
    e.add_argument("--quiet", action="store_true")
    e.set_defaults(func=_cmd_evolve)

    r = sub.add_parser("rollout", help="sample one trajectory and print its log line")
    r.add_argument("--world", required=True, help="fixture path or 'snooker_world'")
    r.add_argument("--prompt", required=True)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--params", help="parameter checkpoint (default: fresh init from seed)")
    r.set_defaults(func=_cmd_rollout)

    v = sub.add_parser("validate", help="run hard filters over a trajectory log")
    v.add_argument("--trajectories", required=True)
    v.add_argument("--max-tool-calls", type=int, default=10)
    v.add_argument("--max-refs", type=int, default=5)
    v.set_defaults(func=_cmd_validate)

    b = sub.add_parser("inspect-buffer", help="list buffer entries by reward gap")
    b.add_argument("--snapshot", required=True)
    b.add_argument("-v", "--verbose", action="store_true")
    b.set_defaults(func=_cmd_inspect_buffer)

    d = sub.add_parser("diagnose", help="export curves and a summary for a run directory")
    d.add_argument("--run", required=True)
    d.add_argument("--window", type=int, default=25)
    d.set_defaults(func=_cmd_diagnose)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FixtureInvalid as exc:
        print(f"fixture error: {exc}", file=sys.stderr)
        return EXIT_FIXTURE
    except (OSError, ToolEvolveError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
