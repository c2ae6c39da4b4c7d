"""``groundloop`` command line."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from groundloop.runner.config import DATASET_KINDS, FEEDBACK_FLAGS, ConfigError, apply_overrides, load_config


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="groundloop", description="Feedback-driven visual grounding experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment")
    run.add_argument("--config", type=Path, help="TOML experiment file")
    run.add_argument("--dataset", choices=DATASET_KINDS)
    run.add_argument("--feedback", choices=sorted(FEEDBACK_FLAGS))
    run.add_argument("--rounds", type=int)
    run.add_argument("--seeds", help="comma-separated, e.g. 0,1,2")
    run.add_argument("--agent-endpoint")
    run.add_argument("--verifier-endpoint")
    run.add_argument("--scripted", action="store_true", help="use the deterministic simulated agent")
    run.add_argument("--out")
    run.add_argument("--dump-visual-prompts", action="store_true")

    rep = sub.add_parser("report", help="summarize an existing run log")
    rep.add_argument("run_log", type=Path)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "report":
        from groundloop.runner.report import ReportError, render_report
        try:
            sys.stdout.write(render_report(args.run_log))
        except ReportError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        return 0

    from groundloop.runner.experiment import run_experiment
    try:
        cfg = apply_overrides(load_config(args.config), args).validate()
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    result = run_experiment(cfg)
    sys.stdout.write((result.out_dir / "summary.md").read_text(encoding="utf-8"))
    if not result.ok:
        print(f"error: {result.n_failed} of {result.n_scenes} scene runs failed", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
