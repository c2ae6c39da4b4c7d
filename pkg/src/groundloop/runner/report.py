"""Rendering ``run_log.jsonl`` back into summary tables."""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import defaultdict
from pathlib import Path
from typing import Sequence

from groundloop.metrics import RunSummary, accuracy_from_labels, mean_summary, summarize_traces

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class ReportError(ValueError):
    pass


def read_run_log(path: Path | str) -> list[dict]:
    """Parse a run log. A truncated final line (an interrupted run) is
    skipped with a warning; corruption anywhere else is an error."""
    path = Path(path)
    if not path.is_file():
        raise ReportError(f"run log not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    records = []
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            if n == len(lines):
                logger.warning("%s: skipping truncated last line", path)
                continue
            raise ReportError(f"{path}:{n}: {exc}") from exc
    if not records:
        raise ReportError(f"{path}: run log is empty")
    versions = {r.get("schema_version") for r in records}
    if versions != {SCHEMA_VERSION}:
        raise ReportError(f"{path}: unsupported schema version(s) {sorted(map(str, versions))}")
    hashes = {r.get("config_hash") for r in records}
    if len(hashes) != 1:
        raise ReportError(f"{path}: records from {len(hashes)} different configurations")
    return records


def _check_trace(rec: dict):
    trace = rec["trace"]
    for rnd in trace["rounds"]:
        correct, total = accuracy_from_labels([p["label"] for p in rnd["predictions"]], trace["gt_labels"])
        if not math.isclose(correct / total, rnd["accuracy"], abs_tol=1e-9):
            raise ReportError(f"scene {rec['scene_id']} seed {rec['seed']} round {rnd['t']}: logged accuracy "
                              f"{rnd['accuracy']} does not match its predictions ({correct}/{total})")


def summaries_from_records(records: Sequence[dict]) -> list[RunSummary]:
    by_seed: dict[int, list[dict]] = defaultdict(list)
    failed: dict[int, int] = defaultdict(int)
    rounds = max(r.get("max_rounds", 0) for r in records)
    for rec in records:
        if rec["status"] == "ok":
            _check_trace(rec)
            by_seed[rec["seed"]].append(rec["trace"])
        else:
            failed[rec["seed"]] += 1
    return [summarize_traces(by_seed[s], rounds, seed=s, n_failed=failed[s]) for s in sorted(by_seed)]


def _fmt(x) -> str:
    return "-" if x is None else f"{x:.4f}"


def render_markdown(summaries: Sequence[RunSummary], aggregate: dict, n_failed: int = 0) -> str:
    if not summaries:
        return "No successful scenes.\n"
    rounds = len(summaries[0].accuracy)
    head = "| seed | " + " | ".join(f"t={t}" for t in range(rounds)) + " |"
    rule = "|---" * (rounds + 1) + "|"
    out = ["## Grounding accuracy", "", head, rule]
    for s in summaries:
        out.append(f"| {s.seed} | " + " | ".join(_fmt(a) for a in s.accuracy) + " |")
    if aggregate:
        out.append("| mean | " + " | ".join(_fmt(a) for a in aggregate["mean_accuracy"]) + " |")
        out.append("| pooled | " + " | ".join(_fmt(a) for a in aggregate["pooled_accuracy"]) + " |")
    out += ["", "## Regions flagged", "", head, rule]
    for s in summaries:
        out.append(f"| {s.seed} | " + " | ".join(str(f) for f in s.flagged) + " |")
    if any(f is not None for s in summaries for f in s.f1):
        out += ["", "## Verifier F1 (positive class: prediction wrong)", "", head, rule]
        for s in summaries:
            out.append(f"| {s.seed} | " + " | ".join(_fmt(f) for f in s.f1) + " |")
    total = sum(s.n_regions for s in summaries)
    out += ["", f"Regions per seed: {total // len(summaries)}. Failed scene runs: {n_failed}.", ""]
    return "\n".join(out)


def render_report(log_path: Path | str) -> str:
    records = read_run_log(log_path)
    summaries = summaries_from_records(records)
    aggregate = mean_summary(summaries) if summaries else {}
    n_failed = sum(r["status"] != "ok" for r in records)
    return render_markdown(summaries, aggregate, n_failed)


def write_summary_files(out: Path, summaries: Sequence[RunSummary], aggregate: dict, report: str):
    out = Path(out)
    (out / "summary.md").write_text(report, encoding="utf-8")
    payload = {"runs": [s.to_dict() for s in summaries], **aggregate}
    (out / "summary.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "round", "accuracy", "delta", "flagged", "f1"])
        for s in summaries:
            for t, (a, d, f, f1) in enumerate(zip(s.accuracy, s.deltas, s.flagged, s.f1)):
                w.writerow([s.seed, t, f"{a:.6f}", f"{d:.6f}", f, "" if f1 is None else f"{f1:.6f}"])
