"""Grounding accuracy, run summaries and Spearman rank correlation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from groundloop.dataset import Scene
from groundloop.feedback import confusion, f1_from_counts, feedback_f1

__all__ = [
    "RunSummary", "UndefinedMetricError", "accuracy_from_labels", "average_ranks", "confusion",
    "f1_from_counts", "feedback_f1", "grounding_accuracy", "mean_summary", "spearman_rho", "summarize_traces",
]


class UndefinedMetricError(ValueError):
    pass


def grounding_accuracy(mapped_predictions: Sequence[Sequence[int]], scenes: Sequence[Scene]) -> float:
    """Micro-averaged accuracy: correct regions over all regions of the split.

    ``mapped_predictions[k]`` holds one vocabulary index per region of
    ``scenes[k]``, in region order.
    """
    if len(mapped_predictions) != len(scenes):
        raise ValueError(f"{len(mapped_predictions)} prediction lists for {len(scenes)} scenes")
    correct = total = 0
    for labels, scene in zip(mapped_predictions, scenes):
        if len(labels) != len(scene.regions):
            raise ValueError(f"scene {scene.source_id}: {len(labels)} labels for {len(scene.regions)} regions")
        correct += sum(int(lbl) == r.gt_class for lbl, r in zip(labels, scene.regions))
        total += len(scene.regions)
    if total == 0:
        raise UndefinedMetricError("accuracy over zero regions")
    return correct / total


def accuracy_from_labels(labels: Sequence[int], gt: Sequence[int]) -> tuple[int, int]:
    """(correct, total) for aligned label lists."""
    return sum(int(a) == int(b) for a, b in zip(labels, gt)), len(gt)


def average_ranks(values: Sequence[float]) -> np.ndarray:
    """1-based ranks, tied values sharing the mean of their positions."""
    x = np.asarray(values, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x), dtype=np.float64)
    sorted_x = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman_rho(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Pearson correlation of the average-rank vectors."""
    if len(xs) != len(ys):
        raise ValueError(f"length mismatch: {len(xs)} vs {len(ys)}")
    if len(xs) < 2:
        raise UndefinedMetricError("need at least two points")
    rx, ry = average_ranks(xs), average_ranks(ys)
    dx, dy = rx - rx.mean(), ry - ry.mean()
    denom = np.sqrt((dx * dx).sum() * (dy * dy).sum())
    if denom == 0:
        raise UndefinedMetricError("rank correlation undefined for a constant input")
    return float((dx * dy).sum() / denom)


@dataclass
class RunSummary:
    """Per-round numbers pooled over every region of one run (one seed).

    Scenes that stopped early carry their last predictions forward, so every
    list has ``rounds + 1`` entries.
    """

    accuracy: list[float]
    flagged: list[int]
    f1: list[Optional[float]]
    n_regions: int
    seed: Optional[int] = None
    n_failed: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def deltas(self) -> list[float]:
        return [a - self.accuracy[0] for a in self.accuracy]

    def to_dict(self) -> dict:
        return {"seed": self.seed, "accuracy": self.accuracy, "deltas": self.deltas, "flagged": self.flagged,
                "f1": self.f1, "n_regions": self.n_regions, "n_failed": self.n_failed}


def summarize_traces(traces: Sequence, rounds: int, seed: Optional[int] = None, n_failed: int = 0) -> RunSummary:
    """Build a :class:`RunSummary` from dialogue traces (objects or dicts).

    Verifier F1 at round t scores the feedback computed on round t-1's
    predictions and is None when no round used non-oracle feedback.
    """
    from groundloop.dialogue import DialogueTrace

    traces = [DialogueTrace.from_dict(t) if isinstance(t, dict) else t for t in traces]
    n = sum(len(t.gt_labels) for t in traces)
    if n == 0:
        raise UndefinedMetricError("no regions in run")
    accuracy, flagged, f1 = [], [], []
    for t in range(rounds + 1):
        correct = 0
        n_flag = 0
        tp = fp = fn = 0
        scored = False
        for tr in traces:
            rec = tr.rounds[min(t, len(tr.rounds) - 1)]
            correct += accuracy_from_labels(rec.labels(), tr.gt_labels)[0]
            if t == 0:
                continue
            fb_rec = None
            if t < len(tr.rounds):
                fb_rec = tr.rounds[t]
            elif t == len(tr.rounds) and tr.final_check is not None:
                fb_rec = tr.final_check
            if fb_rec is None or not fb_rec.feedback:
                continue
            n_flag += len(fb_rec.flagged)
            if fb_rec.feedback[0].source in ("vlm_verify", "self_correct"):
                scored = True
                prev = tr.rounds[t - 1]
                c = _counts(fb_rec.feedback, prev.labels(), tr.region_ids, tr.gt_labels)
                tp, fp, fn = tp + c[0], fp + c[1], fn + c[2]
        accuracy.append(correct / n)
        flagged.append(n_flag)
        f1.append(f1_from_counts(tp, fp, fn) if scored else None)
    return RunSummary(accuracy, flagged, f1, n, seed, n_failed)


def _counts(signals, labels, region_ids, gt) -> tuple[int, int, int]:
    by_id = {s.region_id: s.verdict for s in signals}
    tp = fp = fn = 0
    for rid, lbl, g in zip(region_ids, labels, gt):
        wrong = lbl != g
        flag = by_id.get(rid) == "incorrect"
        if flag and wrong:
            tp += 1
        elif flag:
            fp += 1
        elif wrong:
            fn += 1
    return tp, fp, fn


def mean_summary(summaries: Sequence[RunSummary]) -> dict:
    """Seed-averaged accuracies next to region-pooled ones."""
    if not summaries:
        raise UndefinedMetricError("no runs to average")
    acc = np.array([s.accuracy for s in summaries])
    weights = np.array([s.n_regions for s in summaries], dtype=np.float64)
    pooled = (acc * weights[:, None]).sum(axis=0) / weights.sum()
    return {"mean_accuracy": acc.mean(axis=0).tolist(), "pooled_accuracy": pooled.tolist(),
            "std_accuracy": acc.std(axis=0).tolist()}
