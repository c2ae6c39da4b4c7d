"""Feedback signals: the ground-truth oracle, VLM yes/no verification, and
intrinsic self-correction, plus the F1 used to score a verifier."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

from groundloop import promptkit
from groundloop.backends.base import Backend, BackendError, ChatRequest, Turn
from groundloop.dataset import Region, Scene, normalize_name
from groundloop.imaging import VisualPromptSpec, apply_visual_prompt, encode_png
from groundloop.labelmap import UNMAPPED, LabelMapper
from groundloop.responses import (
    UNPARSED,
    YesNo,
    majority_vote,
    majority_yes_no,
    parse_grounding,
    parse_yes_no,
)

CORRECT = "correct"
INCORRECT = "incorrect"
SOURCES = ("oracle_binary", "oracle_class", "vlm_verify", "self_correct")
VERIFY_KINDS = ("roi_crop", "visual_mark", "mark_plus_crop")


class RegionCallError(BackendError):
    """A backend failure annotated with the scene and region being processed."""

    def __init__(self, scene_id: str, region_id: Optional[int], cause: Exception):
        where = f"scene {scene_id}" + (f" region {region_id}" if region_id is not None else "")
        super().__init__(f"{where}: {type(cause).__name__}: {cause}")
        self.scene_id = scene_id
        self.region_id = region_id
        self.cause = cause


@dataclass(frozen=True)
class Prediction:
    region_id: int
    raw: str
    label: int  # vocabulary index, UNMAPPED for unparsed answers
    tier: str = "exact"

    @classmethod
    def from_raw(cls, region_id: int, raw: str, mapper: LabelMapper) -> "Prediction":
        m = mapper.map(raw)
        return cls(region_id, raw, m.mapped_index, m.tier)

    def to_dict(self) -> dict:
        return {"region_id": self.region_id, "raw": self.raw, "label": self.label, "tier": self.tier}


@dataclass(frozen=True)
class FeedbackSignal:
    region_id: int
    verdict: str
    source: str
    suggested_class: Optional[int] = None

    def __post_init__(self):
        if self.verdict not in (CORRECT, INCORRECT):
            raise ValueError(f"unknown verdict {self.verdict!r}")
        if self.source not in SOURCES:
            raise ValueError(f"unknown feedback source {self.source!r}")
        if (self.suggested_class is not None) and (self.source != "oracle_class"):
            raise ValueError("only oracle_class signals carry a suggested class")

    @property
    def flagged(self) -> bool:
        return self.verdict == INCORRECT

    def to_dict(self) -> dict:
        return {"region_id": self.region_id, "verdict": self.verdict, "source": self.source,
                "suggested_class": self.suggested_class}


def _aligned(predictions: Sequence[Prediction], scene: Scene) -> list[tuple[Region, Prediction]]:
    by_id = {p.region_id: p for p in predictions}
    if set(by_id) != {r.id for r in scene.regions}:
        raise ValueError(f"scene {scene.source_id}: need exactly one prediction per region")
    return [(r, by_id[r.id]) for r in scene.regions]


def oracle_binary(predictions: Sequence[Prediction], scene: Scene) -> list[FeedbackSignal]:
    return [
        FeedbackSignal(r.id, CORRECT if p.label == r.gt_class else INCORRECT, "oracle_binary")
        for r, p in _aligned(predictions, scene)
    ]


def oracle_class(predictions: Sequence[Prediction], scene: Scene) -> list[FeedbackSignal]:
    out = []
    for r, p in _aligned(predictions, scene):
        if p.label == r.gt_class:
            out.append(FeedbackSignal(r.id, CORRECT, "oracle_class"))
        else:
            out.append(FeedbackSignal(r.id, INCORRECT, "oracle_class", suggested_class=r.gt_class))
    return out


def vlm_verify(
    backend: Backend,
    scene: Scene,
    region: Region,
    predicted_class_name: str,
    spec: VisualPromptSpec,
    n_samples: int = 5,
    templates: promptkit.TemplateSet = promptkit.DEFAULT,
    calls: Optional[list] = None,
) -> FeedbackSignal:
    """Ask ``backend`` whether the altered image shows the predicted class.

    A strict plurality of "no" flags the region; "yes", ties and unreadable
    replies leave it marked correct.
    """
    if spec.kind not in VERIFY_KINDS:
        raise ValueError(f"verification needs one of {VERIFY_KINDS}, got {spec.kind!r}")
    image = apply_visual_prompt(scene.image, [region], spec)
    text = promptkit.build_verify_prompt(promptkit.VISUAL_PROMPT_NAMES[spec.kind], predicted_class_name, templates)
    request = ChatRequest.build(
        [Turn("user", text, (encode_png(image),))], backend.sampling, n_samples,
        tags={"scene_id": scene.source_id, "region_id": str(region.id), "role": "verifier"},
        system_prompt=backend.system_prompt,
    )
    try:
        samples = backend.chat(request)
    except BackendError as exc:
        raise RegionCallError(scene.source_id, region.id, exc) from exc
    decision = majority_yes_no([parse_yes_no(s) for s in samples])
    if calls is not None:
        calls.append({"kind": "verify", "region_ids": [region.id], "prompt": text,
                      "samples": list(samples), "decision": decision.value})
    return FeedbackSignal(region.id, INCORRECT if decision is YesNo.NO else CORRECT, "vlm_verify")


def intrinsic_self_correct(
    backend: Backend,
    context: Sequence[Turn],
    current: Sequence[Prediction],
    mapper: LabelMapper,
    n_samples: int = 5,
    tags: Optional[dict] = None,
    templates: promptkit.TemplateSet = promptkit.DEFAULT,
    calls: Optional[list] = None,
) -> tuple[list[Prediction], list[FeedbackSignal]]:
    """Ask the agent to review its last answer.

    ``context`` must end with the agent's previous answer. A region whose
    revised answer differs (after normalization) from the previous one is
    marked incorrect. Regions the revision fails to mention keep their
    previous prediction and count as correct.
    """
    if not context:
        raise ValueError("self-correction needs the prior dialogue turns")
    ids = [p.region_id for p in current]
    review = promptkit.self_correction_prompt(templates)
    turns = list(context) + [Turn("user", review)]
    request = ChatRequest.build(turns, backend.sampling, n_samples, tags=tags or {},
                                system_prompt=backend.system_prompt)
    try:
        samples = backend.chat(request)
    except BackendError as exc:
        raise RegionCallError((tags or {}).get("scene_id", "?"), ids[0] if len(ids) == 1 else None, exc) from exc
    voted = majority_vote([parse_grounding(s, ids) for s in samples], ids)
    if calls is not None:
        calls.append({"kind": "self_correct", "region_ids": ids, "prompt": review, "samples": list(samples)})
    revised, signals = [], []
    for p in current:
        if p.region_id in voted.assignments:
            new = voted.assignments[p.region_id]
            changed = normalize_name(new) != normalize_name(p.raw)
            revised.append(Prediction.from_raw(p.region_id, new, mapper) if changed else p)
        else:
            changed = False
            revised.append(p)
        signals.append(FeedbackSignal(p.region_id, INCORRECT if changed else CORRECT, "self_correct"))
    return revised, signals


def confusion(signals: Sequence[FeedbackSignal], predictions: Sequence[Prediction], scene: Scene,
              positive: str = INCORRECT) -> tuple[int, int, int, int]:
    """(tp, fp, fn, tn) of the signals against oracle truth."""
    by_id = {s.region_id: s for s in signals}
    tp = fp = fn = tn = 0
    for r, p in _aligned(predictions, scene):
        truth_wrong = p.label != r.gt_class
        flagged = by_id[r.id].verdict == INCORRECT
        if positive == CORRECT:
            truth_wrong, flagged = not truth_wrong, not flagged
        if flagged and truth_wrong:
            tp += 1
        elif flagged:
            fp += 1
        elif truth_wrong:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    if tp + fp + fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def feedback_f1(signals: Sequence[FeedbackSignal], scene: Scene, predictions: Sequence[Prediction],
                positive: str = INCORRECT) -> float:
    """F1 of the signals' flags, with "this prediction is wrong" as the
    positive class by default. No positives on either side scores 1.0."""
    tp, fp, fn, _ = confusion(signals, predictions, scene, positive)
    return f1_from_counts(tp, fp, fn)


def unparsed_prediction(region_id: int) -> Prediction:
    return Prediction(region_id, UNPARSED, UNMAPPED, "unparsed")
