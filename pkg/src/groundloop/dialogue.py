"""The agent/verifier loop.

Round 0 asks the agent for base predictions. Each later round computes
feedback on the current predictions, leaves regions judged correct alone,
re-prompts the agent for the flagged ones and swaps in the new answers. The
loop ends after ``max_rounds`` rounds, or earlier when the feedback flags
nothing and ``stop_on_all_correct`` is set; that final check is kept on the
trace as ``final_check``.

Regions are queried one per call by default (``granularity="region"``);
``"scene"`` puts every region of the scene into one prompt.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from groundloop import promptkit
from groundloop.backends.base import Backend, BackendError, ChatRequest, Turn
from groundloop.dataset import Region, Scene
from groundloop.feedback import (
    INCORRECT,
    SOURCES,
    FeedbackSignal,
    Prediction,
    RegionCallError,
    intrinsic_self_correct,
    oracle_binary,
    oracle_class,
    unparsed_prediction,
    vlm_verify,
)
from groundloop.imaging import VisualPromptSpec, apply_visual_prompt, encode_png
from groundloop.labelmap import LabelMapper
from groundloop.responses import ParsedGrounding, majority_vote, parse_any, parse_grounding

logger = logging.getLogger(__name__)

ImageSink = Callable[[str, bytes], None]


class SceneFailed(RuntimeError):
    def __init__(self, scene_id: str, reason: str):
        super().__init__(f"scene {scene_id} failed: {reason}")
        self.scene_id = scene_id
        self.reason = reason


@dataclass(frozen=True)
class LoopConfig:
    max_rounds: int = 5
    feedback_source: str = "oracle_binary"
    use_cot: bool = True
    visual_prompt: VisualPromptSpec = VisualPromptSpec("visual_mark")
    verify_prompt: VisualPromptSpec = VisualPromptSpec("roi_crop")
    samples_per_call: int = 5
    stop_on_all_correct: bool = True
    granularity: str = "region"
    prompt_style: str = "default"
    base_visual_prompt: VisualPromptSpec = VisualPromptSpec("none")
    box_format: promptkit.BoxFormat = promptkit.BoxFormat()
    parallelism: int = 4

    def __post_init__(self):
        if self.max_rounds < 0:
            raise ValueError("max_rounds must be >= 0")
        if self.samples_per_call < 1:
            raise ValueError("samples_per_call must be >= 1")
        if self.feedback_source not in SOURCES:
            raise ValueError(f"unknown feedback source {self.feedback_source!r}")
        if self.granularity not in ("region", "scene"):
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if self.prompt_style not in ("default", "gpt4v"):
            raise ValueError(f"unknown prompt style {self.prompt_style!r}")
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")
        if self.verify_prompt.kind not in ("roi_crop", "visual_mark", "mark_plus_crop"):
            raise ValueError(f"verify_prompt cannot be {self.verify_prompt.kind!r}")
        if self.granularity == "scene":
            for spec in (self.visual_prompt, self.base_visual_prompt):
                if spec.kind in ("roi_crop", "mark_plus_crop"):
                    raise ValueError(f"{spec.kind} needs one region per call; use granularity='region'")


@dataclass
class RoundRecord:
    t: int
    predictions: list[Prediction]
    accuracy: float
    feedback: list[FeedbackSignal] = field(default_factory=list)
    calls: list[dict] = field(default_factory=list)

    @property
    def flagged(self) -> list[int]:
        return [s.region_id for s in self.feedback if s.verdict == INCORRECT]

    def labels(self) -> list[int]:
        return [p.label for p in self.predictions]

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "accuracy": self.accuracy,
            "flagged": self.flagged,
            "predictions": [p.to_dict() for p in self.predictions],
            "feedback": [s.to_dict() for s in self.feedback],
            "calls": self.calls,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RoundRecord":
        return cls(
            t=d["t"],
            predictions=[Prediction(**p) for p in d["predictions"]],
            accuracy=d["accuracy"],
            feedback=[FeedbackSignal(**s) for s in d["feedback"]],
            calls=d["calls"],
        )


@dataclass
class DialogueTrace:
    scene_id: str
    region_ids: list[int]
    gt_labels: list[int]
    rounds: list[RoundRecord]
    final_check: Optional[RoundRecord] = None
    # wall-clock seconds per round (final check included); not serialized
    round_seconds: list[float] = field(default_factory=list, compare=False)

    @property
    def all_correct(self) -> bool:
        """The last feedback computed flagged nothing and ended the loop."""
        return self.final_check is not None and not self.final_check.flagged

    @property
    def final_predictions(self) -> list[Prediction]:
        return self.rounds[-1].predictions

    @property
    def accuracies(self) -> list[float]:
        return [r.accuracy for r in self.rounds]

    def to_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "region_ids": self.region_ids,
            "gt_labels": self.gt_labels,
            "rounds": [r.to_dict() for r in self.rounds],
            "final_check": self.final_check.to_dict() if self.final_check else None,
            "all_correct": self.all_correct,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DialogueTrace":
        return cls(
            scene_id=d["scene_id"],
            region_ids=d["region_ids"],
            gt_labels=d["gt_labels"],
            rounds=[RoundRecord.from_dict(r) for r in d["rounds"]],
            final_check=RoundRecord.from_dict(d["final_check"]) if d.get("final_check") else None,
        )


def scene_accuracy(predictions: Sequence[Prediction], scene: Scene) -> float:
    by_id = {p.region_id: p.label for p in predictions}
    return sum(by_id[r.id] == r.gt_class for r in scene.regions) / len(scene.regions)


def _pmap(fn, items, workers: int) -> list:
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(min(workers, len(items))) as pool:
        return list(pool.map(fn, items))


@dataclass
class _Unit:
    """Regions queried together in one call, plus the agent's chat so far
    (kept for self-correction)."""

    regions: list[Region]
    context: list[Turn] = field(default_factory=list)

    @property
    def ids(self) -> list[int]:
        return [r.id for r in self.regions]


class Dialogue:
    """State for one scene's run; :func:`run_dialogue` is the usual entry point."""

    def __init__(self, scene: Scene, agent: Backend, verifier: Optional[Backend], config: LoopConfig,
                 mapper: LabelMapper, templates: promptkit.TemplateSet = promptkit.DEFAULT,
                 image_sink: Optional[ImageSink] = None):
        if not scene.regions:
            raise ValueError(f"scene {scene.source_id} has no regions")
        self.scene = scene
        self.agent = agent
        self.verifier = verifier if verifier is not None else agent
        self.config = config
        self.mapper = mapper
        self.templates = templates
        self.image_sink = image_sink
        self.history: list[promptkit.Analysis] = []
        if config.granularity == "scene":
            self.units = [_Unit(list(scene.regions))]
        else:
            self.units = [_Unit([r]) for r in scene.regions]

    # -- plumbing ----------------------------------------------------------

    def _tags(self, unit: _Unit) -> dict:
        return {"scene_id": self.scene.source_id, "region_ids": ",".join(map(str, unit.ids)), "role": "agent"}

    def _image(self, targets: Sequence[Region], spec: VisualPromptSpec, label: str) -> bytes:
        if spec.kind == "none":
            return self.scene.png_bytes()
        image = apply_visual_prompt(self.scene.image, targets, spec, all_regions=self.scene.regions)
        data = encode_png(image)
        if self.image_sink is not None:
            self.image_sink(label, data)
        return data

    def _ask(self, unit: _Unit, ids: Sequence[int], turns: list[Turn], prefix: Optional[str]) -> tuple[ParsedGrounding, list[str]]:
        request = ChatRequest.build(turns, self.agent.sampling, self.config.samples_per_call,
                                    assistant_prefix=prefix, tags=self._tags(unit),
                                    system_prompt=self.agent.system_prompt)
        try:
            samples = self.agent.chat(request)
        except BackendError as exc:
            raise RegionCallError(self.scene.source_id, ids[0] if len(ids) == 1 else None, exc) from exc
        parse = parse_any if self.config.prompt_style == "gpt4v" else parse_grounding
        parsed = [parse((prefix or "") + s, ids) for s in samples]
        return majority_vote(parsed, ids), samples

    def _record(self, t: int, predictions: list[Prediction], feedback=(), calls=()) -> RoundRecord:
        return RoundRecord(t, predictions, scene_accuracy(predictions, self.scene), list(feedback), list(calls))

    # -- rounds ------------------------------------------------------------

    def base_round(self) -> tuple[list[Prediction], RoundRecord]:
        cfg = self.config

        def ask(unit: _Unit):
            if cfg.prompt_style == "gpt4v":
                text = promptkit.build_gpt4v_base_prompt(self.mapper.vocabulary, self.templates)
                spec = VisualPromptSpec("som", alpha=cfg.visual_prompt.alpha) if cfg.base_visual_prompt.kind == "none" \
                    else cfg.base_visual_prompt
            else:
                text = promptkit.build_base_prompt(unit.regions, self.scene.width, self.scene.height,
                                                   cfg.box_format, self.templates)
                spec = cfg.base_visual_prompt
            image = self._image(unit.regions, spec, f"{self.scene.source_id}_t0_{'-'.join(map(str, unit.ids))}_base")
            turn = Turn("user", text, (image,))
            voted, samples = self._ask(unit, unit.ids, [turn], None)
            preds = [Prediction.from_raw(i, voted.assignments[i], self.mapper) if i in voted.assignments
                     else unparsed_prediction(i) for i in unit.ids]
            unit.context = [turn, Turn("assistant", promptkit.format_answer({p.region_id: p.raw for p in preds}))]
            call = {"kind": "base", "region_ids": unit.ids, "prompt": text, "samples": list(samples)}
            return preds, call

        results = _pmap(ask, self.units, cfg.parallelism)
        predictions = [p for preds, _ in results for p in preds]
        return predictions, self._record(0, predictions, calls=[c for _, c in results])

    def compute_feedback(self, predictions: list[Prediction]) -> tuple[list[FeedbackSignal], list[dict]]:
        cfg = self.config
        if cfg.feedback_source == "oracle_binary":
            return oracle_binary(predictions, self.scene), []
        if cfg.feedback_source == "oracle_class":
            return oracle_class(predictions, self.scene), []
        if cfg.feedback_source != "vlm_verify":
            raise ValueError(f"{cfg.feedback_source} feedback is produced by the agent itself")

        def verify(pair):
            region, pred = pair
            if pred.label < 0:
                # nothing to ask about; an unreadable answer is wrong by construction
                return FeedbackSignal(region.id, INCORRECT, "vlm_verify"), None
            calls: list = []
            sig = vlm_verify(self.verifier, self.scene, region, pred.raw, cfg.verify_prompt,
                             cfg.samples_per_call, self.templates, calls)
            return sig, calls[0]

        by_id = {p.region_id: p for p in predictions}
        results = _pmap(verify, [(r, by_id[r.id]) for r in self.scene.regions], cfg.parallelism)
        return [s for s, _ in results], [c for _, c in results if c is not None]

    def feedback_round(self, predictions: list[Prediction], t: int) -> tuple[list[Prediction], RoundRecord]:
        if t < 1:
            raise ValueError("feedback rounds start at t=1")
        if self.config.feedback_source == "self_correct":
            return self._self_correct_round(predictions, t)
        signals, calls = self.compute_feedback(predictions)
        return self.reprompt(predictions, signals, calls, t)

    def reprompt(self, predictions: list[Prediction], signals: list[FeedbackSignal], calls: list[dict],
                 t: int) -> tuple[list[Prediction], RoundRecord]:
        """Re-ask the agent about the flagged regions only."""
        cfg = self.config
        flags = {s.region_id: s for s in signals}
        flagged = [s.region_id for s in signals if s.verdict == INCORRECT]
        if not flagged:
            return list(predictions), self._record(t, list(predictions), signals, calls)
        class_label = cfg.feedback_source == "oracle_class"
        kind = "class_label" if class_label else "binary"
        analysis = promptkit.Analysis(
            previous=tuple((p.region_id, p.raw) for p in predictions),
            flagged=tuple(flagged),
            suggestions=tuple(self.mapper.vocabulary[flags[i].suggested_class] for i in flagged) if class_label else None,
        )
        self.history.append(analysis)
        vocab = self.mapper.vocabulary if cfg.prompt_style == "gpt4v" else None
        prefix = promptkit.guiding_sentence() if cfg.use_cot else None
        by_id = {p.region_id: p for p in predictions}

        def ask(unit: _Unit):
            ids = [i for i in unit.ids if flags[i].verdict == INCORRECT]
            if not ids:
                return {}, None
            analyses = [a for a in (h.restricted_to(unit.ids) for h in self.history) if a is not None]
            text = promptkit.build_feedback_history_prompt(kind, analyses, cfg.box_format, vocab, self.templates)
            targets = [r for r in unit.regions if r.id in ids]
            image = self._image(targets, cfg.visual_prompt,
                                f"{self.scene.source_id}_t{t}_{'-'.join(map(str, ids))}_feedback")
            voted, samples = self._ask(unit, ids, [Turn("user", text, (image,))], prefix)
            call = {"kind": f"{kind}_feedback", "region_ids": ids, "prompt": text, "samples": list(samples)}
            return voted.assignments, call

        results = _pmap(ask, self.units, cfg.parallelism)
        answers: dict[int, str] = {}
        for assignments, call in results:
            answers.update(assignments)
            if call is not None:
                calls.append(call)
        updated = []
        for rid in (p.region_id for p in predictions):
            if rid in answers:
                updated.append(Prediction.from_raw(rid, answers[rid], self.mapper))
            else:
                updated.append(by_id[rid])  # frozen, or unparsed re-answer
        return updated, self._record(t, updated, signals, calls)

    def _self_correct_round(self, predictions: list[Prediction], t: int) -> tuple[list[Prediction], RoundRecord]:
        by_id = {p.region_id: p for p in predictions}

        def review(unit: _Unit):
            current = [by_id[i] for i in unit.ids]
            calls: list = []
            revised, signals = intrinsic_self_correct(self.agent, unit.context, current, self.mapper,
                                                      self.config.samples_per_call, self._tags(unit),
                                                      self.templates, calls)
            unit.context = unit.context + [
                Turn("user", promptkit.self_correction_prompt(self.templates)),
                Turn("assistant", promptkit.format_answer({p.region_id: p.raw for p in revised})),
            ]
            return revised, signals, calls[0]

        results = _pmap(review, self.units, self.config.parallelism)
        revised = {p.region_id: p for preds, _, _ in results for p in preds}
        sigs = {s.region_id: s for _, signals, _ in results for s in signals}
        order = [p.region_id for p in predictions]
        updated = [revised[i] for i in order]
        return updated, self._record(t, updated, [sigs[i] for i in order], [c for _, _, c in results])

    def run(self) -> DialogueTrace:
        start = time.perf_counter()
        try:
            predictions, record = self.base_round()
        except RegionCallError as exc:
            raise SceneFailed(self.scene.source_id, str(exc)) from exc
        trace = DialogueTrace(self.scene.source_id, [r.id for r in self.scene.regions],
                              [r.gt_class for r in self.scene.regions], [record])
        trace.round_seconds.append(time.perf_counter() - start)
        for t in range(1, self.config.max_rounds + 1):
            start = time.perf_counter()
            try:
                if self.config.feedback_source == "self_correct":
                    predictions, record = self._self_correct_round(predictions, t)
                    if not record.flagged and self.config.stop_on_all_correct:
                        trace.final_check = record
                        trace.round_seconds.append(time.perf_counter() - start)
                        break
                else:
                    signals, calls = self.compute_feedback(predictions)
                    if self.config.stop_on_all_correct and not any(s.verdict == INCORRECT for s in signals):
                        trace.final_check = self._record(t, list(predictions), signals, calls)
                        trace.round_seconds.append(time.perf_counter() - start)
                        break
                    predictions, record = self.reprompt(predictions, signals, calls, t)
            except RegionCallError as exc:
                raise SceneFailed(self.scene.source_id, f"round {t}: {exc}") from exc
            trace.rounds.append(record)
            trace.round_seconds.append(time.perf_counter() - start)
        return trace


def base_round(scene: Scene, backend: Backend, config: LoopConfig, mapper: LabelMapper,
               **kwargs) -> tuple[list[Prediction], RoundRecord]:
    return Dialogue(scene, backend, None, config, mapper, **kwargs).base_round()


def feedback_round(scene: Scene, backend: Backend, predictions: list[Prediction], config: LoopConfig, t: int,
                   mapper: LabelMapper, verifier: Optional[Backend] = None,
                   history: Optional[list[promptkit.Analysis]] = None,
                   **kwargs) -> tuple[list[Prediction], RoundRecord]:
    """One feedback round outside a full dialogue. ``history`` (previous
    analyses) is extended in place when given."""
    d = Dialogue(scene, backend, verifier, config, mapper, **kwargs)
    if history is not None:
        d.history = history
    if config.feedback_source == "self_correct":
        for unit in d.units:
            unit.context = [Turn("user", promptkit.build_base_prompt(unit.regions, scene.width, scene.height,
                                                                     config.box_format, d.templates)),
                            Turn("assistant", promptkit.format_answer(
                                {p.region_id: p.raw for p in predictions if p.region_id in unit.ids}))]
    return d.feedback_round(predictions, t)


def run_dialogue(scene: Scene, backend: Backend, verifier_backend: Optional[Backend], config: LoopConfig,
                 mapper: LabelMapper, templates: promptkit.TemplateSet = promptkit.DEFAULT,
                 image_sink: Optional[ImageSink] = None) -> DialogueTrace:
    return Dialogue(scene, backend, verifier_backend, config, mapper, templates, image_sink).run()
