"""Prompt templates and their fillers.

Placeholders use ``${name}`` (:class:`string.Template`); the literal
``\\id{..}``/``\\box{..}``/``\\class{..}`` markers in the text are part of
the prompt, not placeholders. A template directory may override any kind
with a ``<kind>.txt`` file using the same placeholder names.
"""

from __future__ import annotations

import re
import string
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from groundloop.dataset import Region, Vocabulary

_INTRO = (
    "You are tasked with visual semantic grounding. Your goal is to determine the class names for "
    "objects within a provided image"
)
_BOX_SENTENCE = (
    "Each object in the image is identified by a unique ID and its location is defined by a precise "
    "bounding box, formatted as: \\id{id} \\box{${box_format}}, where coordinates specify the box corners. "
    "The inferred class name for each object is denoted as \\class{class name}."
)
_EXPERT_PREAMBLE = (
    _INTRO + " and leverage the insights from expert analyses. The expert analyses offer detailed "
    "information on the inferred class names for each object in the provided image. " + _BOX_SENTENCE +
    " I have labeled each object with its ID and overlaid its segmentation mask on the image to clarify "
    "the correspondences.\n\n"
    "One expert analyses on the provided image are shown below:\n"
    "${analyses}\n\n"
    "Examine the image and the expert analyses to determine the true class name of the object(s): "
    "${incorrect_obj_id}. Put your final answer by filling in the placeholder(s) in the following string "
    "at the beginning: \"${output_format}\""
)
_ANALYSIS_HEAD = (
    "* Analysis ${analysis_index}\n"
    "Object(s) with inferred class names: ${previous_predictions}\n"
    "Expert's decision(s) on class names: The inferred class name(s) for ${incorrect_obj_id} are incorrect. "
    "The inferred class name(s) for ${incorrect_obj_id} are not \"${incorrect_obj_class_name}\", respectively. \n"
)
VOCAB_CLAUSE = "You must answer by selecting from the following names:"

DEFAULT_TEMPLATES: dict[str, str] = {
    "base_prediction": (
        _INTRO + ". " + _BOX_SENTENCE + " Here are the objects: ${obj_ids_str}\n"
        "Put your final answer by filling in the placeholder(s) in the following string at the beginning: "
        "\"${output_format}\""
    ),
    "binary_feedback": _EXPERT_PREAMBLE,
    "class_label_feedback": _EXPERT_PREAMBLE,
    "binary_analysis": _ANALYSIS_HEAD + "Expert's suggestion: Adjust the class names for objects with IDs ${incorrect_obj_id}.",
    "class_label_analysis": (
        _ANALYSIS_HEAD + "Expert's suggestion: Adjust the class names for objects with IDs ${incorrect_obj_id} "
        "to ${incorrect_obj_ground_truth_class_name}, respectively."
    ),
    "verify_yes_no": "Does this ${visual_prompt} contain \"${class_name}\"? Answer yes or no.",
    "self_correction": "Carefully review and refine your answer",
    "gpt4v_base": (
        "I have labeled a bright numeric ID at the center for each visual object in the image. Please "
        "enumerate their names. " + VOCAB_CLAUSE + "[${class_list}]"
    ),
    "gpt4v_feedback": _EXPERT_PREAMBLE + " " + VOCAB_CLAUSE + " [${class_list}]",
}

PLACEHOLDERS: dict[str, frozenset[str]] = {
    "base_prediction": frozenset({"box_format", "obj_ids_str", "output_format"}),
    "binary_feedback": frozenset({"box_format", "analyses", "incorrect_obj_id", "output_format"}),
    "class_label_feedback": frozenset({"box_format", "analyses", "incorrect_obj_id", "output_format"}),
    "binary_analysis": frozenset(
        {"analysis_index", "previous_predictions", "incorrect_obj_id", "incorrect_obj_class_name"}
    ),
    "class_label_analysis": frozenset(
        {"analysis_index", "previous_predictions", "incorrect_obj_id", "incorrect_obj_class_name",
         "incorrect_obj_ground_truth_class_name"}
    ),
    "verify_yes_no": frozenset({"visual_prompt", "class_name"}),
    "self_correction": frozenset(),
    "gpt4v_base": frozenset({"class_list"}),
    "gpt4v_feedback": frozenset({"box_format", "analyses", "incorrect_obj_id", "output_format", "class_list"}),
}

GUIDING_SENTENCE = "After examining the image and the expert analyses, the final answer is"
GPT4V_SYSTEM_PROMPT = "- For any marks mentioned in your answer, please highlight them with []."

RESIDUAL_PLACEHOLDER = re.compile(r"\$\{?[A-Za-z_][A-Za-z0-9_]*\}?")


class PromptError(ValueError):
    """Bad arguments to a prompt builder."""


class TemplateSet:
    """The prompt templates, optionally overridden from a directory."""

    def __init__(self, overrides: Optional[Mapping[str, str]] = None):
        self.templates = dict(DEFAULT_TEMPLATES)
        for kind, body in (overrides or {}).items():
            if kind not in PLACEHOLDERS:
                raise PromptError(f"unknown template kind {kind!r}")
            used = {m.group("named") or m.group("braced") for m in string.Template.pattern.finditer(body)
                    if m.group("named") or m.group("braced")}
            extra = used - PLACEHOLDERS[kind]
            if extra:
                raise PromptError(f"template {kind!r} uses undocumented placeholders {sorted(extra)}")
            self.templates[kind] = body

    @classmethod
    def from_dir(cls, path: Path | str) -> "TemplateSet":
        path = Path(path)
        overrides = {p.stem: p.read_text().rstrip("\n") for p in sorted(path.glob("*.txt"))}
        return cls(overrides)

    def fill(self, kind: str, **values) -> str:
        missing = PLACEHOLDERS[kind] - values.keys()
        if missing:
            raise PromptError(f"template {kind!r} missing values for {sorted(missing)}")
        return string.Template(self.templates[kind]).substitute(values)


DEFAULT = TemplateSet()


@dataclass(frozen=True)
class BoxFormat:
    style: str = "normalized_xyxy"
    precision: int = 2

    def __post_init__(self):
        if self.style not in ("normalized_xyxy", "pixel_xyxy"):
            raise PromptError(f"unknown box style {self.style!r}")
        if self.precision < 0:
            raise PromptError("precision must be >= 0")

    def describe(self) -> str:
        return "(x1, y1, x2, y2)"

    def format(self, bbox, width: int, height: int) -> str:
        x0, y0, x1, y1 = bbox
        if self.style == "pixel_xyxy":
            vals = (x0, y0, x1, y1)
            return "(" + ", ".join(str(int(v)) for v in vals) + ")"
        vals = (x0 / width, y0 / height, x1 / width, y1 / height)
        return "(" + ", ".join(f"{v:.{self.precision}f}" for v in vals) + ")"


def output_format(ids: Iterable[int]) -> str:
    """The fill-in answer string: one ``\\id{i} \\class{class name}`` line per id."""
    return "\n".join(f"\\id{{{i}}} \\class{{class name}}" for i in ids)


def format_answer(assignments: Mapping[int, str] | Sequence[tuple[int, str]]) -> str:
    """A conforming answer: the output format with every placeholder filled."""
    items = assignments.items() if isinstance(assignments, Mapping) else assignments
    return "\n".join(f"\\id{{{i}}} \\class{{{name}}}" for i, name in items)


def _join_ids(ids: Sequence[int]) -> str:
    return ", ".join(str(i) for i in ids)


def build_base_prompt(regions: Sequence[Region], width: int, height: int,
                      box_format: BoxFormat = BoxFormat(), templates: TemplateSet = DEFAULT) -> str:
    if not regions:
        raise PromptError("cannot build a query for zero regions")
    entries = ", ".join(f"\\id{{{r.id}}} \\box{{{box_format.format(r.bbox, width, height)}}}" for r in regions)
    return templates.fill(
        "base_prediction",
        box_format=box_format.describe(),
        obj_ids_str=entries,
        output_format=output_format(r.id for r in regions),
    )


@dataclass(frozen=True)
class Analysis:
    """One round of expert feedback as shown to the agent."""

    previous: tuple[tuple[int, str], ...]
    flagged: tuple[int, ...]
    suggestions: Optional[tuple[str, ...]] = None

    def restricted_to(self, ids: Iterable[int]) -> Optional["Analysis"]:
        """This analysis narrowed to ``ids``; None if none of them were flagged."""
        keep = set(ids)
        flagged = tuple(i for i in self.flagged if i in keep)
        if not flagged:
            return None
        suggestions = None
        if self.suggestions is not None:
            lookup = dict(zip(self.flagged, self.suggestions))
            suggestions = tuple(lookup[i] for i in flagged)
        return Analysis(tuple(p for p in self.previous if p[0] in keep), flagged, suggestions)


def _render_analysis(kind: str, index: int, analysis: Analysis, templates: TemplateSet) -> str:
    prev = dict(analysis.previous)
    values = dict(
        analysis_index=str(index),
        previous_predictions=", ".join(f"\\id{{{i}}} \\class{{{name}}}" for i, name in analysis.previous),
        incorrect_obj_id=_join_ids(analysis.flagged),
        incorrect_obj_class_name='", "'.join(prev[i] for i in analysis.flagged),
    )
    if kind == "class_label":
        values["incorrect_obj_ground_truth_class_name"] = ", ".join(analysis.suggestions)
        return templates.fill("class_label_analysis", **values)
    return templates.fill("binary_analysis", **values)


def build_feedback_history_prompt(
    kind: str,
    analyses: Sequence[Analysis],
    box_format: BoxFormat = BoxFormat(),
    vocabulary: Optional[Vocabulary] = None,
    templates: TemplateSet = DEFAULT,
) -> Optional[str]:
    """Re-prompt for the ids flagged in the last analysis, with all earlier
    analyses folded in as "Analysis 1", "Analysis 2", ...

    Returns None when the last analysis flagged nothing. With a vocabulary
    the binary kind becomes the class-list variant used for GPT-4V.
    """
    if kind not in ("binary", "class_label"):
        raise PromptError(f"unknown feedback kind {kind!r}")
    if not analyses or not analyses[-1].flagged:
        return None
    for a in analyses:
        prev_ids = {i for i, _ in a.previous}
        if not set(a.flagged) <= prev_ids:
            raise PromptError(f"flagged ids {sorted(set(a.flagged) - prev_ids)} have no previous prediction")
        if kind == "class_label" and (a.suggestions is None or len(a.suggestions) != len(a.flagged)):
            raise PromptError("class-label feedback needs one suggestion per flagged id")
    body = "\n".join(_render_analysis(kind, k + 1, a, templates) for k, a in enumerate(analyses))
    last = analyses[-1]
    values = dict(
        box_format=box_format.describe(),
        analyses=body,
        incorrect_obj_id=_join_ids(last.flagged),
        output_format=output_format(last.flagged),
    )
    if vocabulary is not None and kind == "binary":
        return templates.fill("gpt4v_feedback", class_list=", ".join(vocabulary), **values)
    text = templates.fill(f"{kind}_feedback", **values)
    if vocabulary is not None:
        text = append_vocabulary_clause(text, vocabulary)
    return text


def build_feedback_prompt(
    kind: str,
    previous: Sequence[tuple[int, str]],
    flagged: Sequence[int],
    suggestions: Optional[Sequence[str]] = None,
    box_format: BoxFormat = BoxFormat(),
    templates: TemplateSet = DEFAULT,
) -> Optional[str]:
    """Single-analysis feedback prompt. None when ``flagged`` is empty."""
    if not flagged:
        return None
    if kind == "class_label" and (suggestions is None or len(suggestions) != len(flagged)):
        raise PromptError(
            f"class-label feedback needs {len(flagged)} suggestions, got {0 if suggestions is None else len(suggestions)}"
        )
    analysis = Analysis(tuple((int(i), str(c)) for i, c in previous), tuple(int(i) for i in flagged),
                        tuple(suggestions) if kind == "class_label" else None)
    return build_feedback_history_prompt(kind, [analysis], box_format, templates=templates)


def build_verify_prompt(visual_prompt_name: str, class_name: str, templates: TemplateSet = DEFAULT) -> str:
    if not class_name or not class_name.strip():
        raise PromptError("class name must be non-empty")
    return templates.fill("verify_yes_no", visual_prompt=visual_prompt_name, class_name=class_name)


def build_gpt4v_base_prompt(vocabulary: Vocabulary, templates: TemplateSet = DEFAULT) -> str:
    if not len(vocabulary):
        raise PromptError("empty vocabulary")
    return templates.fill("gpt4v_base", class_list=", ".join(vocabulary))


def guiding_sentence() -> str:
    return GUIDING_SENTENCE


def self_correction_prompt(templates: TemplateSet = DEFAULT) -> str:
    return templates.fill("self_correction")


def append_vocabulary_clause(prompt: str, vocabulary: Sequence[str]) -> str:
    names = list(vocabulary)
    if not names:
        raise PromptError("empty vocabulary")
    return f"{prompt} {VOCAB_CLAUSE} [{', '.join(names)}]"


VISUAL_PROMPT_NAMES = {
    "roi_crop": "cropped image",
    "visual_mark": "marked region",
    "mark_plus_crop": "marked region",
}

_OUTPUT_FORMAT_RE = re.compile(r"following string at the beginning: \"(.*?)\"", re.S)
_ID_RE = re.compile(r"\\id\{\s*(\d+)\s*\}")


def prompt_region_ids(text: str) -> list[int]:
    """Region ids a grounding prompt asks about, read back from its output format."""
    m = None
    for m in _OUTPUT_FORMAT_RE.finditer(text):
        pass
    source = m.group(1) if m else text
    seen = []
    for g in _ID_RE.finditer(source):
        i = int(g.group(1))
        if i not in seen:
            seen.append(i)
    return seen


def has_residual_placeholders(text: str) -> bool:
    return RESIDUAL_PLACEHOLDER.search(text) is not None
