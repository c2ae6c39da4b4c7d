"""Parsing raw completions and majority voting over samples."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

from groundloop.dataset import normalize_name

UNPARSED = "(unparsed)"

_PAIR_RE = re.compile(r"\\id\{\s*(\d+)\s*\}(?:(?!\\id\{).)*?\\class\{([^{}]*)\}", re.S)
_ENUM_RE = re.compile(r"^\s*(?:\[\s*(\d+)\s*\]|(\d+)\s*[.:)\-])\s*[:\-]?\s*(.+?)\s*$", re.M)
_QUOTES = "\"'`\u201c\u201d\u2018\u2019"


class YesNo(str, Enum):
    YES = "yes"
    NO = "no"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class RawSampleSet:
    samples: tuple[str, ...]
    params: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if len(self.samples) < 1:
            raise ValueError("a sample set needs at least one completion")


@dataclass(frozen=True)
class ParsedGrounding:
    assignments: dict[int, str]
    unparsed_ids: tuple[int, ...]

    def get(self, region_id: int) -> str:
        return self.assignments.get(region_id, UNPARSED)


def _clean(name: str) -> str:
    return name.strip().strip(_QUOTES).strip()


def parse_grounding(text: str, expected_ids: Sequence[int]) -> ParsedGrounding:
    """Pull ``\\id{i} ... \\class{NAME}`` pairs out of a completion.

    Only ids in ``expected_ids`` are kept; a repeated id takes its last
    occurrence; empty names count as unparsed.
    """
    if not expected_ids:
        raise ValueError("expected_ids must be non-empty")
    expected = set(expected_ids)
    found: dict[int, str] = {}
    for m in _PAIR_RE.finditer(text):
        i = int(m.group(1))
        name = _clean(m.group(2))
        if i in expected and name:
            found[i] = name
    ordered = {i: found[i] for i in expected_ids if i in found}
    return ParsedGrounding(ordered, tuple(i for i in expected_ids if i not in found))


def parse_enumeration(text: str, expected_ids: Sequence[int]) -> ParsedGrounding:
    """Parse numbered-list answers ("1. sink", "[2] tree") such as GPT-4V gives
    to the Set-of-Mark prompt. Falls back to nothing if no line matches."""
    found: dict[int, str] = {}
    expected = set(expected_ids)
    for m in _ENUM_RE.finditer(text):
        i = int(m.group(1) or m.group(2))
        name = _clean(m.group(3).rstrip("."))
        if i in expected and name:
            found[i] = name
    ordered = {i: found[i] for i in expected_ids if i in found}
    return ParsedGrounding(ordered, tuple(i for i in expected_ids if i not in found))


def parse_any(text: str, expected_ids: Sequence[int]) -> ParsedGrounding:
    parsed = parse_grounding(text, expected_ids)
    if parsed.unparsed_ids:
        fallback = parse_enumeration(text, parsed.unparsed_ids)
        if fallback.assignments:
            merged = {**parsed.assignments, **fallback.assignments}
            ordered = {i: merged[i] for i in expected_ids if i in merged}
            return ParsedGrounding(ordered, tuple(i for i in expected_ids if i not in merged))
    return parsed


_WORD_RE = re.compile(r"[a-z]+")


def parse_yes_no(text: str) -> YesNo:
    """Case-insensitive scan for standalone "yes"/"no" words. A reply that
    uses both, or neither, is unknown."""
    present = {w for w in _WORD_RE.findall(text.lower()) if w in ("yes", "no")}
    if len(present) == 1:
        return YesNo(present.pop())
    return YesNo.UNKNOWN


def plurality(labels: Iterable[str]) -> str:
    """Most common normalized label; ties go to the lexicographically smallest."""
    counts = Counter(normalize_name(label) for label in labels)
    if not counts:
        raise ValueError("no labels to vote on")
    best = max(counts.values())
    return min(k for k, v in counts.items() if v == best)


def majority_vote(parsed: Sequence[ParsedGrounding], expected_ids: Sequence[int]) -> ParsedGrounding:
    if not parsed:
        raise ValueError("majority_vote needs at least one sample")
    out: dict[int, str] = {}
    for i in expected_ids:
        votes = [p.assignments[i] for p in parsed if i in p.assignments]
        if votes:
            out[i] = plurality(votes)
    return ParsedGrounding(out, tuple(i for i in expected_ids if i not in out))


def majority_yes_no(answers: Sequence[YesNo]) -> YesNo:
    """NO only on a strict plurality of NO; otherwise the plurality of
    YES/UNKNOWN, with ties resolved toward YES."""
    c = Counter(answers)
    y, n, u = c[YesNo.YES], c[YesNo.NO], c[YesNo.UNKNOWN]
    if n > y and n > u:
        return YesNo.NO
    if u > y and u >= n:
        return YesNo.UNKNOWN
    return YesNo.YES
