"""Seeded stand-in for a VLM, used as agent and as verifier.

The simulator reads the same prompts a real model would get and answers
them from the ground truth it is given, with configurable error rates. Every
random decision is a hash of (seed, scene, region, purpose[, request
fingerprint]), so completions are a pure function of profile and request
and no RNG state is shared between calls.

Per-region base answers depend only on (seed, scene, region), so the same
mistakes recur whenever a region is asked from scratch.
"""

from __future__ import annotations

import hashlib
import re
import struct
from dataclasses import dataclass, replace
from typing import Mapping, Optional, Sequence

from groundloop import promptkit
from groundloop.backends.base import ChatRequest, SamplingParams
from groundloop.dataset import Scene, Vocabulary, normalize_name
from groundloop.responses import parse_grounding

_QUOTED_CLASS_RE = re.compile(r"contain \"(.*)\"\? Answer yes or no\.", re.S)
_CLASS_SUGGESTION_RE = re.compile(r"Adjust the class names for objects with IDs [\d, ]+ to ")
_PREVIOUS_RE = re.compile(r"Object\(s\) with inferred class names: (.*)")


def _check_prob(name: str, value: float) -> None:
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {value}")


@dataclass(frozen=True)
class ScriptedAgentProfile:
    """Behavior of the simulated model.

    Attributes:
        base_accuracy: chance a base answer is the true class.
        follow_prob: chance a region flagged incorrect is re-answered with the
            true class; otherwise a uniformly drawn wrong class.
        verifier_tpr: chance the verifier answers "no" for a wrong label.
        verifier_fpr: chance the verifier answers "no" for a right label.
        vocabulary_size: K, the number of classes; None takes it from the
            vocabulary the simulator is given.
        rng_seed: base seed.
        keep_prob: chance a flagged region repeats its previous answer
            (checked before ``follow_prob``).
        class_follow_prob: ``follow_prob`` for class-label feedback; None
            means same as ``follow_prob``.
        self_revise_prob: chance a region changes its answer when asked to
            review itself; the new answer is uniform over the other classes.
        sample_noise: per-sample chance that a region's answer is replaced by
            a uniformly drawn class, so majority voting has something to do.
    """

    base_accuracy: float = 0.4
    follow_prob: float = 0.5
    verifier_tpr: float = 0.8
    verifier_fpr: float = 0.2
    vocabulary_size: Optional[int] = None
    rng_seed: int = 0
    keep_prob: float = 0.0
    class_follow_prob: Optional[float] = None
    self_revise_prob: float = 0.3
    sample_noise: float = 0.0

    def __post_init__(self):
        for name in ("base_accuracy", "follow_prob", "verifier_tpr", "verifier_fpr", "keep_prob",
                     "self_revise_prob", "sample_noise"):
            _check_prob(name, getattr(self, name))
        if self.class_follow_prob is not None:
            _check_prob("class_follow_prob", self.class_follow_prob)
        if self.vocabulary_size is not None and self.vocabulary_size < 2:
            raise ValueError("vocabulary_size must be >= 2")


def _uniform(*key) -> float:
    digest = hashlib.blake2b(repr(key).encode(), digest_size=8).digest()
    return struct.unpack("<Q", digest)[0] / 2.0**64


def _index(n: int, *key) -> int:
    return min(int(_uniform(*key) * n), n - 1)


class ScriptedBackend:
    """Simulated model answering from ``truth``: scene id -> region id ->
    vocabulary index.

    Requests must carry a ``scene_id`` tag; verification requests also need
    ``region_id`` and Set-of-Mark enumeration requests ``region_ids``.
    """

    def __init__(self, profile: ScriptedAgentProfile, truth: Mapping[str, Mapping[int, int]],
                 vocabulary: Vocabulary, sampling: SamplingParams = SamplingParams(),
                 system_prompt: Optional[str] = None):
        if profile.vocabulary_size is not None and profile.vocabulary_size != len(vocabulary):
            raise ValueError(f"profile expects K={profile.vocabulary_size}, vocabulary has {len(vocabulary)}")
        if len(vocabulary) < 2:
            raise ValueError("the simulator needs at least two classes")
        self.profile = profile
        self.truth = {str(k): dict(v) for k, v in truth.items()}
        self.vocabulary = vocabulary
        self.sampling = sampling
        self.system_prompt = system_prompt

    @classmethod
    def from_scenes(cls, profile: ScriptedAgentProfile, scenes: Sequence[Scene], vocabulary: Vocabulary,
                    **kwargs) -> "ScriptedBackend":
        truth = {s.source_id: {r.id: r.gt_class for r in s.regions} for s in scenes}
        return cls(profile, truth, vocabulary, **kwargs)

    def with_seed(self, seed: int) -> "ScriptedBackend":
        return ScriptedBackend(replace(self.profile, rng_seed=seed), self.truth, self.vocabulary,
                               self.sampling, self.system_prompt)

    def with_profile(self, **changes) -> "ScriptedBackend":
        return ScriptedBackend(replace(self.profile, **changes), self.truth, self.vocabulary,
                               self.sampling, self.system_prompt)

    # -- helpers -----------------------------------------------------------

    @property
    def k(self) -> int:
        return len(self.vocabulary)

    def _gt(self, scene: str, region: int) -> int:
        try:
            return self.truth[scene][region]
        except KeyError:
            raise KeyError(f"simulator has no ground truth for scene {scene!r} region {region}") from None

    def _wrong(self, gt: int, *key) -> int:
        j = _index(self.k - 1, *key)
        return j if j < gt else j + 1

    def _other_than(self, name: str, *key) -> int:
        cur = self.vocabulary.index(name)
        if cur is None:
            return _index(self.k, *key)
        return self._wrong(cur, *key)

    def base_answer(self, scene: str, region: int) -> int:
        """The class this simulated model names for a region asked from scratch."""
        seed = self.profile.rng_seed
        gt = self._gt(scene, region)
        if _uniform(seed, scene, region, "base") < self.profile.base_accuracy:
            return gt
        return self._wrong(gt, seed, scene, region, "base-wrong")

    def _samples(self, answers: dict[int, int], fp: str, n: int, enumerate_style: bool,
                 prefix: Optional[str]) -> list[str]:
        seed = self.profile.rng_seed
        out = []
        for j in range(n):
            lines = {}
            for rid, cls in answers.items():
                if self.profile.sample_noise and _uniform(seed, fp, j, rid, "noise") < self.profile.sample_noise:
                    cls = _index(self.k, seed, fp, j, rid, "noise-class")
                lines[rid] = self.vocabulary[cls]
            if enumerate_style:
                text = "\n".join(f"[{rid}] {name}" for rid, name in lines.items())
            else:
                text = promptkit.format_answer(lines)
            out.append(" " + text if prefix else text)
        return out

    # -- request handling --------------------------------------------------

    def chat(self, request: ChatRequest) -> list[str]:
        text = request.last_user_text()
        scene = request.tags.get("scene_id")
        if scene is None:
            raise ValueError("scripted backend needs a scene_id tag on every request")
        fp = request.fingerprint()
        seed = self.profile.rng_seed
        prefix = request.assistant_prefix

        if text.endswith("Answer yes or no."):
            return [self._verify(text, scene, int(request.tags["region_id"]), fp)] * request.n

        if text.strip() == promptkit.self_correction_prompt().strip():
            previous = ""
            for t in reversed(request.turns):
                if t.role == "assistant":
                    previous = t.text
                    break
            first_user = next(t.text for t in request.turns if t.role == "user")
            ids = promptkit.prompt_region_ids(first_user)
            parsed = parse_grounding(previous, ids) if ids else None
            answers = {}
            for rid in ids:
                prev_name = parsed.get(rid) if parsed else ""
                prev = self.vocabulary.index(prev_name)
                if prev is None:
                    prev = self.base_answer(scene, rid)
                if _uniform(seed, fp, rid, "revise") < self.profile.self_revise_prob:
                    prev = self._other_than(self.vocabulary[prev], seed, fp, rid, "revise-class")
                answers[rid] = prev
            return self._samples(answers, fp, request.n, False, prefix)

        if "Expert's decision(s)" in text:
            return self._feedback(text, scene, fp, request.n, prefix)

        if "Please enumerate their names" in text:
            ids = [int(i) for i in request.tags.get("region_ids", "").split(",") if i]
            answers = {rid: self.base_answer(scene, rid) for rid in ids}
            return self._samples(answers, fp, request.n, True, prefix)

        ids = promptkit.prompt_region_ids(text)
        answers = {rid: self.base_answer(scene, rid) for rid in ids}
        return self._samples(answers, fp, request.n, False, prefix)

    def _verify(self, text: str, scene: str, region: int, fp: str) -> str:
        m = _QUOTED_CLASS_RE.search(text)
        claimed = m.group(1) if m else ""
        gt_name = self.vocabulary[self._gt(scene, region)]
        wrong = normalize_name(claimed) != normalize_name(gt_name)
        rate = self.profile.verifier_tpr if wrong else self.profile.verifier_fpr
        says_no = _uniform(self.profile.rng_seed, fp, "verify") < rate
        return "No, it does not." if says_no else "Yes, it does."

    def _feedback(self, text: str, scene: str, fp: str, n: int, prefix: Optional[str]) -> list[str]:
        seed = self.profile.rng_seed
        flagged = promptkit.prompt_region_ids(text)
        previous = {}
        prev_lines = _PREVIOUS_RE.findall(text)
        if prev_lines:
            previous = parse_grounding(prev_lines[-1], flagged).assignments if flagged else {}
        class_label = _CLASS_SUGGESTION_RE.search(text) is not None
        follow = self.profile.follow_prob
        if class_label and self.profile.class_follow_prob is not None:
            follow = self.profile.class_follow_prob
        answers = {}
        for rid in flagged:
            gt = self._gt(scene, rid)
            prev = self.vocabulary.index(previous.get(rid, ""))
            if prev is not None and _uniform(seed, fp, rid, "keep") < self.profile.keep_prob:
                answers[rid] = prev
            elif _uniform(seed, fp, rid, "follow") < follow:
                answers[rid] = gt
            else:
                answers[rid] = self._wrong(gt, seed, fp, rid, "resample")
        return self._samples(answers, fp, n, False, prefix)
