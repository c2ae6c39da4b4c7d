import numpy as np
import pytest

from groundloop.backends import CannedBackend, ScriptedAgentProfile, ScriptedBackend, TransportError
from groundloop.dataset import make_synthetic_scenes
from groundloop.feedback import (
    CORRECT,
    INCORRECT,
    FeedbackSignal,
    Prediction,
    RegionCallError,
    intrinsic_self_correct,
    oracle_binary,
    oracle_class,
    vlm_verify,
)
from groundloop.backends.base import Turn
from groundloop.imaging import VisualPromptSpec
from groundloop.labelmap import LabelMapper
from groundloop.promptkit import build_base_prompt, format_answer

SCENES, VOCAB = make_synthetic_scenes(1, 4, 5, seed=1)
SCENE = SCENES[0]
MAPPER = LabelMapper(VOCAB)


def _preds(labels):
    return [Prediction(r.id, VOCAB[lbl], lbl) for r, lbl in zip(SCENE.regions, labels)]


def test_oracles():
    gt = [r.gt_class for r in SCENE.regions]
    labels = [g if k % 2 else (g + 1) % 5 for k, g in enumerate(gt)]
    preds = _preds(labels)
    assert [s.verdict for s in oracle_binary(preds, SCENE)] == [INCORRECT, CORRECT, INCORRECT, CORRECT]
    cls = oracle_class(preds, SCENE)
    assert [s.suggested_class for s in cls] == [gt[0], None, gt[2], None]
    with pytest.raises(ValueError):
        oracle_binary(preds[:2], SCENE)


def test_signal_validation():
    with pytest.raises(ValueError):
        FeedbackSignal(1, INCORRECT, "vlm_verify", suggested_class=3)
    with pytest.raises(ValueError):
        FeedbackSignal(1, "maybe", "oracle_binary")


def test_vlm_verify_votes_and_prompt():
    be = CannedBackend(["No.", "no", "Yes", "unclear", "No, it does not."])
    calls = []
    sig = vlm_verify(be, SCENE, SCENE.regions[0], "class 3", VisualPromptSpec("roi_crop"), 5, calls=calls)
    assert sig.verdict == INCORRECT and sig.source == "vlm_verify"
    req = be.requests[0]
    assert req.turns[-1].text == 'Does this cropped image contain "class 3"? Answer yes or no.'
    assert len(req.turns[-1].images) == 1 and req.n == 5
    assert calls[0]["decision"] == "no"
    be2 = CannedBackend(["No", "Yes"])
    assert vlm_verify(be2, SCENE, SCENE.regions[0], "x", VisualPromptSpec("visual_mark"), 4).verdict == CORRECT


def test_vlm_verify_rejects_unsupported_prompt():
    with pytest.raises(ValueError):
        vlm_verify(CannedBackend(["yes"]), SCENE, SCENE.regions[0], "x", VisualPromptSpec("som"))


def test_vlm_verify_wraps_backend_errors():
    class Down:
        sampling = CannedBackend(["x"]).sampling
        system_prompt = None

        def chat(self, request):
            raise TransportError("boom", 503)

    with pytest.raises(RegionCallError) as err:
        vlm_verify(Down(), SCENE, SCENE.regions[1], "x", VisualPromptSpec("roi_crop"))
    assert err.value.region_id == 2 and err.value.scene_id == SCENE.source_id


def test_perfect_scripted_verifier_matches_oracle():
    sim = ScriptedBackend.from_scenes(ScriptedAgentProfile(verifier_tpr=1.0, verifier_fpr=0.0), SCENES, VOCAB)
    rng = np.random.default_rng(0)
    preds = _preds(rng.integers(0, 5, len(SCENE.regions)).tolist())
    got = [vlm_verify(sim, SCENE, r, p.raw, VisualPromptSpec("roi_crop")).verdict for r, p in zip(SCENE.regions, preds)]
    assert got == [s.verdict for s in oracle_binary(preds, SCENE)]


def test_self_correct_marks_changed_regions():
    preds = _preds([0, 1, 2, 3])
    context = [Turn("user", build_base_prompt(SCENE.regions, SCENE.width, SCENE.height)),
               Turn("assistant", format_answer({p.region_id: p.raw for p in preds}))]
    reply = format_answer({1: "class 0", 2: "class 4", 3: "CLASS 2 "})  # region 4 omitted
    be = CannedBackend([reply])
    revised, sigs = intrinsic_self_correct(be, context, preds, MAPPER, 3, tags={"scene_id": "x"})
    assert [s.verdict for s in sigs] == [CORRECT, INCORRECT, CORRECT, CORRECT]
    assert [p.label for p in revised] == [0, 4, 2, 3]
    assert be.requests[0].turns[-1].text == "Carefully review and refine your answer"
    with pytest.raises(ValueError):
        intrinsic_self_correct(be, [], preds, MAPPER)
