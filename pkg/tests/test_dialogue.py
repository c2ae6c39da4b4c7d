import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groundloop.backends import CannedBackend, TransportError
from groundloop.dialogue import DialogueTrace, LoopConfig, SceneFailed, base_round, feedback_round, run_dialogue
from groundloop.feedback import INCORRECT
from groundloop.imaging import VisualPromptSpec
from groundloop.promptkit import GUIDING_SENTENCE, format_answer

from conftest import scripted


def _labels(trace, t):
    return trace.rounds[t].labels()


def test_correct_regions_are_frozen(small_split, mapper):
    scenes, vocab = small_split
    be = scripted(scenes, vocab, base_accuracy=0.4, follow_prob=0.3)
    cfg = LoopConfig(max_rounds=4, stop_on_all_correct=False)
    for scene in scenes:
        tr = run_dialogue(scene, be, None, cfg, mapper)
        assert len(tr.rounds) == 5
        for t in range(1, 5):
            prev, cur = tr.rounds[t - 1], tr.rounds[t]
            flagged = set(cur.flagged)
            for p, c, g in zip(prev.predictions, cur.predictions, tr.gt_labels):
                if p.region_id not in flagged:
                    assert c == p
                assert (p.region_id in flagged) == (p.label != g)


def test_early_stop_records_final_check(small_split, mapper):
    scenes, vocab = small_split
    be = scripted(scenes, vocab, base_accuracy=0.0, follow_prob=1.0)
    tr = run_dialogue(scenes[0], be, None, LoopConfig(max_rounds=5), mapper)
    assert len(tr.rounds) == 2 and tr.rounds[1].accuracy == 1.0
    assert tr.all_correct and tr.final_check.t == 2 and not tr.final_check.flagged
    again = DialogueTrace.from_dict(tr.to_dict())
    assert again.to_dict() == tr.to_dict()


def test_reprompt_uses_guiding_prefix_and_history(small_split, mapper):
    scenes, vocab = small_split
    scene = scenes[0]
    # every answer names a class no region has, so everything stays wrong
    wrong = format_answer({r.id: "nonexistent" for r in scene.regions})
    be = CannedBackend([wrong])
    cfg = LoopConfig(max_rounds=2, granularity="scene", samples_per_call=1)
    tr = run_dialogue(scene, be, None, cfg, mapper)
    base, r1, r2 = be.requests
    assert base.assistant_prefix is None
    assert r1.assistant_prefix == GUIDING_SENTENCE
    assert "* Analysis 1" in r1.turns[-1].text and "* Analysis 2" not in r1.turns[-1].text
    assert "* Analysis 2" in r2.turns[-1].text
    assert len(tr.rounds) == 3


def test_no_cot(small_split, mapper):
    scenes, vocab = small_split
    be = CannedBackend([format_answer({r.id: "x" for r in scenes[0].regions})])
    run_dialogue(scenes[0], be, None, LoopConfig(max_rounds=1, use_cot=False, granularity="scene"), mapper)
    assert all(r.assistant_prefix is None for r in be.requests)


def test_unparsed_flagged_without_verifier_call(small_split, mapper):
    scenes, vocab = small_split
    agent = CannedBackend(["I cannot tell."])
    verifier = CannedBackend(["Yes"])
    cfg = LoopConfig(max_rounds=1, feedback_source="vlm_verify")
    tr = run_dialogue(scenes[0], agent, verifier, cfg, mapper)
    assert all(p.label == -1 for p in tr.rounds[0].predictions)
    assert tr.rounds[1].flagged == [r.id for r in scenes[0].regions]
    assert verifier.requests == []


def test_vlm_verify_round_calls_verifier_per_region(small_split, mapper):
    scenes, vocab = small_split
    scene = scenes[0]
    agent = scripted(scenes, vocab, base_accuracy=0.5)
    verifier = CannedBackend(["No"])
    cfg = LoopConfig(max_rounds=1, feedback_source="vlm_verify", verify_prompt=VisualPromptSpec("mark_plus_crop"))
    tr = run_dialogue(scene, agent, verifier, cfg, mapper)
    assert len(verifier.requests) == len(scene.regions)
    assert all(s.verdict == INCORRECT for s in tr.rounds[1].feedback)
    assert 'Does this marked region contain' in verifier.requests[0].turns[-1].text


def test_self_correct_round(small_split, mapper):
    scenes, vocab = small_split
    be = scripted(scenes, vocab, base_accuracy=0.5, self_revise_prob=0.5)
    tr = run_dialogue(scenes[0], be, None, LoopConfig(max_rounds=3, feedback_source="self_correct",
                                                      stop_on_all_correct=False), mapper)
    assert len(tr.rounds) == 4
    for t in range(1, 4):
        for p, c, s in zip(tr.rounds[t - 1].predictions, tr.rounds[t].predictions, tr.rounds[t].feedback):
            assert (s.verdict == INCORRECT) == (p.label != c.label)


def test_gpt4v_style(small_split, mapper):
    scenes, vocab = small_split
    be = scripted(scenes, vocab, base_accuracy=1.0)
    sink = {}
    cfg = LoopConfig(max_rounds=1, prompt_style="gpt4v", granularity="scene")
    tr = run_dialogue(scenes[0], be, None, cfg, mapper, image_sink=lambda k, v: sink.setdefault(k, v))
    assert tr.rounds[0].accuracy == 1.0 and tr.all_correct
    assert any(k.endswith("_base") for k in sink)


def test_backend_failure_fails_scene(small_split, mapper):
    scenes, vocab = small_split

    class Down(CannedBackend):
        def chat(self, request):
            raise TransportError("gone", 503)

    with pytest.raises(SceneFailed, match="gone"):
        run_dialogue(scenes[0], Down(["x"]), None, LoopConfig(max_rounds=1), mapper)


def test_standalone_rounds(small_split, mapper):
    scenes, vocab = small_split
    be = scripted(scenes, vocab, base_accuracy=0.0, follow_prob=1.0)
    cfg = LoopConfig(max_rounds=1)
    preds, rec = base_round(scenes[0], be, cfg, mapper)
    assert rec.accuracy == 0.0
    new, rec1 = feedback_round(scenes[0], be, preds, cfg, 1, mapper)
    assert rec1.accuracy == 1.0
    with pytest.raises(ValueError):
        feedback_round(scenes[0], be, preds, cfg, 0, mapper)


def test_config_validation():
    with pytest.raises(ValueError):
        LoopConfig(feedback_source="magic")
    with pytest.raises(ValueError):
        LoopConfig(granularity="scene", visual_prompt=VisualPromptSpec("roi_crop"))
    with pytest.raises(ValueError):
        LoopConfig(verify_prompt=VisualPromptSpec("som"))


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.integers(0, 10**6),
       st.sampled_from(["oracle_binary", "oracle_class"]))
def test_oracle_loop_monotone(p0, q, keep, seed, source):
    from groundloop.dataset import make_synthetic_scenes
    from groundloop.labelmap import LabelMapper

    scenes, vocab = make_synthetic_scenes(2, 4, 6, seed=seed % 97)
    be = scripted(scenes, vocab, seed=seed, base_accuracy=p0, follow_prob=q, keep_prob=keep)
    cfg = LoopConfig(max_rounds=3, feedback_source=source, parallelism=1)
    for scene in scenes:
        acc = run_dialogue(scene, be, None, cfg, LabelMapper(vocab)).accuracies
        assert all(b >= a for a, b in zip(acc, acc[1:]))
