import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groundloop import promptkit
from groundloop.dataset import Vocabulary, make_synthetic_scenes
from groundloop.promptkit import (
    Analysis,
    BoxFormat,
    PromptError,
    TemplateSet,
    build_base_prompt,
    build_feedback_history_prompt,
    build_feedback_prompt,
    build_gpt4v_base_prompt,
    build_verify_prompt,
    has_residual_placeholders,
    prompt_region_ids,
)

SCENES, VOCAB = make_synthetic_scenes(1, 6, 8, seed=0)
SCENE = SCENES[0]


def test_fixed_strings():
    assert promptkit.guiding_sentence() == "After examining the image and the expert analyses, the final answer is"
    assert promptkit.self_correction_prompt() == "Carefully review and refine your answer"
    assert build_verify_prompt("cropped image", "sink") == 'Does this cropped image contain "sink"? Answer yes or no.'
    assert promptkit.GPT4V_SYSTEM_PROMPT == "- For any marks mentioned in your answer, please highlight them with []."
    text = build_gpt4v_base_prompt(Vocabulary(("sky", "tree")))
    assert text.endswith("You must answer by selecting from the following names:[sky, tree]")


def test_base_prompt_contents():
    # 9x6 image, region 1 spans pixels 0..2 on both axes
    text = build_base_prompt(SCENE.regions[:2], SCENE.width, SCENE.height)
    assert "\\box{(x1, y1, x2, y2)}" in text
    assert "\\id{1} \\box{(0.00, 0.00, 0.22, 0.33)}" in text
    assert text.endswith('"\\id{1} \\class{class name}\n\\id{2} \\class{class name}"')
    assert not has_residual_placeholders(text)
    assert prompt_region_ids(text) == [1, 2]


def test_box_formats():
    assert BoxFormat().format((0, 5, 9, 9), 10, 10) == "(0.00, 0.50, 0.90, 0.90)"
    assert BoxFormat("pixel_xyxy").format((0, 5, 9, 9), 10, 10) == "(0, 5, 9, 9)"
    assert BoxFormat(precision=3).format((1, 1, 2, 2), 3, 3) == "(0.333, 0.333, 0.667, 0.667)"
    with pytest.raises(PromptError):
        BoxFormat("xywh")


def test_binary_feedback_prompt():
    text = build_feedback_prompt("binary", [(1, "sink"), (2, "tree"), (3, "sky")], [1, 3])
    assert "* Analysis 1\n" in text
    assert "Object(s) with inferred class names: \\id{1} \\class{sink}, \\id{2} \\class{tree}, \\id{3} \\class{sky}" in text
    assert 'The inferred class name(s) for 1, 3 are not "sink", "sky", respectively.' in text
    assert "Expert's suggestion: Adjust the class names for objects with IDs 1, 3." in text
    assert "true class name of the object(s): 1, 3." in text
    assert prompt_region_ids(text) == [1, 3]
    assert not has_residual_placeholders(text)


def test_class_label_feedback_prompt():
    text = build_feedback_prompt("class_label", [(1, "sink"), (2, "tree")], [2], ["bush"])
    assert "Adjust the class names for objects with IDs 2 to bush, respectively." in text
    with pytest.raises(PromptError):
        build_feedback_prompt("class_label", [(1, "sink")], [1])


def test_feedback_none_when_nothing_flagged():
    assert build_feedback_prompt("binary", [(1, "sink")], []) is None
    assert build_feedback_history_prompt("binary", [Analysis(((1, "a"),), ())]) is None


def test_history_folds_rounds():
    a1 = Analysis(((1, "a"), (2, "b")), (1, 2))
    a2 = Analysis(((1, "c"), (2, "b")), (1,))
    text = build_feedback_history_prompt("binary", [a1, a2])
    assert text.index("* Analysis 1") < text.index("* Analysis 2")
    assert prompt_region_ids(text) == [1]


def test_restricted_to():
    a = Analysis(((1, "a"), (2, "b")), (1, 2), ("x", "y"))
    assert a.restricted_to([2]) == Analysis(((2, "b"),), (2,), ("y",))
    assert Analysis(((1, "a"),), (1,)).restricted_to([5]) is None


def test_vocabulary_clause():
    a = Analysis(((1, "a"),), (1,))
    v = Vocabulary(("sky", "tree"))
    text = build_feedback_history_prompt("binary", [a], vocabulary=v)
    assert text.endswith('" You must answer by selecting from the following names: [sky, tree]')
    text = build_feedback_history_prompt("class_label", [Analysis(((1, "a"),), (1,), ("sky",))], vocabulary=v)
    assert text.endswith("You must answer by selecting from the following names: [sky, tree]")


def test_template_override(tmp_path):
    (tmp_path / "verify_yes_no.txt").write_text("Is ${class_name} in the ${visual_prompt}?\n")
    ts = TemplateSet.from_dir(tmp_path)
    assert build_verify_prompt("marked region", "sink", ts) == "Is sink in the marked region?"
    with pytest.raises(PromptError, match="undocumented"):
        TemplateSet({"verify_yes_no": "${nope}"})
    with pytest.raises(PromptError, match="unknown"):
        TemplateSet({"nonsense": "x"})


def test_missing_values_rejected():
    with pytest.raises(PromptError):
        promptkit.DEFAULT.fill("verify_yes_no", class_name="x")
    with pytest.raises(PromptError):
        build_verify_prompt("cropped image", "  ")


names = st.text(alphabet="abcdefghij klmn", min_size=1, max_size=12).filter(lambda s: s.strip())


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 40), names), min_size=1, max_size=6,
                unique_by=lambda p: p[0]), st.data())
def test_every_filled_prompt_is_total(previous, data):
    ids = [i for i, _ in previous]
    flagged = data.draw(st.lists(st.sampled_from(ids), min_size=1, unique=True))
    for kind in ("binary", "class_label"):
        sugg = [f"s{i}" for i in flagged] if kind == "class_label" else None
        text = build_feedback_prompt(kind, previous, flagged, sugg)
        assert not has_residual_placeholders(text)
        assert prompt_region_ids(text) == flagged
