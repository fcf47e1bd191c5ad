import json

import pytest

from trace_diag.audit import (
    ACTIVATION_FAILURES,
    LABELS,
    STRUCTURAL_FIELDS,
    ActivationVerdict,
    StructuralVerdict,
    audit_directory,
    compute_rates,
    derive_failure_label,
    parse_activation,
    parse_prompt_metadata,
    parse_structural,
    parse_verdicts,
    render_stage1_prompt,
    render_stage2_prompt,
    replay_verdicts,
    write_prompts,
)
from trace_diag.compose import derive_relation_pair
from trace_diag.errors import ConfigError, VerdictParseError

from verdict_space import d3_oracle, enumerate_verdicts, count_labels, AUDIT_COUNTS, AUDIT_RATES


def test_label_machine_exhaustive():
    n = 0
    for a, s in enumerate_verdicts():
        assert derive_failure_label(a, s) == d3_oracle(a, s), (a, s)
        n += 1
    assert n >= 2000


@pytest.mark.parametrize("a,s,label", [
    (ActivationVerdict(False, "no_visible_change"), None, "no_visible_change"),
    (ActivationVerdict(False, None), None, "under_edit"),
    (ActivationVerdict(True, None), StructuralVerdict(slot_correct=False), "wrong_slot"),
    (ActivationVerdict(True, None), StructuralVerdict(**dict.fromkeys(STRUCTURAL_FIELDS, True)), "pass"),
    (ActivationVerdict(True, None), StructuralVerdict(slot_correct=True), "undetermined"),
    (ActivationVerdict(True, None), StructuralVerdict(**dict.fromkeys(STRUCTURAL_FIELDS, True), under_edit=True),
     "under_edit"),
    (ActivationVerdict(None, None), StructuralVerdict(**dict.fromkeys(STRUCTURAL_FIELDS, True)), "undetermined"),
    (ActivationVerdict(True, None), None, "undetermined"),
])
def test_label_examples(a, s, label):
    assert derive_failure_label(a, s) == label


@pytest.mark.parametrize("model", sorted(AUDIT_COUNTS))
def test_reference_rates(model):
    rep = compute_rates(count_labels(model))
    pass_pct, struct_pct, under_pct = AUDIT_RATES[model]
    assert rep.n_eval == sum(AUDIT_COUNTS[model].values())
    assert abs(100 * rep.pass_rate - pass_pct) <= 0.05
    assert abs(100 * rep.struct_err - struct_pct) <= 0.05
    assert abs(100 * rep.under_edit - under_pct) <= 0.05
    d = rep.to_dict()["display"]
    assert d == {"pass_rate": f"{pass_pct:.1f}%", "struct_err": f"{struct_pct:.1f}%", "under_edit": f"{under_pct:.1f}%"}


def test_under_family_and_partition():
    labels = ["no_visible_change", "partial_or_non_target_change", "object_missing_or_unreadable", "under_edit",
              "pass", "undetermined"]
    rep = compute_rates(labels)
    assert rep.n_under == 4 and rep.n_eval == 6
    assert sum(rep.counts.values()) == rep.n_eval
    assert rep.to_dict()["counts"]["under"] == 4


def test_all_pass_and_empty():
    rep = compute_rates(["pass"] * 5)
    assert (rep.pass_rate, rep.struct_err, rep.under_edit) == (1.0, 0.0, 0.0)
    with pytest.raises(ConfigError):
        compute_rates([])


def test_parse_valid_stage1():
    a = parse_activation(json.dumps({"edit_activation_sufficient": True, "activation_failure_type": None,
                                     "confidence": "high", "reason_brief": "clear"}))
    assert a.edit_activation_sufficient is True and a.activation_failure_type is None and not a.warnings


def test_unknown_enum_becomes_null_with_warning():
    s = parse_structural(json.dumps({"slot_correct": "maybe", "target_correct": "true", "confidence": "sure"}))
    assert s.slot_correct is None and s.target_correct is True
    assert s.confidence is None
    assert len(s.warnings) == 2
    a = parse_activation(json.dumps({"edit_activation_sufficient": False, "activation_failure_type": "blurry"}))
    assert a.activation_failure_type is None and a.warnings


def test_truncated_json_excluded():
    with pytest.raises(VerdictParseError):
        parse_verdicts('{"edit_activation_sufficient": tr', None)
    with pytest.raises(VerdictParseError):
        parse_verdicts('{"edit_activation_sufficient": true}', "[1, 2")


def test_inconsistency_flags():
    assert ActivationVerdict(True, "no_visible_change").inconsistent
    assert StructuralVerdict(targeted_edit_sufficient=False, target_correct=True).inconsistent
    assert not StructuralVerdict(targeted_edit_sufficient=True, target_correct=False).inconsistent


def test_worked_stage2_prompt(worked_scene):
    fwd, _ = derive_relation_pair(worked_scene)
    text = render_stage2_prompt(fwd)
    assert "edited_side: top-left" in text
    assert "target_value: plastic" in text
    assert text == render_stage2_prompt(fwd)
    assert render_stage1_prompt(fwd).startswith("You will see two videos in the following fixed order:")


def test_prompt_metadata_roundtrip(worked_scene):
    for ex in derive_relation_pair(worked_scene):
        meta = parse_prompt_metadata(render_stage1_prompt(ex))
        assert meta["instruction"] == ex.instruction
        assert meta["edited_side"] == {"tl": "top-left", "br": "bottom-right"}[ex.edited_slot]
        assert meta["edited_object_name"] == ex.edited_object_name
        assert meta["reference_object_name"] == ex.reference_object_name
        assert meta["source_value"] == ex.source_value
        assert meta["target_value"] == ex.target_value
        assert meta["attribute_type"] == ex.attribute_type


def test_empty_instruction_named(worked_scene):
    import dataclasses
    fwd, _ = derive_relation_pair(worked_scene)
    with pytest.raises(ConfigError, match="instruction"):
        render_stage1_prompt(dataclasses.replace(fwd, instruction=""))


def test_write_prompts(tmp_path, worked_scene):
    n = write_prompts(derive_relation_pair(worked_scene), tmp_path)
    assert n == 2
    assert sorted(p.name for p in tmp_path.iterdir()) == [
        "worked-forward.stage1.txt", "worked-forward.stage2.txt", "worked-inverted.stage1.txt", "worked-inverted.stage2.txt"]


@pytest.mark.parametrize("label", LABELS)
def test_replay_fixtures(label):
    s1, s2 = replay_verdicts(label)
    a, s = parse_verdicts(json.dumps(s1), None if s2 is None else json.dumps(s2))
    assert derive_failure_label(a, s) == label


def test_audit_directory(tmp_path):
    labels = ["pass", "pass", "wrong_slot", "no_visible_change", "undetermined"]
    for i, lab in enumerate(labels):
        s1, s2 = replay_verdicts(lab)
        (tmp_path / f"o{i}.stage1.json").write_text(json.dumps(s1))
        if s2 is not None:
            (tmp_path / f"o{i}.stage2.json").write_text(json.dumps(s2))
    (tmp_path / "bad.stage1.json").write_text("{oops")
    rep = audit_directory(tmp_path)
    assert rep.n_eval == 5
    assert rep.n_pass == 2 and rep.n_slot == 1 and rep.n_under == 1 and rep.n_undet == 1
    assert [e["example_id"] for e in rep.excluded] == ["bad"]


def test_activation_failure_subtypes_are_labels():
    assert set(ACTIVATION_FAILURES) < set(LABELS)
