import pytest

from dxagent.canon import CanonMap
from dxagent.errors import ConfigurationError
from dxagent.feedback import (
    FINDING_CODES,
    NO_ISSUES,
    RulePack,
    default_rule_packs,
    evaluate_process,
    load_rule_pack,
    load_rule_packs,
    rule_pack_from_mapping,
)
from dxagent.protocol import WorkupEvent
from dxagent.runner import EpisodeResult, EpisodeStatus

TEMPLATES = {
    "pe_missing": "PE was skipped.",
    "pe_not_first": "PE should come first.",
    "labs_missing": "No labs ordered; cover {primary_labs}.",
    "labs_primary_missing": "Primary labs not covered: {missing_primary}.",
    "imaging_missing": "No imaging ordered; prefer {preferred_imaging}.",
    "imaging_first_choice": "First study was {first_imaging}; prefer {preferred_imaging}.",
    "efficiency": "Used {steps_used} steps against a median of {median_steps}.",
}


def make_pack(**overrides):
    fields = dict(
        pathology="appendicitis",
        synonyms=("appendicitis",),
        primary_labs=frozenset({"cbc", "crp"}),
        secondary_labs=frozenset({"cmp"}),
        preferred_imaging=frozenset({("CT", "Abdomen")}),
        acceptable_imaging=frozenset({("Ultrasound", "Abdomen")}),
        feedback_templates=dict(TEMPLATES),
    )
    fields.update(overrides)
    return RulePack(**fields)


def result_with(trace, steps_used=4):
    return EpisodeResult(
        encounter_id="enc-001",
        pathology="appendicitis",
        status=EpisodeStatus.DIAGNOSED,
        final_diagnosis="Acute appendicitis",
        correct=True,
        steps_used=steps_used,
        workup_trace=list(trace),
    )


FULL_TRACE = [
    WorkupEvent(kind="pe"),
    WorkupEvent(kind="lab", lab_names=("CBC", "CRP")),
    WorkupEvent(kind="imaging", modality="CT", region="Abdomen"),
]


def test_pack_validation():
    make_pack()
    with pytest.raises(ConfigurationError, match="pathology tag"):
        make_pack(pathology="  ")
    with pytest.raises(ConfigurationError, match="no diagnosis synonyms"):
        make_pack(synonyms=())
    with pytest.raises(ConfigurationError, match="primary and secondary labs overlap"):
        make_pack(secondary_labs=frozenset({"cbc"}))
    with pytest.raises(ConfigurationError, match="preferred and acceptable imaging overlap"):
        make_pack(acceptable_imaging=frozenset({("CT", "Abdomen")}))
    with pytest.raises(ConfigurationError, match="lacks feedback templates: efficiency"):
        make_pack(
            feedback_templates={k: v for k, v in TEMPLATES.items() if k != "efficiency"}
        )


def test_default_rule_packs(packs):
    assert set(packs) == {"appendicitis", "cholecystitis", "pancreatitis", "diverticulitis"}
    appy = packs["appendicitis"]
    assert appy.primary_labs == frozenset({"cbc", "crp"})
    assert ("CT", "Abdomen") in appy.preferred_imaging
    assert "appendicitis" in appy.synonyms
    pancj = packs["pancreatitis"]
    assert pancj.primary_labs == frozenset({"lipase"})
    assert pancj.secondary_labs == frozenset({"amylase", "cbc", "cmp", "lft"})
    for pack in packs.values():
        assert set(FINDING_CODES) <= set(pack.feedback_templates)


def test_rule_pack_from_mapping_requires_templates_table():
    with pytest.raises(ConfigurationError, match="needs a \\[feedback_templates\\] table"):
        rule_pack_from_mapping({"pathology": "x", "synonyms": ["x"]})
    with pytest.raises(ConfigurationError, match="entries need modality and region"):
        rule_pack_from_mapping(
            {
                "pathology": "x",
                "synonyms": ["x"],
                "preferred_imaging": [{"modality": "CT"}],
                "feedback_templates": dict(TEMPLATES),
            }
        )


def test_load_rule_packs_from_directory(tmp_path):
    body = """
pathology = "appendicitis"
synonyms = ["appendicitis"]
primary_labs = ["CBC"]

[[preferred_imaging]]
modality = "CT"
region = "Abdomen"

[feedback_templates]
pe_missing = "a"
pe_not_first = "b"
labs_missing = "c"
labs_primary_missing = "d"
imaging_missing = "e"
imaging_first_choice = "f"
efficiency = "g"
"""
    (tmp_path / "appendicitis.toml").write_text(body, encoding="utf-8")
    pack = load_rule_pack(tmp_path / "appendicitis.toml")
    assert pack.pathology == "appendicitis"
    assert pack.primary_labs == frozenset({"cbc"})
    assert pack.preferred_imaging == frozenset({("CT", "Abdomen")})
    packs = load_rule_packs(tmp_path)
    assert set(packs) == {"appendicitis"}
    (tmp_path / "dup.toml").write_text(body, encoding="utf-8")
    with pytest.raises(ConfigurationError, match="duplicate rule pack"):
        load_rule_packs(tmp_path)


def test_clean_workup_yields_no_issues(record):
    pack = make_pack()
    assert evaluate_process(result_with(FULL_TRACE), record, pack) == NO_ISSUES


def test_pack_record_mismatch(record):
    pack = make_pack(pathology="cholecystitis")
    with pytest.raises(
        ConfigurationError, match="rule pack is for 'cholecystitis' but record is 'appendicitis'"
    ):
        evaluate_process(result_with(FULL_TRACE), record, pack)


def test_pe_findings(record):
    pack = make_pack()
    no_pe = [e for e in FULL_TRACE if e.kind != "pe"]
    assert "PE was skipped." in evaluate_process(result_with(no_pe), record, pack)
    late_pe = [FULL_TRACE[1], FULL_TRACE[0], FULL_TRACE[2]]
    assert "PE should come first." in evaluate_process(result_with(late_pe), record, pack)


def test_lab_findings(record):
    pack = make_pack()
    no_labs = [FULL_TRACE[0], FULL_TRACE[2]]
    assert "No labs ordered; cover cbc, crp." in evaluate_process(
        result_with(no_labs), record, pack
    )
    partial = [
        FULL_TRACE[0],
        WorkupEvent(kind="lab", lab_names=("CBC",)),
        FULL_TRACE[2],
    ]
    out = evaluate_process(result_with(partial), record, pack)
    assert "Primary labs not covered: crp." in out


def test_lab_findings_respect_canon(record):
    pack = make_pack()
    canon = CanonMap({"white cell count": "cbc", "c-reactive protein": "crp"}, version="t")
    trace = [
        FULL_TRACE[0],
        WorkupEvent(kind="lab", lab_names=("White Cell Count", "C-Reactive Protein")),
        FULL_TRACE[2],
    ]
    assert evaluate_process(result_with(trace), record, pack, canon_map=canon) == NO_ISSUES


def test_imaging_findings(record):
    pack = make_pack()
    no_imaging = FULL_TRACE[:2]
    assert "No imaging ordered; prefer modality=CT, region=Abdomen." in evaluate_process(
        result_with(no_imaging), record, pack
    )
    xray_first = FULL_TRACE[:2] + [
        WorkupEvent(kind="imaging", modality="X-ray", region="Chest"),
        FULL_TRACE[2],
    ]
    out = evaluate_process(result_with(xray_first), record, pack)
    assert "First study was modality=X-ray, region=Chest" in out
    # acceptable imaging first is not flagged, alias spellings included
    us_first = FULL_TRACE[:2] + [
        WorkupEvent(kind="imaging", modality="ultrasound", region="abdominal")
    ]
    assert evaluate_process(result_with(us_first), record, pack) == NO_ISSUES


def test_efficiency_finding(record):
    pack = make_pack()
    out = evaluate_process(
        result_with(FULL_TRACE, steps_used=9), record, pack, cohort_median_steps=4.0
    )
    assert out == "Used 9 steps against a median of 4."
    fractional = evaluate_process(
        result_with(FULL_TRACE, steps_used=9), record, pack, cohort_median_steps=4.5
    )
    assert "median of 4.5" in fractional
    at_median = evaluate_process(
        result_with(FULL_TRACE, steps_used=4), record, pack, cohort_median_steps=4.0
    )
    assert at_median == NO_ISSUES
    without_median = evaluate_process(result_with(FULL_TRACE, steps_used=99), record, pack)
    assert without_median == NO_ISSUES


def test_findings_stack_one_per_line(record):
    pack = make_pack()
    out = evaluate_process(result_with([]), record, pack)
    assert out.splitlines() == [
        "PE was skipped.",
        "No labs ordered; cover cbc, crp.",
        "No imaging ordered; prefer modality=CT, region=Abdomen.",
    ]


def test_unknown_template_slot_is_a_config_error(record):
    pack = make_pack(
        feedback_templates={**TEMPLATES, "pe_missing": "bad slot {surprise}"}
    )
    with pytest.raises(ConfigurationError, match="uses unknown slot"):
        evaluate_process(result_with([]), record, pack)
