import pytest

from dxagent.aliases import DEFAULT_ALIASES
from dxagent.protocol import (
    ALL_TOOLS,
    ActionKind,
    AgentStep,
    ConsolidationParseError,
    DCP_LABELS,
    InvalidActionError,
    StepKind,
    TOOL_EXPERIENCE,
    TOOL_IMAGING,
    TOOL_LAB_TESTS,
    TOOL_PHYSICAL_EXAM,
    TrajectoryEntry,
    diagnosis_key,
    parse_agent_step,
    parse_dcp_text,
    parse_imaging_input,
    parse_trajectory_text,
    render_scratchpad,
    render_trajectory_text,
    validate_action,
    workup_event,
)


def test_tool_names_pinned():
    assert ALL_TOOLS == (
        "Physical Examination",
        "Laboratory Tests",
        "Imaging",
        "Experience Search",
        "Guideline Search",
        "PubMed Search",
    )


def test_parse_format_a():
    step = parse_agent_step(
        " Fever and RLQ pain suggest an inflammatory process.\n"
        "Action: Laboratory Tests\n"
        "Action Input: CBC, CRP\n"
        "Observation:"
    )
    assert step.kind is StepKind.ACTION
    assert step.thought == "Fever and RLQ pain suggest an inflammatory process."
    assert step.action == "Laboratory Tests"
    assert step.action_input == "CBC, CRP"


def test_parse_format_b():
    step = parse_agent_step(" Findings point one way.\nFinal Diagnosis: Acute appendicitis")
    assert step.kind is StepKind.FINAL
    assert step.final_diagnosis == "Acute appendicitis"


def test_parse_strips_echoed_observation_block():
    step = parse_agent_step(
        " t\nAction: Imaging\nAction Input: Abdomen CT\n"
        "Observation: I imagine the scan shows\nsomething I made up\n"
    )
    assert step.kind is StepKind.ACTION
    assert step.action_input == "Abdomen CT"
    # nothing after the echoed Observation label reaches any parsed field
    assert "made up" not in step.thought + step.action + step.action_input


def test_parse_strips_leading_thought_label():
    step = parse_agent_step("Thought: reasoning here\nFinal Diagnosis: X")
    assert step.thought == "reasoning here"


def test_parse_multiline_action_input():
    step = parse_agent_step(" t\nAction: PubMed Search\nAction Input: line one\nline two")
    assert step.action_input == "line one\nline two"


def test_parse_malformed_notes():
    step = parse_agent_step("just musing with no labels at all")
    assert step.kind is StepKind.MALFORMED
    assert step.problem == "missing Action label; missing Action Input label"

    step = parse_agent_step(" t\nAction: Imaging")
    assert step.kind is StepKind.MALFORMED
    assert step.parse_notes == ("missing Action Input label",)

    step = parse_agent_step(" t\nFinal Diagnosis:")
    assert step.kind is StepKind.MALFORMED
    assert step.parse_notes == ("empty Final Diagnosis value",)


def test_parse_final_wins_over_partial_action():
    step = parse_agent_step(" t\nAction: Imaging\nFinal Diagnosis: Acute cholecystitis")
    assert step.kind is StepKind.FINAL


def test_validate_physical_exam_ignores_input():
    step = AgentStep(kind=StepKind.ACTION, action=TOOL_PHYSICAL_EXAM, action_input="whatever")
    action = validate_action(step)
    assert action.kind is ActionKind.PHYSICAL_EXAM
    assert workup_event(action).kind == "pe"


def test_validate_lab_names_split():
    step = AgentStep(
        kind=StepKind.ACTION, action=TOOL_LAB_TESTS, action_input=" CBC , CRP,, Lipase "
    )
    action = validate_action(step)
    assert action.lab_names == ("CBC", "CRP", "Lipase")
    assert workup_event(action).lab_names == ("CBC", "CRP", "Lipase")


def test_validate_lab_empty_fails():
    step = AgentStep(kind=StepKind.ACTION, action=TOOL_LAB_TESTS, action_input=" , ")
    with pytest.raises(InvalidActionError, match="names no tests"):
        validate_action(step)


@pytest.mark.parametrize(
    "action_input,modality,region",
    [
        ("Abdomen CT", "CT", "Abdomen"),
        ("modality=CT, region=Abdomen", "CT", "Abdomen"),
        ("modality=ultrasound, region=Right Upper Quadrant", "Ultrasound", "Right Upper Quadrant"),
        ("Right Upper Quadrant Ultrasound", "Ultrasound", "Right Upper Quadrant"),
        ("abdomen ct scan", "CT", "abdomen"),
    ],
)
def test_validate_imaging_forms(action_input, modality, region):
    step = AgentStep(kind=StepKind.ACTION, action=TOOL_IMAGING, action_input=action_input)
    action = validate_action(step)
    assert action.modality == modality
    assert action.region == region
    event = workup_event(action)
    assert (event.modality, event.region) == (modality, region)


@pytest.mark.parametrize(
    "bad", ["CT", "spectral imaging of abdomen", "modality=CT", "region=Abdomen", ""]
)
def test_validate_imaging_errors_name_the_contract(bad):
    step = AgentStep(kind=StepKind.ACTION, action=TOOL_IMAGING, action_input=bad)
    with pytest.raises(InvalidActionError, match="region and modality required"):
        validate_action(step)


def test_parse_imaging_input_direct():
    assert parse_imaging_input("Abdomen MRCP", DEFAULT_ALIASES) == ("MRCP", "Abdomen")
    # both fields present, so the failure names the unknown modality
    # rather than the generic contract
    with pytest.raises(InvalidActionError, match="unrecognized imaging modality: 'hologram'"):
        parse_imaging_input("modality=hologram, region=Abdomen", DEFAULT_ALIASES)
    with pytest.raises(InvalidActionError, match="region and modality required"):
        parse_imaging_input("modality=hologram", DEFAULT_ALIASES)


def test_validate_unknown_and_disabled_tools():
    step = AgentStep(kind=StepKind.ACTION, action="Biopsy", action_input="liver")
    with pytest.raises(InvalidActionError, match="unknown tool: 'Biopsy'"):
        validate_action(step)
    step = AgentStep(kind=StepKind.ACTION, action=TOOL_EXPERIENCE, action_input="q")
    with pytest.raises(InvalidActionError, match="tool disabled: Experience Search"):
        validate_action(step, enabled_tools=(TOOL_PHYSICAL_EXAM,))


def test_validate_search_requires_query():
    step = AgentStep(kind=StepKind.ACTION, action=TOOL_EXPERIENCE, action_input="  ")
    with pytest.raises(InvalidActionError, match="non-empty query"):
        validate_action(step)
    step = AgentStep(kind=StepKind.ACTION, action="PubMed Search", action_input="appendix ct")
    assert validate_action(step).query == "appendix ct"


def test_render_scratchpad_layout():
    assert render_scratchpad([]) == ""
    entries = [
        TrajectoryEntry(
            thought="t1", action="Physical Examination", action_input="", observation="obs1"
        )
    ]
    assert render_scratchpad(entries) == (
        " t1\nAction: Physical Examination\nAction Input: \nObservation: obs1\nThought:"
    )
    malformed = [TrajectoryEntry(malformed_text="garbled", observation="fix it")]
    assert render_scratchpad(malformed) == " garbled\nObservation: fix it\nThought:"


def test_trajectory_text_round_trip():
    entries = [
        TrajectoryEntry(
            thought="start with exam",
            action="Physical Examination",
            action_input="none",
            observation="Temp 38.1 C.\nGuarding present.",
        ),
        TrajectoryEntry(
            thought="check labs",
            action="Laboratory Tests",
            action_input="CBC, CRP",
            observation="WBC: 14.2\nCRP: 48",
        ),
        TrajectoryEntry(thought="enough evidence", final_diagnosis="Acute appendicitis"),
    ]
    text = render_trajectory_text(entries)
    parsed = parse_trajectory_text(text)
    assert parsed == entries
    assert render_trajectory_text(parsed) == text


def test_trajectory_text_malformed_rendering():
    entries = [TrajectoryEntry(malformed_text="word salad", observation="reminder text")]
    text = render_trajectory_text(entries)
    assert text == "Thought: word salad\nObservation: reminder text"
    # malformed entries re-parse as plain thought+observation entries
    parsed = parse_trajectory_text(text)
    assert parsed[0].thought == "word salad"
    assert parsed[0].observation == "reminder text"


def test_parse_dcp_text_basic():
    pattern, ordering, decision = parse_dcp_text(
        "Experience Pattern: young adult RLQ pain with fever\n"
        "Test Ordering Experience: Physical Examination first, then Laboratory Tests: CBC, CRP\n"
        "Diagnostic Decision Experience: high WBC plus focal tenderness favors surgical abdomen"
    )
    assert pattern.startswith("young adult")
    assert "CBC" in ordering
    assert decision.endswith("surgical abdomen")


def test_parse_dcp_text_multiline_and_indent():
    pattern, ordering, decision = parse_dcp_text(
        "preamble chatter\n"
        "  Experience Pattern: line a\nline b\n"
        "Test Ordering Experience: o\n"
        "Diagnostic Decision Experience: d\ntail"
    )
    assert pattern == "line a\nline b"
    assert decision == "d\ntail"


def test_parse_dcp_text_errors_name_section():
    with pytest.raises(ConsolidationParseError) as exc:
        parse_dcp_text("Experience Pattern: p\nTest Ordering Experience: o")
    assert exc.value.section == "Diagnostic Decision Experience"
    with pytest.raises(ConsolidationParseError) as exc:
        parse_dcp_text(
            "Experience Pattern:\n"
            "Test Ordering Experience: o\n"
            "Diagnostic Decision Experience: d"
        )
    assert exc.value.section == "Experience Pattern"
    assert DCP_LABELS[0] == "Experience Pattern:"


def test_diagnosis_key_folding():
    assert diagnosis_key("Acute Appendicitis!") == " acute appendicitis "
    assert diagnosis_key("  ") == ""
    assert diagnosis_key("peri-appendiceal") == " peri appendiceal "
    # word-boundary padding stops substring false positives
    assert diagnosis_key("appendicitis") not in diagnosis_key("pseudoappendicitis")
