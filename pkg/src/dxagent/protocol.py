"""Step grammar for the diagnostic loop.

Completions follow a thought/action protocol. The prompt ends with
"Thought:", so a completion begins with unlabeled thought text and then
takes one of two shapes:

  Format A (gather evidence)      Format B (commit)
    <thought>                       <thought>
    Action: <tool name>             Final Diagnosis: <diagnosis>
    Action Input: <input>

Anything else is malformed. Validation of the action (tool name, input
shape) is a separate pass so the loop can distinguish "unparseable" from
"parseable but invalid" when deciding on a repair.
"""

from __future__ import annotations

import enum
import string
from dataclasses import dataclass, field

from .aliases import AliasTable, DEFAULT_ALIASES

TOOL_PHYSICAL_EXAM = "Physical Examination"
TOOL_LAB_TESTS = "Laboratory Tests"
TOOL_IMAGING = "Imaging"
TOOL_EXPERIENCE = "Experience Search"
TOOL_GUIDELINE = "Guideline Search"
TOOL_PUBMED = "PubMed Search"

ALL_TOOLS = (
    TOOL_PHYSICAL_EXAM,
    TOOL_LAB_TESTS,
    TOOL_IMAGING,
    TOOL_EXPERIENCE,
    TOOL_GUIDELINE,
    TOOL_PUBMED,
)

LABEL_THOUGHT = "Thought:"
LABEL_ACTION = "Action:"
LABEL_ACTION_INPUT = "Action Input:"
LABEL_OBSERVATION = "Observation:"
LABEL_FINAL = "Final Diagnosis:"

# longest first so "Action Input:" is never read as "Action:" plus text
_STEP_LABELS = (LABEL_ACTION_INPUT, LABEL_FINAL, LABEL_ACTION)


class StepKind(enum.Enum):
    ACTION = "action"
    FINAL = "final"
    MALFORMED = "malformed"


class ActionKind(enum.Enum):
    PHYSICAL_EXAM = "physical_exam"
    LAB_TESTS = "lab_tests"
    IMAGING = "imaging"
    EXPERIENCE_SEARCH = "experience_search"
    GUIDELINE_SEARCH = "guideline_search"
    PUBMED_SEARCH = "pubmed_search"


_TOOL_TO_KIND = {
    TOOL_PHYSICAL_EXAM: ActionKind.PHYSICAL_EXAM,
    TOOL_LAB_TESTS: ActionKind.LAB_TESTS,
    TOOL_IMAGING: ActionKind.IMAGING,
    TOOL_EXPERIENCE: ActionKind.EXPERIENCE_SEARCH,
    TOOL_GUIDELINE: ActionKind.GUIDELINE_SEARCH,
    TOOL_PUBMED: ActionKind.PUBMED_SEARCH,
}


@dataclass(frozen=True)
class AgentStep:
    kind: StepKind
    thought: str = ""
    action: str = ""
    action_input: str = ""
    final_diagnosis: str = ""
    raw_text: str = ""
    parse_notes: tuple[str, ...] = ()

    @property
    def problem(self) -> str:
        return "; ".join(self.parse_notes)


@dataclass(frozen=True)
class ValidatedAction:
    kind: ActionKind
    tool: str
    lab_names: tuple[str, ...] = ()
    modality: str = ""
    region: str = ""
    query: str = ""


@dataclass(frozen=True)
class WorkupEvent:
    """One evidence request, reduced to the form the process metrics read."""

    kind: str  # "pe" | "lab" | "imaging"
    lab_names: tuple[str, ...] = ()
    modality: str = ""
    region: str = ""


class InvalidActionError(ValueError):
    pass


class ConsolidationParseError(ValueError):
    def __init__(self, section: str):
        self.section = section
        super().__init__(f"missing or empty section: {section}")


def _strip_trailing_observation(text: str) -> str:
    """Drop an echoed trailing Observation block.

    Stop sequences keep backends from generating one, but scripted or
    recorded completions may carry it; everything from a line-initial
    "Observation:" onward is the engine's to produce, never the model's.
    """
    lines = text.split("\n")
    for i, line in enumerate(lines):
        if line.lstrip().startswith(LABEL_OBSERVATION):
            return "\n".join(lines[:i])
    return text


def parse_agent_step(text: str) -> AgentStep:
    raw = text
    text = _strip_trailing_observation(text)
    thought_lines: list[str] = []
    action: str | None = None
    action_input: str | None = None
    final: str | None = None
    current: str | None = None  # which multiline field is open
    current_lines: list[str] = []

    def close() -> None:
        nonlocal action, action_input, final
        value = "\n".join(current_lines).strip()
        if current == "action":
            action = value
        elif current == "input":
            action_input = value
        elif current == "final":
            final = value

    for line in text.split("\n"):
        stripped = line.lstrip()
        matched = None
        for label in _STEP_LABELS:
            if stripped.startswith(label):
                matched = label
                break
        if matched is None:
            if current is None:
                thought_lines.append(line)
            else:
                current_lines.append(line)
            continue
        close()
        current_lines = [stripped[len(matched):]]
        current = {LABEL_ACTION: "action", LABEL_ACTION_INPUT: "input", LABEL_FINAL: "final"}[
            matched
        ]
    close()

    thought = "\n".join(thought_lines).strip()
    if thought.startswith(LABEL_THOUGHT):
        thought = thought[len(LABEL_THOUGHT):].strip()

    if final is not None:
        if not final:
            return AgentStep(
                kind=StepKind.MALFORMED,
                thought=thought,
                raw_text=raw,
                parse_notes=("empty Final Diagnosis value",),
            )
        return AgentStep(kind=StepKind.FINAL, thought=thought, final_diagnosis=final, raw_text=raw)
    if action is not None and action_input is not None:
        return AgentStep(
            kind=StepKind.ACTION,
            thought=thought,
            action=action,
            action_input=action_input,
            raw_text=raw,
        )
    notes: list[str] = []
    if action is None:
        notes.append("missing Action label")
    if action_input is None:
        notes.append("missing Action Input label")
    return AgentStep(
        kind=StepKind.MALFORMED, thought=thought, raw_text=raw, parse_notes=tuple(notes)
    )


def parse_imaging_input(action_input: str, aliases: AliasTable) -> tuple[str, str]:
    """Accept "<region> <modality>" or "modality=<m>, region=<r>" inputs."""
    text = action_input.strip()
    if "=" in text:
        fields: dict[str, str] = {}
        for part in text.split(","):
            if "=" not in part:
                continue
            key, _, value = part.partition("=")
            fields[key.strip().lower()] = value.strip()
        modality = fields.get("modality", "")
        region = fields.get("region", "")
        if modality and region:
            canonical = aliases.normalize_modality(modality)
            if canonical is None:
                raise InvalidActionError(f"unrecognized imaging modality: {modality!r}")
            return canonical, region
        raise InvalidActionError("region and modality required: give modality=<m>, region=<r>")
    split = aliases.split_region_modality(text)
    if split is None:
        raise InvalidActionError(
            f"region and modality required: could not read a modality from {action_input!r}; "
            "use '<REGION> <MODALITY>' such as 'Abdomen CT'"
        )
    region, modality = split
    if not region:
        raise InvalidActionError(
            "region and modality required: name a body region before the modality"
        )
    return modality, region


def validate_action(
    step: AgentStep,
    aliases: AliasTable | None = None,
    enabled_tools: tuple[str, ...] | None = None,
) -> ValidatedAction:
    """Check an ACTION step against the tool contract.

    enabled_tools restricts which names are recognized at all; a disabled
    tool is reported distinctly so the loop can answer with the
    availability notice instead of a repair.
    """
    if step.kind is not StepKind.ACTION:
        raise InvalidActionError(f"not an action step: {step.kind.value}")
    aliases = aliases or DEFAULT_ALIASES
    tool = step.action.strip()
    if tool not in _TOOL_TO_KIND:
        raise InvalidActionError(f"unknown tool: {step.action!r}")
    if enabled_tools is not None and tool not in enabled_tools:
        raise InvalidActionError(f"tool disabled: {tool}")
    kind = _TOOL_TO_KIND[tool]
    action_input = step.action_input.strip()
    if kind is ActionKind.PHYSICAL_EXAM:
        return ValidatedAction(kind=kind, tool=tool)
    if kind is ActionKind.LAB_TESTS:
        names = tuple(n.strip() for n in action_input.split(",") if n.strip())
        if not names:
            raise InvalidActionError("laboratory request names no tests")
        return ValidatedAction(kind=kind, tool=tool, lab_names=names)
    if kind is ActionKind.IMAGING:
        modality, region = parse_imaging_input(action_input, aliases)
        return ValidatedAction(kind=kind, tool=tool, modality=modality, region=region)
    if not action_input:
        raise InvalidActionError(f"{tool} requires a non-empty query")
    return ValidatedAction(kind=kind, tool=tool, query=action_input)


def workup_event(action: ValidatedAction) -> WorkupEvent | None:
    if action.kind is ActionKind.PHYSICAL_EXAM:
        return WorkupEvent(kind="pe")
    if action.kind is ActionKind.LAB_TESTS:
        return WorkupEvent(kind="lab", lab_names=action.lab_names)
    if action.kind is ActionKind.IMAGING:
        return WorkupEvent(kind="imaging", modality=action.modality, region=action.region)
    return None


@dataclass(frozen=True)
class TrajectoryEntry:
    thought: str = ""
    action: str = ""
    action_input: str = ""
    observation: str = ""
    final_diagnosis: str = ""
    malformed_text: str = ""

    @property
    def is_final(self) -> bool:
        return bool(self.final_diagnosis)

    @property
    def is_malformed(self) -> bool:
        return bool(self.malformed_text)


def render_scratchpad(entries: list[TrajectoryEntry]) -> str:
    """Build the text appended after the template's trailing "Thought:".

    Each completed step contributes its thought, action and observation
    and re-opens a "Thought:" cue for the next completion. Malformed
    completions are replayed verbatim with the corrective observation so
    the model sees what it wrote.
    """
    parts: list[str] = []
    for entry in entries:
        if entry.is_malformed:
            parts.append(
                f" {entry.malformed_text.strip()}\n"
                f"{LABEL_OBSERVATION} {entry.observation}\n{LABEL_THOUGHT}"
            )
            continue
        parts.append(
            f" {entry.thought}\n"
            f"{LABEL_ACTION} {entry.action}\n"
            f"{LABEL_ACTION_INPUT} {entry.action_input}\n"
            f"{LABEL_OBSERVATION} {entry.observation}\n{LABEL_THOUGHT}"
        )
    return "".join(parts)


def render_trajectory_text(entries: list[TrajectoryEntry]) -> str:
    """Serialize a finished trajectory as one readable transcript."""
    blocks: list[str] = []
    for entry in entries:
        if entry.is_malformed:
            blocks.append(
                f"{LABEL_THOUGHT} {entry.malformed_text.strip()}\n"
                f"{LABEL_OBSERVATION} {entry.observation}"
            )
        elif entry.is_final:
            blocks.append(
                f"{LABEL_THOUGHT} {entry.thought}\n{LABEL_FINAL} {entry.final_diagnosis}"
            )
        else:
            blocks.append(
                f"{LABEL_THOUGHT} {entry.thought}\n"
                f"{LABEL_ACTION} {entry.action}\n"
                f"{LABEL_ACTION_INPUT} {entry.action_input}\n"
                f"{LABEL_OBSERVATION} {entry.observation}"
            )
    return "\n".join(blocks)


def parse_trajectory_text(text: str) -> list[TrajectoryEntry]:
    """Invert render_trajectory_text.

    Rendering then parsing is a fixed point for entries whose fields do
    not themselves start lines with protocol labels. Observations may
    span lines; a line-initial "Thought:" or end of text closes them.
    """
    entries: list[TrajectoryEntry] = []
    labels = (LABEL_ACTION_INPUT, LABEL_OBSERVATION, LABEL_FINAL, LABEL_ACTION, LABEL_THOUGHT)
    fields: dict[str, list[str]] = {}
    current: str | None = None

    def flush() -> None:
        if not fields:
            return
        get = lambda key: "\n".join(fields.get(key, [])).strip()
        entries.append(
            TrajectoryEntry(
                thought=get(LABEL_THOUGHT),
                action=get(LABEL_ACTION),
                action_input=get(LABEL_ACTION_INPUT),
                observation=get(LABEL_OBSERVATION),
                final_diagnosis=get(LABEL_FINAL),
            )
        )
        fields.clear()

    for line in text.split("\n"):
        matched = None
        for label in labels:
            if line.startswith(label):
                matched = label
                break
        if matched is None:
            if current is not None:
                fields.setdefault(current, []).append(line)
            continue
        if matched == LABEL_THOUGHT:
            flush()
        current = matched
        fields.setdefault(current, []).append(line[len(matched):].lstrip(" "))
    flush()
    return entries


DCP_LABELS = (
    "Experience Pattern:",
    "Test Ordering Experience:",
    "Diagnostic Decision Experience:",
)


def parse_dcp_text(text: str) -> tuple[str, str, str]:
    """Split consolidation output into its three labeled fields.

    All three sections must be present and non-empty; the first missing
    one is named in the error so a retry prompt can point at it.
    """
    positions: list[tuple[int, int, str]] = []
    for label in DCP_LABELS:
        best = None
        offset = 0
        for line in text.split("\n"):
            if line.lstrip().startswith(label):
                best = offset + len(line) - len(line.lstrip())
                break
            offset += len(line) + 1
        if best is None:
            raise ConsolidationParseError(label.rstrip(":"))
        positions.append((best, best + len(label), label))
    positions.sort()
    values: dict[str, str] = {}
    for i, (start, after, label) in enumerate(positions):
        end = positions[i + 1][0] if i + 1 < len(positions) else len(text)
        values[label] = text[after:end].strip()
    for label in DCP_LABELS:
        if not values[label]:
            raise ConsolidationParseError(label.rstrip(":"))
    return tuple(values[label] for label in DCP_LABELS)  # type: ignore[return-value]


_PUNCT_TABLE = str.maketrans({c: " " for c in string.punctuation})


def diagnosis_key(text: str) -> str:
    """Fold a diagnosis string for containment matching.

    Lowercased, punctuation replaced by spaces, whitespace collapsed, and
    padded so substring checks align on word boundaries.
    """
    folded = " ".join(text.lower().translate(_PUNCT_TABLE).split())
    return f" {folded} " if folded else ""
