"""Episode orchestration.

One interactive episode is a loop of render, generate, parse, validate,
dispatch, observe. The loop owns protocol enforcement (one repair
regeneration per step slot), tool availability, the experience-search
cap, context compaction, and termination. The single-pass
full-information regime reuses the same result type so evaluation code
never branches on regime.

Status semantics: Diagnosed iff a final diagnosis was emitted; any other
status scores as incorrect.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

from .aliases import AliasTable, DEFAULT_ALIASES
from .canon import CanonMap
from .dcpstore import DcpView, RetrievalEvent, render_experience_observation
from .errors import ConfigurationError
from .feedback import RulePack
from .gateway import Gateway, GatewayError, GenerationParams
from .guidelines import (
    DEFAULT_EXCERPT_CHARS,
    DEFAULT_GUIDELINE_K,
    GuidelineIndex,
    search_guidelines,
)
from .prompts import (
    ModelProfile,
    render_compaction_prompt,
    render_diagnostic_prompt,
    render_full_information_prompt,
)
from .protocol import (
    ActionKind,
    AgentStep,
    ALL_TOOLS,
    InvalidActionError,
    StepKind,
    TrajectoryEntry,
    ValidatedAction,
    WorkupEvent,
    diagnosis_key,
    parse_agent_step,
    render_scratchpad,
    validate_action,
)
from .pubmed import DEFAULT_MAX_RESULTS, PubMedClient, search_pubmed
from .records import EncounterRecord, full_record_view
from .session import begin_encounter

UNAVAILABLE_TOOL = "This tool is not available in this configuration."
EXPERIENCE_CAP_REACHED = "Experience search limit reached."

_FORMAT_REMINDER = (
    "Reply using exactly FORMAT A (Thought, then 'Action:' with one of: "
    + ", ".join(ALL_TOOLS)
    + ", then 'Action Input:') or FORMAT B (Thought, then 'Final Diagnosis:')."
)

FI_REPAIR_NOTE = (
    "REMINDER: No further information can be requested. Answer using FORMAT B only: "
    "a Thought line, then 'Final Diagnosis: <diagnosis>'."
)

COMPACTION_MIN_CHARS = 200
_TRUNCATE_HEAD = 400
_TRUNCATE_TAIL = 200
_TRUNCATE_MARK = "\n[...observation truncated...]\n"

COMPLIANCE_KEYS = (
    "physical_exam",
    "labs",
    "imaging",
    "experience_search",
    "guideline_search",
)


class EpisodeStatus(str, enum.Enum):
    DIAGNOSED = "Diagnosed"
    STEP_CAP = "StepCapReached"
    BACKEND_FAILURE = "BackendFailure"
    NO_VALID_DIAGNOSIS = "NoValidDiagnosis"


@dataclass(frozen=True)
class DiagnosisMatcher:
    """Synonym containment matcher for free-text diagnoses.

    Matching is case-insensitive with punctuation folded to spaces, on
    word boundaries. Negation is not modeled: "ruled out X" matches X.
    """

    synonyms_by_pathology: Mapping[str, tuple[str, ...]]

    @classmethod
    def from_packs(cls, packs: Mapping[str, RulePack]) -> "DiagnosisMatcher":
        return cls({name: tuple(pack.synonyms) for name, pack in packs.items()})

    def synonyms_for(self, pathology: str) -> tuple[str, ...]:
        if pathology not in self.synonyms_by_pathology:
            raise ConfigurationError(f"no diagnosis synonyms configured for {pathology!r}")
        return self.synonyms_by_pathology[pathology]

    def match(self, free_text: str, record: EncounterRecord) -> bool:
        key = diagnosis_key(free_text)
        if not key:
            return False
        # the label itself always counts alongside configured synonyms
        candidates = (record.ground_truth, *self.synonyms_for(record.pathology))
        return any(diagnosis_key(c) and diagnosis_key(c) in key for c in candidates)


def match_diagnosis(free_text: str, record: EncounterRecord, matcher: DiagnosisMatcher) -> bool:
    return matcher.match(free_text, record)


@dataclass(frozen=True)
class EpisodeConfig:
    max_steps: int = 20
    generation: GenerationParams = field(default_factory=GenerationParams)
    dcp_enabled: bool = True
    guidelines_enabled: bool = True
    pubmed_enabled: bool = True
    experience_search_cap: int = 2
    compaction_threshold_chars: int = 24000
    retrieval_k: int = 3
    similarity_floor: float = 0.2
    guideline_k: int = DEFAULT_GUIDELINE_K
    excerpt_chars: int = DEFAULT_EXCERPT_CHARS
    pubmed_max_results: int = DEFAULT_MAX_RESULTS
    profile: ModelProfile = field(default_factory=ModelProfile.plain)

    def __post_init__(self):
        if self.max_steps < 1:
            raise ConfigurationError("max_steps must be at least 1")
        if self.experience_search_cap < 1:
            raise ConfigurationError("experience_search_cap must be at least 1")
        if self.compaction_threshold_chars < 1:
            raise ConfigurationError("compaction_threshold_chars must be positive")
        if self.retrieval_k < 1 or self.guideline_k < 1:
            raise ConfigurationError("retrieval k values must be at least 1")


@dataclass
class EpisodeTools:
    matcher: DiagnosisMatcher
    dcp_view: DcpView | None = None
    guideline_index: GuidelineIndex | None = None
    pubmed: PubMedClient | None = None
    canon_map: CanonMap = field(default_factory=CanonMap.identity)
    aliases: AliasTable = field(default_factory=lambda: DEFAULT_ALIASES)


def _check_tools(config: EpisodeConfig, tools: EpisodeTools) -> None:
    if config.dcp_enabled and tools.dcp_view is None:
        raise ConfigurationError("dcp_enabled requires a DCP snapshot view")
    if config.guidelines_enabled and tools.guideline_index is None:
        raise ConfigurationError("guidelines_enabled requires a guideline index")
    if config.pubmed_enabled and tools.pubmed is None:
        raise ConfigurationError("pubmed_enabled requires a PubMed client")


@dataclass
class EpisodeResult:
    encounter_id: str
    pathology: str
    status: EpisodeStatus
    final_diagnosis: str
    correct: bool
    steps_used: int
    entries: list[TrajectoryEntry] = field(default_factory=list)
    retrieval_events: list[RetrievalEvent] = field(default_factory=list)
    workup_trace: list[WorkupEvent] = field(default_factory=list)
    compliance: dict[str, bool] = field(default_factory=dict)
    repairs: int = 0
    audit: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "encounter_id": self.encounter_id,
            "pathology": self.pathology,
            "status": self.status.value,
            "final_diagnosis": self.final_diagnosis,
            "correct": self.correct,
            "steps_used": self.steps_used,
            "repairs": self.repairs,
            "compliance": dict(self.compliance),
            "workup_trace": [
                {
                    "kind": e.kind,
                    "lab_names": list(e.lab_names),
                    "modality": e.modality,
                    "region": e.region,
                }
                for e in self.workup_trace
            ],
            "retrieval_events": [e.to_json() for e in self.retrieval_events],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EpisodeResult":
        return cls(
            encounter_id=str(obj["encounter_id"]),
            pathology=str(obj.get("pathology", "")),
            status=EpisodeStatus(obj["status"]),
            final_diagnosis=str(obj.get("final_diagnosis", "")),
            correct=bool(obj["correct"]),
            steps_used=int(obj["steps_used"]),
            repairs=int(obj.get("repairs", 0)),
            compliance={str(k): bool(v) for k, v in obj.get("compliance", {}).items()},
            workup_trace=[
                WorkupEvent(
                    kind=str(e["kind"]),
                    lab_names=tuple(str(n) for n in e.get("lab_names", [])),
                    modality=str(e.get("modality", "")),
                    region=str(e.get("region", "")),
                )
                for e in obj.get("workup_trace", [])
            ],
            retrieval_events=[
                RetrievalEvent.from_json(e) for e in obj.get("retrieval_events", [])
            ],
        )


def _digest16(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _head_tail(text: str) -> str:
    if len(text) <= _TRUNCATE_HEAD + _TRUNCATE_TAIL + len(_TRUNCATE_MARK):
        return text
    return text[:_TRUNCATE_HEAD] + _TRUNCATE_MARK + text[-_TRUNCATE_TAIL:]


def compact_context(
    entries: Sequence[TrajectoryEntry],
    config: EpisodeConfig,
    gateway: Gateway,
    audit: list | None = None,
    already_compacted: set[int] | None = None,
) -> list[TrajectoryEntry]:
    """Summarize old observations once the scratchpad outgrows the threshold.

    The two most recent entries are never touched, thought/action text is
    preserved verbatim, and a failed summary generation falls back to
    deterministic head+tail truncation. Every replacement is logged with
    before/after digests.
    """
    out = list(entries)
    if len(render_scratchpad(out)) <= config.compaction_threshold_chars:
        return out
    done = already_compacted if already_compacted is not None else set()
    for i in range(max(0, len(out) - 2)):
        if i in done:
            continue
        observation = out[i].observation
        if len(observation) < COMPACTION_MIN_CHARS:
            done.add(i)
            continue
        mode = "summary"
        try:
            summary = gateway.generate(
                render_compaction_prompt(observation, config.profile),
                config.generation,
                audit=audit,
            ).strip()
        except GatewayError:
            summary = ""
        if not summary or len(summary) >= len(observation):
            summary = _head_tail(observation)
            mode = "truncation"
        done.add(i)
        if len(summary) >= len(observation):
            continue
        if audit is not None:
            audit.append(
                {
                    "event": "compaction",
                    "entry_index": i,
                    "mode": mode,
                    "before_digest": _digest16(observation),
                    "after_digest": _digest16(summary),
                }
            )
        out[i] = replace(out[i], observation=summary)
    return out


def run_episode(
    record: EncounterRecord,
    config: EpisodeConfig,
    tools: EpisodeTools,
    gateway: Gateway,
) -> EpisodeResult:
    _check_tools(config, tools)
    session = begin_encounter(record, tools.canon_map, tools.aliases)
    entries: list[TrajectoryEntry] = []
    audit: list[dict] = []
    retrieval_events: list[RetrievalEvent] = []
    workup_trace: list[WorkupEvent] = []
    compliance = {key: False for key in COMPLIANCE_KEYS}
    compacted: set[int] = set()
    experience_searches = 0
    repairs = 0
    steps_used = 0
    final_diagnosis = ""
    status = EpisodeStatus.STEP_CAP
    backend_failed = False

    def generate_step() -> AgentStep | None:
        nonlocal backend_failed
        bundle = render_diagnostic_prompt(record.presenting_complaint, entries, config.profile)
        try:
            reply = gateway.generate(bundle, config.generation, audit=audit)
        except GatewayError as exc:
            audit.append(
                {"event": "backend_failure", "detail": str(exc), "attempts": exc.attempts}
            )
            backend_failed = True
            return None
        return parse_agent_step(reply)

    def dispatch(action: ValidatedAction, slot: int) -> str:
        nonlocal experience_searches
        if action.kind is ActionKind.PHYSICAL_EXAM:
            compliance["physical_exam"] = True
            workup_trace.append(WorkupEvent(kind="pe"))
            return session.request_physical_exam(slot)
        if action.kind is ActionKind.LAB_TESTS:
            compliance["labs"] = True
            workup_trace.append(WorkupEvent(kind="lab", lab_names=action.lab_names))
            return session.request_lab_tests(list(action.lab_names), slot)
        if action.kind is ActionKind.IMAGING:
            compliance["imaging"] = True
            workup_trace.append(
                WorkupEvent(kind="imaging", modality=action.modality, region=action.region)
            )
            return session.request_imaging(action.modality, action.region, slot)
        if action.kind is ActionKind.EXPERIENCE_SEARCH:
            if not config.dcp_enabled:
                return UNAVAILABLE_TOOL
            if experience_searches >= config.experience_search_cap:
                return EXPERIENCE_CAP_REACHED
            experience_searches += 1
            compliance["experience_search"] = True
            hits, event = tools.dcp_view.retrieve(
                action.query,
                gateway,
                k=config.retrieval_k,
                similarity_floor=config.similarity_floor,
                encounter_id=record.id,
                step_index=slot,
            )
            retrieval_events.append(event)
            audit.append({"event": "retrieval", **event.to_json()})
            return render_experience_observation(hits)
        if action.kind is ActionKind.GUIDELINE_SEARCH:
            if not config.guidelines_enabled:
                return UNAVAILABLE_TOOL
            compliance["guideline_search"] = True
            return search_guidelines(
                tools.guideline_index,
                action.query,
                gateway,
                k=config.guideline_k,
                excerpt_chars=config.excerpt_chars,
            )
        if not config.pubmed_enabled:
            return UNAVAILABLE_TOOL
        return search_pubmed(tools.pubmed, action.query, config.pubmed_max_results, audit=audit)

    for slot in range(1, config.max_steps + 1):
        entries = compact_context(entries, config, gateway, audit, compacted)
        step = generate_step()
        if step is None:
            break
        steps_used = slot
        resolved: tuple[AgentStep, ValidatedAction | None] | None = None
        for attempt in (0, 1):
            if step.kind is StepKind.FINAL:
                resolved = (step, None)
                break
            corrective = ""
            if step.kind is StepKind.ACTION:
                try:
                    resolved = (step, validate_action(step, tools.aliases))
                    break
                except InvalidActionError as exc:
                    corrective = f"Invalid action: {exc}. {_FORMAT_REMINDER}"
            else:
                corrective = f"Malformed output ({step.problem}). {_FORMAT_REMINDER}"
            entries.append(
                TrajectoryEntry(
                    malformed_text=step.raw_text.strip() or "(empty reply)",
                    observation=corrective,
                )
            )
            audit.append({"event": "protocol_violation", "slot": slot, "detail": corrective})
            if attempt == 1:
                break
            repairs += 1
            audit.append({"event": "repair_attempt", "slot": slot})
            step = generate_step()
            if step is None:
                break
        if backend_failed:
            status = EpisodeStatus.BACKEND_FAILURE
            break
        if resolved is None:
            continue
        step, action = resolved
        if step.kind is StepKind.FINAL:
            final_diagnosis = step.final_diagnosis
            entries.append(
                TrajectoryEntry(thought=step.thought, final_diagnosis=final_diagnosis)
            )
            status = EpisodeStatus.DIAGNOSED
            break
        observation = dispatch(action, slot)
        entries.append(
            TrajectoryEntry(
                thought=step.thought,
                action=action.tool,
                action_input=step.action_input.strip(),
                observation=observation,
            )
        )

    if backend_failed:
        status = EpisodeStatus.BACKEND_FAILURE
    correct = (
        status is EpisodeStatus.DIAGNOSED and tools.matcher.match(final_diagnosis, record)
    )
    return EpisodeResult(
        encounter_id=record.id,
        pathology=record.pathology,
        status=status,
        final_diagnosis=final_diagnosis,
        correct=correct,
        steps_used=steps_used,
        entries=entries,
        retrieval_events=retrieval_events,
        workup_trace=workup_trace,
        compliance=compliance,
        repairs=repairs,
        audit=audit,
    )


def run_full_information(
    record: EncounterRecord,
    config: EpisodeConfig,
    gateway: Gateway,
    matcher: DiagnosisMatcher,
) -> EpisodeResult:
    """Single-pass regime: full record upfront, Format B only, no tools."""
    view = full_record_view(record)
    audit: list[dict] = []
    entries: list[TrajectoryEntry] = []
    repairs = 0
    status = EpisodeStatus.NO_VALID_DIAGNOSIS
    final_diagnosis = ""

    def attempt(prompt_view: str) -> AgentStep | None:
        bundle = render_full_information_prompt(prompt_view, config.profile)
        try:
            reply = gateway.generate(bundle, config.generation, audit=audit)
        except GatewayError as exc:
            audit.append(
                {"event": "backend_failure", "detail": str(exc), "attempts": exc.attempts}
            )
            return None
        return parse_agent_step(reply)

    step = attempt(view)
    if step is None:
        status = EpisodeStatus.BACKEND_FAILURE
    elif step.kind is not StepKind.FINAL:
        entries.append(
            TrajectoryEntry(
                malformed_text=step.raw_text.strip() or "(empty reply)",
                observation=FI_REPAIR_NOTE,
            )
        )
        repairs = 1
        audit.append({"event": "repair_attempt", "slot": 1})
        step = attempt(f"{view}\n\n{FI_REPAIR_NOTE}")
        if step is None:
            status = EpisodeStatus.BACKEND_FAILURE
    if step is not None:
        if step.kind is StepKind.FINAL:
            final_diagnosis = step.final_diagnosis
            entries.append(
                TrajectoryEntry(thought=step.thought, final_diagnosis=final_diagnosis)
            )
            status = EpisodeStatus.DIAGNOSED
        elif repairs:
            entries.append(
                TrajectoryEntry(
                    malformed_text=step.raw_text.strip() or "(empty reply)",
                    observation="No valid final diagnosis was produced.",
                )
            )

    correct = status is EpisodeStatus.DIAGNOSED and matcher.match(final_diagnosis, record)
    return EpisodeResult(
        encounter_id=record.id,
        pathology=record.pathology,
        status=status,
        final_diagnosis=final_diagnosis,
        correct=correct,
        steps_used=1,
        entries=entries,
        compliance={key: False for key in COMPLIANCE_KEYS},
        repairs=repairs,
        audit=audit,
    )


def entry_to_json(entry: TrajectoryEntry) -> dict:
    return {
        "thought": entry.thought,
        "action": entry.action,
        "action_input": entry.action_input,
        "observation": entry.observation,
        "final_diagnosis": entry.final_diagnosis,
        "malformed_text": entry.malformed_text,
    }


def entry_from_json(obj: dict) -> TrajectoryEntry:
    return TrajectoryEntry(
        thought=str(obj.get("thought", "")),
        action=str(obj.get("action", "")),
        action_input=str(obj.get("action_input", "")),
        observation=str(obj.get("observation", "")),
        final_diagnosis=str(obj.get("final_diagnosis", "")),
        malformed_text=str(obj.get("malformed_text", "")),
    )


def write_episode_artifacts(result: EpisodeResult, directory: str | Path) -> Path:
    """Persist one episode: trajectory.ndjson, audit.ndjson, result.json.

    Artifacts carry no wall-clock fields, so a replayed run is
    byte-identical to the run it replays.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with (directory / "trajectory.ndjson").open("w", encoding="utf-8") as fh:
        for entry in result.entries:
            fh.write(json.dumps(entry_to_json(entry), sort_keys=True) + "\n")
    with (directory / "audit.ndjson").open("w", encoding="utf-8") as fh:
        for row in result.audit:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    (directory / "result.json").write_text(
        json.dumps(result.to_json(), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return directory


def load_episode_result(directory: str | Path) -> EpisodeResult:
    directory = Path(directory)
    result = EpisodeResult.from_json(
        json.loads((directory / "result.json").read_text(encoding="utf-8"))
    )
    trajectory = directory / "trajectory.ndjson"
    if trajectory.exists():
        result.entries = [
            entry_from_json(json.loads(line))
            for line in trajectory.read_text(encoding="utf-8").splitlines()
            if line.strip()
        ]
    return result
