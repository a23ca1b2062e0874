"""Prompt assembly for the diagnostic loop and experience consolidation.

Templates are plain text with model-specific chat delimiters spliced in at
five fixed tag points. A ModelProfile supplies the delimiter strings, so
the same template serves chat-markup models and plain-text models alike.

The assembled prompt always ends with "Thought:" plus the scratchpad, so
every completion begins as unlabeled thought text.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .errors import ConfigurationError
from .protocol import LABEL_OBSERVATION, TrajectoryEntry, render_scratchpad, render_trajectory_text
from .records import WorkupAction

PROFILE_TAGS = (
    "system_tag_start",
    "system_tag_end",
    "user_tag_start",
    "user_tag_end",
    "ai_tag_start",
)


@dataclass(frozen=True)
class ModelProfile:
    system_tag_start: str
    system_tag_end: str
    user_tag_start: str
    user_tag_end: str
    ai_tag_start: str
    name: str = ""

    @classmethod
    def plain(cls) -> "ModelProfile":
        return cls("", "", "", "", "", name="plain")

    @classmethod
    def from_mapping(cls, obj: dict, name: str = "") -> "ModelProfile":
        missing = [tag for tag in PROFILE_TAGS if tag not in obj]
        if missing:
            raise ConfigurationError(f"model profile missing delimiter(s): {', '.join(missing)}")
        values = {tag: str(obj[tag]) for tag in PROFILE_TAGS}
        return cls(name=name or str(obj.get("name", "")), **values)

    @classmethod
    def from_file(cls, path: str | Path) -> "ModelProfile":
        path = Path(path)
        try:
            obj = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read model profile {path}: {exc}") from exc
        if not isinstance(obj, dict):
            raise ConfigurationError(f"model profile {path} must be a JSON object")
        return cls.from_mapping(obj, name=str(obj.get("name", path.stem)))


@dataclass(frozen=True)
class PromptBundle:
    system_text: str
    user_text: str
    scratchpad: str
    stop_sequences: tuple[str, ...]
    text: str

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()[:16]


DIAGNOSTIC_SYSTEM_PROMPT = """\
You are a senior physician. Your task is to perform stepwise diagnostic reasoning using ONLY the allowed tools. You must strictly follow one of the two output formats below at every step.

FORMAT A. INFORMATION GATHERING
Thought: [1-2 concise sentences: what you know + what uncertainty remains + why next action is needed]
Action: [One of: Physical Examination, Laboratory Tests, Imaging, Experience Search, Guideline Search, PubMed Search]
Action Input: [Specific and valid request, MUST be within tool scope]
Observation:
[The system will fill this. DO NOT include any results yourself.]

FORMAT B. FINAL DIAGNOSIS
Thought: [1-2 concise sentences summarizing key findings leading to the diagnosis]
Final Diagnosis: [Single, clear, concise, and standard diagnosis. (Avoid overly complex or speculative etiological chains, focus on the most likely and commonly recognized diagnosis.)]

STRICT RULES:
1. You MUST always follow the exact format (A or B). No deviations.
2. For any test, ONLY request those allowed by the corresponding tool.
   - Laboratory Tests: only valid lab names.
   - Imaging: must specify '<REGION> <MODALITY>' format (e.g., 'Abdomen Ultrasound', 'Abdomen CT').
   - No invented tests, no unsupported modalities.
3. Before giving the final diagnosis, you MUST explicitly perform all three core types of medical evaluation as actions -- at least one Physical Examination, one Laboratory Test, and one Imaging.
   - Consider all clinically relevant imaging modalities for the suspected condition.
   - Do not omit a modality that is commonly recommended or diagnostically critical unless it is clearly inappropriate.
4. You MUST use Experience Search at least once before giving the final diagnosis.
   - In Action Input you SHOULD provide a short case style description of this patient (age, sex, chief complaint, symptom pattern, duration, key exam or lab or imaging findings), not just a single disease keyword.
   - If the retrieved experience is clearly irrelevant or not useful, you may reformulate the Action Input once and try a second Experience Search query. Do NOT keep searching repeatedly.
   - Only integrate insights that are consistent with this patient's objective data.
5. You MUST use Guideline Search at least once before giving the final diagnosis.
6. Stop when a confident diagnosis is possible based on available information.
7. When using Experience Search, Guideline Search, or PubMed Search, integrate only relevant insights into your Thought and proceed; do not rely on them if they conflict with patient-specific objective data.
8. If uncertainty remains but no high-yield action exists, you MUST provide the best-supported diagnosis (Format B) based on currently available data, without loop actions indefinitely.

CRITICAL FORMAT RULES:
1. MUST output the "Observation:" label immediately after Action Input as a signal to pause for respond.
2. Keep "Action", "Action Input" and "Final Diagnosis" fields concise and to the point.

AVAILABLE TOOLS:
- Physical Examination: Request physical examination of patient and receive the observations. This is a strongly recommended Examination in the clinical diagnostic process and should be performed first.
- Laboratory Tests: Request specific laboratory test and receive text values. Specify test names in 'Action Input' clearly. This is a common diagnostic step in the clinical evaluation.
- Imaging: Request imaging scans and receive the radiologist report. Region AND modality MUST be specified in the 'Action Input' field.
- Experience Search: Dense retrieval over past diagnostic cases. Action Input SHOULD be a short case style description of this patient, not just a disease name.
- Guideline Search: Retrieve relevant clinical guidelines. Provide a concise clinical query in "Action Input" (symptoms, suspected diagnosis, key labs/imaging, or decision point).
- PubMed Search: Conduct targeted search on PubMed and receive relevant medical articles. Concise and specific search query (few KEYWORDS) MUST be specified in "Action Input".

BE EFFICIENT: Prioritize high-yield diagnostic actions before broad or low-yield ones. Some medical examination information may not be available, do not focus on the unavailable data, make full use of the information that can be obtained to diagnose."""


CONSOLIDATION_SYSTEM_PROMPT = """\
You extract reusable diagnostic reasoning experience from completed clinical cases for future tool using agents.

Your goal:
- Do NOT retell the full case or reproduce chain of thought.
- Do NOT include treatment.
- Distill ONE Diagnostic Cognition Primitive (DCP): a short heuristic that improves future diagnosis.

The DCP must:
- Be consistent with the ground_truth diagnosis and the correctness flag.
- Focus on diagnostic reasoning, not management or consultation.
- Emphasize when and how to use ONLY the following tools in future similar cases:
   - Physical Examination (no additional input)
   - Laboratory Tests (input: names of the lab tests to run)
   - Imaging (input: imaging modality and region to be scanned)

Tool input templates (copyable):
- Physical Examination
- Laboratory Tests: <test name 1>, <test name 2>, ...
- Imaging: modality=<MODALITY>, region=<REGION>

Coverage constraints:
- Only recommend tests or imaging settings that are explicitly supported by the provided case context, meaning they appear in at least one of:
   1) Clinician test orders (from the chart). Use this as a high quality reference for realistic first line test selection and sequencing.
   2) Diagnostic steps where the tool call succeeded (has a non-error observation)
   3) Rule based feedback 'message' or retrieved guidance that explicitly recommends a specific test or imaging setting
- Prefer to fully cover the explicitly provided clinician orders and successful tool calls before adding anything else.
- Do not invent new tests, imaging modalities, regions, or non-provided measurement names.

Field roles:
- Experience Pattern:
   - Case-style trigger pattern for retrieval, built from symptoms, basic context, and key objective findings.
   - You may append compact labels such as the final correct diagnosis and common misdiagnoses to improve retrieval.
- Test Ordering Experience:
   - Constructive test-ordering heuristic using only the allowed tools and tool-compatible inputs.
   - You may rank actions by priority and specify escalation criteria, in natural clinical language.
   - Avoid blanket prohibitions. If a test is lower priority, express it as conditional or deferred rather than discouraged.
   - When naming tests or imaging, use the copyable tool input templates above.
- Diagnostic Decision Experience:
   - Short rule on how to weigh key findings and move from differential diagnosis to the correct final diagnosis.

Error correction rules:
- If correctness is "Correct":
   - Treat the model's diagnostic process as broadly appropriate.
   - Extract the most reusable diagnostic pattern and test ordering heuristic.
- If correctness is "Incorrect":
   - Treat the model's final diagnosis and reasoning as a negative example.
   - Do NOT justify or reuse the incorrect diagnosis.
   - Use the ground_truth and the rule based feedback in 'message' as the primary reference.
   - Base the DCP on the ideal diagnostic process implied by that feedback.

Input fields:
- Patient input: raw case description.
- Diagnostic steps: chronological list of tool calls and observations.
- Model final diagnosis: what the model concluded.
- Ground truth diagnosis: correct diagnosis label for this case.
- Correctness flag: "Correct" or "Incorrect".
- Rule based feedback: comments about missing exams, unnecessary tests, wrong imaging, and efficiency.
- Clinician test orders (from the chart): tests ordered by the treating clinician as documented in the chart, expressed with the same tool names and inputs, and serving as a realistic reference for first line test selection and sequencing.

Case context:
Patient input:
{input}

Diagnostic steps:
{intermediate_steps}

Model final diagnosis:
{output}

Ground truth diagnosis:
{ground_truth}

Correctness flag:
{correctness}

Rule based feedback on process:
{message}

Clinician test orders (from the chart):
{clinician}

Now output exactly in this format:

Experience Pattern: <case-style trigger pattern for retrieval. may include final correct diagnosis and frequent misdiagnoses as compact labels>
Test Ordering Experience: <priority ranked ordering sequence and escalation criteria, using the tool input templates and respecting the coverage constraints>
Diagnostic Decision Experience: <concise rule on how to weigh key findings and reach the correct diagnosis, aligned with ground_truth and rule based feedback>"""


FULL_INFORMATION_SYSTEM_PROMPT = """\
You are a senior physician. The complete set of available examination results for this patient is provided below; no further tests can be ordered. Review all sections and commit to the single best-supported diagnosis.

You must answer in exactly this format:

Thought: [1-2 concise sentences summarizing key findings leading to the diagnosis]
Final Diagnosis: [Single, clear, concise, and standard diagnosis. (Avoid overly complex or speculative etiological chains, focus on the most likely and commonly recognized diagnosis.)]"""


COMPACTION_SYSTEM_PROMPT = """\
You condense diagnostic workup observations to reduce context length without losing clinical signal.

Rules:
- Keep every abnormal or diagnostically decisive value with its units.
- Keep imaging impressions and explicit negative findings.
- Drop boilerplate, normal-range filler, and repeated headers.
- Output only the condensed text, no preamble."""

STOP_OBSERVATION = LABEL_OBSERVATION

NO_ORDERS_RECORDED = "none recorded"


def _assemble(profile: ModelProfile, system_body: str, user_body: str, tail: str) -> str:
    """Splice the template around the profile's five delimiter tags.

    Mirrors the template's line layout: the system/user boundary tags
    share a line, the user body is blank-line padded, and the tail sits
    directly after the assistant tag.
    """
    return (
        f"{profile.system_tag_start}\n"
        f"{system_body}\n"
        f"{profile.system_tag_end}{profile.user_tag_start}\n"
        f"\n{user_body}\n"
        f"{profile.user_tag_end}{profile.ai_tag_start}\n"
        f"{tail}"
    )


def render_diagnostic_prompt(
    record_context: str,
    history: Sequence[TrajectoryEntry],
    profile: ModelProfile,
) -> PromptBundle:
    """Prompt for the next step of an interactive episode.

    The same template is rendered regardless of which tools a run has
    enabled; availability is enforced when actions are dispatched, so
    prompt text never varies between ablation arms.
    """
    scratchpad = render_scratchpad(list(history))
    user_text = f"Patient History:\n{record_context}\n\nBEGIN YOUR DIAGNOSTIC PROCESS:"
    text = _assemble(profile, DIAGNOSTIC_SYSTEM_PROMPT, user_text, f"Thought:{scratchpad}")
    return PromptBundle(
        system_text=DIAGNOSTIC_SYSTEM_PROMPT,
        user_text=user_text,
        scratchpad=scratchpad,
        stop_sequences=(STOP_OBSERVATION,),
        text=text,
    )


def render_full_information_prompt(record_view: str, profile: ModelProfile) -> PromptBundle:
    user_text = f"{record_view}\n\nGIVE YOUR FINAL DIAGNOSIS:"
    text = _assemble(profile, FULL_INFORMATION_SYSTEM_PROMPT, user_text, "Thought:")
    return PromptBundle(
        system_text=FULL_INFORMATION_SYSTEM_PROMPT,
        user_text=user_text,
        scratchpad="",
        stop_sequences=(STOP_OBSERVATION,),
        text=text,
    )


def render_clinician_orders(orders: Sequence[WorkupAction]) -> str:
    if not orders:
        return NO_ORDERS_RECORDED
    lines = []
    for order in orders:
        if order.input:
            lines.append(f"- {order.action}: {order.input}")
        else:
            lines.append(f"- {order.action}")
    return "\n".join(lines)


def render_consolidation_prompt(
    patient_input: str,
    entries: Sequence[TrajectoryEntry],
    final_diagnosis: str,
    ground_truth: str,
    correct: bool,
    feedback: str,
    clinician_orders: str,
    profile: ModelProfile,
) -> PromptBundle:
    """Prompt that distills one finished episode into a DCP.

    All seven slots are always filled; the correctness flag is the literal
    word "Correct" or "Incorrect" because the template's error-correction
    rules branch on those exact strings.
    """
    system_text = (
        CONSOLIDATION_SYSTEM_PROMPT.replace("{input}", patient_input)
        .replace("{intermediate_steps}", render_trajectory_text(list(entries)) or "(no steps)")
        .replace("{output}", final_diagnosis or "(none given)")
        .replace("{ground_truth}", ground_truth)
        .replace("{correctness}", "Correct" if correct else "Incorrect")
        .replace("{message}", feedback)
        .replace("{clinician}", clinician_orders or NO_ORDERS_RECORDED)
    )
    # the whole template lives in the system segment; the assistant tag
    # follows an empty user segment
    text = (
        f"{profile.system_tag_start}\n"
        f"{system_text}\n"
        f"{profile.system_tag_end}\n"
        f"\n{profile.ai_tag_start}\n"
    )
    return PromptBundle(
        system_text=system_text,
        user_text="",
        scratchpad="",
        stop_sequences=(),
        text=text,
    )


def render_compaction_prompt(observation_text: str, profile: ModelProfile) -> PromptBundle:
    user_text = f"Observations to condense:\n{observation_text}"
    text = _assemble(profile, COMPACTION_SYSTEM_PROMPT, user_text, "Condensed:")
    return PromptBundle(
        system_text=COMPACTION_SYSTEM_PROMPT,
        user_text=user_text,
        scratchpad="",
        stop_sequences=(),
        text=text,
    )
