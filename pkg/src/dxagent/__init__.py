"""Evidence-gated diagnostic agent with an evolving experience repository.

The engine runs stepwise diagnostic episodes against encounter records
whose findings are revealed only on request, distills finished episodes
into retrievable cognition primitives, and scores runs for accuracy,
workup consistency, and guideline adherence.
"""

from .aliases import DEFAULT_ALIASES, AliasTable
from .canon import CanonMap, CanonMapError
from .dcpstore import (
    DCP,
    DcpRepository,
    DcpView,
    RetrievalEvent,
    render_experience_observation,
)
from .errors import ConfigurationError, IntegrityError
from .feedback import RulePack, default_rule_packs, evaluate_process, load_rule_pack
from .gateway import (
    Gateway,
    GatewayError,
    GenerationParams,
    HashingEmbedder,
    HttpBackend,
    RecordingBackend,
    ScriptedBackend,
    ScriptMissError,
)
from .guidelines import GuidelineDoc, GuidelineIndex, index_corpus, search_guidelines
from .metrics import (
    accuracy,
    adherence_report,
    consistency_report,
    imaging_set_f1,
    improvement_cases,
    lab_set_f1,
    learning_curve,
    order_concordance,
    provenance_enrichment,
    stratify_by_burden,
)
from .prompts import ModelProfile, PromptBundle, render_diagnostic_prompt
from .protocol import (
    AgentStep,
    InvalidActionError,
    TrajectoryEntry,
    parse_agent_step,
    render_scratchpad,
    validate_action,
)
from .pubmed import PubMedClient, search_pubmed
from .records import CohortLoadError, EncounterRecord, load_cohort, scan_label_leakage
from .runner import (
    EpisodeConfig,
    EpisodeResult,
    EpisodeStatus,
    EpisodeTools,
    run_episode,
    run_full_information,
)
from .session import EncounterSession, begin_encounter
from .workspace import EngineConfig, GovernanceError, Workspace

__version__ = "0.1.0"

__all__ = [
    "AgentStep",
    "AliasTable",
    "CanonMap",
    "CanonMapError",
    "CohortLoadError",
    "ConfigurationError",
    "DCP",
    "DcpRepository",
    "DcpView",
    "DEFAULT_ALIASES",
    "EncounterRecord",
    "EncounterSession",
    "EngineConfig",
    "EpisodeConfig",
    "EpisodeResult",
    "EpisodeStatus",
    "EpisodeTools",
    "Gateway",
    "GatewayError",
    "GenerationParams",
    "GovernanceError",
    "GuidelineDoc",
    "GuidelineIndex",
    "HashingEmbedder",
    "HttpBackend",
    "IntegrityError",
    "InvalidActionError",
    "ModelProfile",
    "PromptBundle",
    "PubMedClient",
    "RecordingBackend",
    "RetrievalEvent",
    "RulePack",
    "ScriptMissError",
    "ScriptedBackend",
    "TrajectoryEntry",
    "Workspace",
    "accuracy",
    "adherence_report",
    "begin_encounter",
    "consistency_report",
    "default_rule_packs",
    "evaluate_process",
    "imaging_set_f1",
    "improvement_cases",
    "index_corpus",
    "lab_set_f1",
    "learning_curve",
    "load_cohort",
    "load_rule_pack",
    "order_concordance",
    "parse_agent_step",
    "provenance_enrichment",
    "render_diagnostic_prompt",
    "render_experience_observation",
    "render_scratchpad",
    "run_episode",
    "run_full_information",
    "scan_label_leakage",
    "search_guidelines",
    "search_pubmed",
    "stratify_by_burden",
    "validate_action",
]
