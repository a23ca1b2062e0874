"""Rule-based process feedback for consolidation.

A rule pack describes, per pathology, which laboratory categories a
sound workup covers (primary weight 1.0, secondary 0.5), which first
imaging study is preferred or acceptable, diagnosis synonyms for the
matcher, and the message templates for each finding code. Packs are
config data: editing them changes behavior without code changes, and the
defaults shipped here are descriptive workup conventions, not clinical
authority.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Mapping, Sequence

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .aliases import AliasTable, DEFAULT_ALIASES, fold
from .canon import CanonMap
from .errors import ConfigurationError

if TYPE_CHECKING:
    from .records import EncounterRecord
    from .runner import EpisodeResult

NO_ISSUES = "No process issues detected."

FINDING_CODES = (
    "pe_missing",
    "pe_not_first",
    "labs_missing",
    "labs_primary_missing",
    "imaging_missing",
    "imaging_first_choice",
    "efficiency",
)


@dataclass(frozen=True)
class RulePack:
    pathology: str
    synonyms: tuple[str, ...]
    primary_labs: frozenset[str]
    secondary_labs: frozenset[str]
    preferred_imaging: frozenset[tuple[str, str]]  # (modality, region)
    acceptable_imaging: frozenset[tuple[str, str]]
    feedback_templates: Mapping[str, str]

    def __post_init__(self):
        if not self.pathology.strip():
            raise ConfigurationError("rule pack needs a pathology tag")
        if not self.synonyms:
            raise ConfigurationError(f"rule pack {self.pathology!r} has no diagnosis synonyms")
        if self.primary_labs & self.secondary_labs:
            raise ConfigurationError(
                f"rule pack {self.pathology!r}: primary and secondary labs overlap"
            )
        if self.preferred_imaging & self.acceptable_imaging:
            raise ConfigurationError(
                f"rule pack {self.pathology!r}: preferred and acceptable imaging overlap"
            )
        missing = [code for code in FINDING_CODES if code not in self.feedback_templates]
        if missing:
            raise ConfigurationError(
                f"rule pack {self.pathology!r} lacks feedback templates: {', '.join(missing)}"
            )


def _imaging_pairs(rows, pack_name: str, key: str) -> frozenset[tuple[str, str]]:
    pairs = set()
    for row in rows or []:
        if not isinstance(row, dict) or "modality" not in row or "region" not in row:
            raise ConfigurationError(
                f"rule pack {pack_name!r}: {key} entries need modality and region"
            )
        pairs.add((str(row["modality"]), str(row["region"])))
    return frozenset(pairs)


def rule_pack_from_mapping(obj: dict, name: str = "") -> RulePack:
    pack_name = str(obj.get("pathology", name))
    templates = obj.get("feedback_templates")
    if not isinstance(templates, dict):
        raise ConfigurationError(f"rule pack {pack_name!r} needs a [feedback_templates] table")
    return RulePack(
        pathology=pack_name,
        synonyms=tuple(str(s) for s in obj.get("synonyms", [])),
        primary_labs=frozenset(fold(str(s)) for s in obj.get("primary_labs", [])),
        secondary_labs=frozenset(fold(str(s)) for s in obj.get("secondary_labs", [])),
        preferred_imaging=_imaging_pairs(obj.get("preferred_imaging"), pack_name, "preferred_imaging"),
        acceptable_imaging=_imaging_pairs(obj.get("acceptable_imaging"), pack_name, "acceptable_imaging"),
        feedback_templates={str(k): str(v) for k, v in templates.items()},
    )


def load_rule_pack(path: str | Path) -> RulePack:
    path = Path(path)
    with path.open("rb") as fh:
        obj = tomllib.load(fh)
    return rule_pack_from_mapping(obj, name=path.stem)


def load_rule_packs(directory: str | Path) -> dict[str, RulePack]:
    packs: dict[str, RulePack] = {}
    for path in sorted(Path(directory).glob("*.toml")):
        pack = load_rule_pack(path)
        if pack.pathology in packs:
            raise ConfigurationError(f"duplicate rule pack for pathology {pack.pathology!r}")
        packs[pack.pathology] = pack
    return packs


def default_rule_packs() -> dict[str, RulePack]:
    """Packs bundled with the package under dxagent/rulepacks/."""
    from importlib import resources

    packs: dict[str, RulePack] = {}
    root = resources.files("dxagent").joinpath("rulepacks")
    for entry in sorted(root.iterdir(), key=lambda e: e.name):
        if entry.name.endswith(".toml"):
            with entry.open("rb") as fh:
                pack = rule_pack_from_mapping(tomllib.load(fh), name=entry.name[:-5])
            packs[pack.pathology] = pack
    return packs


def _format_pairs(pairs: Sequence[tuple[str, str]]) -> str:
    return "; ".join(f"modality={m}, region={r}" for m, r in pairs)


def evaluate_process(
    result: "EpisodeResult",
    record: "EncounterRecord",
    pack: RulePack,
    canon_map: CanonMap | None = None,
    aliases: AliasTable | None = None,
    cohort_median_steps: float | None = None,
) -> str:
    """One feedback line per triggered finding; pure function, no generation.

    cohort_median_steps comes from the caller because the pack must stay
    cohort-agnostic; without it the efficiency check is skipped.
    """
    if pack.pathology != record.pathology:
        raise ConfigurationError(
            f"rule pack is for {pack.pathology!r} but record is {record.pathology!r}"
        )
    canon_map = canon_map or CanonMap.identity()
    aliases = aliases or DEFAULT_ALIASES
    slots = _template_slots(pack, aliases)
    findings: list[str] = []

    trace = list(result.workup_trace)
    pe_events = [e for e in trace if e.kind == "pe"]
    if not pe_events:
        findings.append(_render(pack, "pe_missing", slots))
    elif trace and trace[0].kind != "pe":
        findings.append(_render(pack, "pe_not_first", slots))

    lab_events = [e for e in trace if e.kind == "lab"]
    if not lab_events:
        if pack.primary_labs or pack.secondary_labs:
            findings.append(_render(pack, "labs_missing", slots))
    else:
        requested = {canon_map.apply(name) for e in lab_events for name in e.lab_names}
        missing_primary = sorted(pack.primary_labs - requested)
        if missing_primary:
            findings.append(
                _render(pack, "labs_primary_missing", {**slots, "missing_primary": ", ".join(missing_primary)})
            )

    imaging_events = [e for e in trace if e.kind == "imaging"]
    scored_pairs = {aliases.pair_key(m, r) for m, r in pack.preferred_imaging} | {
        aliases.pair_key(m, r) for m, r in pack.acceptable_imaging
    }
    if not imaging_events:
        if pack.preferred_imaging or pack.acceptable_imaging:
            findings.append(_render(pack, "imaging_missing", slots))
    elif scored_pairs:
        first = imaging_events[0]
        if aliases.pair_key(first.modality, first.region) not in scored_pairs:
            findings.append(
                _render(
                    pack,
                    "imaging_first_choice",
                    {**slots, "first_imaging": f"modality={first.modality}, region={first.region}"},
                )
            )

    if cohort_median_steps is not None and result.steps_used > cohort_median_steps:
        findings.append(
            _render(
                pack,
                "efficiency",
                {**slots, "steps_used": str(result.steps_used), "median_steps": _trim_number(cohort_median_steps)},
            )
        )

    return "\n".join(findings) if findings else NO_ISSUES


def _trim_number(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else str(value)


def _template_slots(pack: RulePack, aliases: AliasTable) -> dict[str, str]:
    preferred = sorted(pack.preferred_imaging)
    acceptable = sorted(pack.acceptable_imaging)
    return {
        "pathology": pack.pathology,
        "primary_labs": ", ".join(sorted(pack.primary_labs)),
        "secondary_labs": ", ".join(sorted(pack.secondary_labs)),
        "preferred_imaging": _format_pairs(preferred),
        "acceptable_imaging": _format_pairs(acceptable),
        "missing_primary": "",
        "first_imaging": "",
        "steps_used": "",
        "median_steps": "",
    }


def _render(pack: RulePack, code: str, slots: dict[str, str]) -> str:
    template = pack.feedback_templates[code]
    try:
        return template.format(**slots)
    except (KeyError, IndexError) as exc:
        raise ConfigurationError(
            f"rule pack {pack.pathology!r}: template {code!r} uses unknown slot {exc}"
        ) from exc
