"""Encounter records: ingestion, validation, and full-record rendering.

Cohort files are UTF-8, newline-delimited JSON with one encounter per
line. Required keys: id, presenting_complaint, pathology, ground_truth.
Optional keys: physical_exam, labs ([{name, value}]), imaging
([{modality, region, report}]), clinician_orders ([{action, input}]),
language, consolidated_labs.

Loading enforces the label firewall: the ground-truth diagnosis (and any
configured synonym) must not appear in any agent-visible field, so that no
downstream observation can leak the label.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .aliases import fold
from .canon import CanonMap

PE_UNAVAILABLE = "Physical examination results are not available."
IMAGING_UNAVAILABLE = "The requested imaging study is not available."
LABS_UNAVAILABLE = "No laboratory results are available."
EMPTY_LAB_REQUEST = "No laboratory tests were specified."


def lab_unavailable_line(name: str) -> str:
    return f"{name}: not available"


@dataclass(frozen=True)
class LabItem:
    name: str
    canonical_id: str
    value: str


@dataclass(frozen=True)
class ImagingItem:
    modality: str
    region: str
    report: str


@dataclass(frozen=True)
class WorkupAction:
    action: str
    input: str = ""


@dataclass(frozen=True)
class EncounterRecord:
    id: str
    presenting_complaint: str
    pathology: str
    ground_truth: str
    physical_exam: str | None = None
    labs: tuple[LabItem, ...] = ()
    imaging: tuple[ImagingItem, ...] = ()
    clinician_orders: tuple[WorkupAction, ...] = ()
    language_tag: str = "en"
    # source kept labs as one consolidated results field; per-test gating
    # degrades to all-or-nothing for such records
    consolidated_labs: bool = False


class RecordError(ValueError):
    def __init__(self, record_id: str, field_name: str, message: str):
        self.record_id = record_id
        self.field_name = field_name
        super().__init__(f"record {record_id!r}, field {field_name!r}: {message}")


class CohortLoadError(ValueError):
    """Raised when any record in a cohort file fails validation."""

    def __init__(self, errors: Sequence[RecordError | str]):
        self.errors = list(errors)
        lines = "\n".join(f"  - {e}" for e in self.errors)
        super().__init__(f"{len(self.errors)} record error(s):\n{lines}")


def _require_text(obj: dict, key: str, record_id: str) -> str:
    value = obj.get(key)
    if not isinstance(value, str) or not value.strip():
        raise RecordError(record_id, key, "required non-empty text field")
    return value


def record_from_json(obj: dict, canon_map: CanonMap) -> EncounterRecord:
    record_id = str(obj.get("id") or "<missing id>")
    if "id" not in obj or not str(obj["id"]).strip():
        raise RecordError(record_id, "id", "required non-empty text field")
    complaint = _require_text(obj, "presenting_complaint", record_id)
    pathology = _require_text(obj, "pathology", record_id)
    ground_truth = _require_text(obj, "ground_truth", record_id)

    physical_exam = obj.get("physical_exam")
    if physical_exam is not None and not isinstance(physical_exam, str):
        raise RecordError(record_id, "physical_exam", "must be text when present")

    labs = []
    for i, lab in enumerate(obj.get("labs") or []):
        if not isinstance(lab, dict) or "name" not in lab or "value" not in lab:
            raise RecordError(record_id, f"labs[{i}]", "expected object with name and value")
        name = str(lab["name"])
        labs.append(LabItem(name=name, canonical_id=canon_map.apply(name), value=str(lab["value"])))

    imaging = []
    for i, item in enumerate(obj.get("imaging") or []):
        if not isinstance(item, dict) or not all(k in item for k in ("modality", "region", "report")):
            raise RecordError(
                record_id, f"imaging[{i}]", "expected object with modality, region and report"
            )
        imaging.append(
            ImagingItem(
                modality=str(item["modality"]),
                region=str(item["region"]),
                report=str(item["report"]),
            )
        )

    orders = []
    for i, order in enumerate(obj.get("clinician_orders") or []):
        if not isinstance(order, dict) or "action" not in order:
            raise RecordError(record_id, f"clinician_orders[{i}]", "expected object with action")
        orders.append(WorkupAction(action=str(order["action"]), input=str(order.get("input", ""))))

    return EncounterRecord(
        id=str(obj["id"]),
        presenting_complaint=complaint,
        pathology=pathology,
        ground_truth=ground_truth,
        physical_exam=physical_exam,
        labs=tuple(labs),
        imaging=tuple(imaging),
        clinician_orders=tuple(orders),
        language_tag=str(obj.get("language", "en")),
        consolidated_labs=bool(obj.get("consolidated_labs", False)),
    )


def agent_visible_fields(record: EncounterRecord) -> list[tuple[str, str]]:
    """Every (field name, text) pair a session observation could reveal."""
    fields = [("presenting_complaint", record.presenting_complaint)]
    if record.physical_exam is not None:
        fields.append(("physical_exam", record.physical_exam))
    for i, lab in enumerate(record.labs):
        fields.append((f"labs[{i}]", f"{lab.name}: {lab.value}"))
    for i, item in enumerate(record.imaging):
        fields.append((f"imaging[{i}]", item.report))
    return fields


def label_synonym_terms(
    record: EncounterRecord, label_synonyms: Mapping[str, Sequence[str]] | None = None
) -> list[str]:
    """Terms whose presence in agent-visible text counts as label leakage."""
    terms = [record.ground_truth, record.pathology]
    if label_synonyms:
        terms.extend(label_synonyms.get(record.pathology, ()))
        terms.extend(label_synonyms.get(fold(record.pathology), ()))
    seen: set[str] = set()
    out = []
    for term in terms:
        folded = fold(term)
        if folded and folded not in seen:
            seen.add(folded)
            out.append(term)
    return out


def scan_label_leakage(
    record: EncounterRecord, label_synonyms: Mapping[str, Sequence[str]] | None = None
) -> list[str]:
    """Names of agent-visible fields containing the label or a synonym."""
    terms = [fold(t) for t in label_synonym_terms(record, label_synonyms)]
    offending = []
    for field_name, text in agent_visible_fields(record):
        folded = fold(text)
        if any(term in folded for term in terms):
            offending.append(field_name)
    return offending


def load_cohort(
    path: str | Path,
    canon_map: CanonMap | None = None,
    label_synonyms: Mapping[str, Sequence[str]] | None = None,
) -> list[EncounterRecord]:
    """Load and validate a newline-delimited JSON cohort file.

    Records come back in file order. Any malformed record, duplicate id, or
    label leakage aborts the load with a CohortLoadError listing every
    problem found.
    """
    canon_map = canon_map or CanonMap.identity()
    path = Path(path)
    errors: list[RecordError | str] = []
    records: list[EncounterRecord] = []
    seen_ids: set[str] = set()
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            errors.append(f"line {line_no}: invalid JSON ({exc.msg})")
            continue
        try:
            record = record_from_json(obj, canon_map)
        except RecordError as exc:
            errors.append(exc)
            continue
        if record.id in seen_ids:
            errors.append(f"line {line_no}: duplicate id {record.id!r}")
            continue
        seen_ids.add(record.id)
        leaks = scan_label_leakage(record, label_synonyms)
        if leaks:
            errors.append(
                RecordError(record.id, ", ".join(leaks), "label leakage: ground truth visible")
            )
            continue
        records.append(record)
    if errors:
        raise CohortLoadError(errors)
    return records


def render_labs(labs: Iterable[LabItem]) -> str:
    lines = [f"{lab.name}: {lab.value}" for lab in labs]
    return "\n".join(lines) if lines else LABS_UNAVAILABLE


def render_imaging_item(item: ImagingItem) -> str:
    return f"{item.modality} {item.region}:\n{item.report}"


def full_record_view(record: EncounterRecord) -> str:
    """Render the complete evidence pool for single-pass inference.

    Ground truth, pathology tag and clinician orders are never included.
    """
    sections = [
        ("Patient History", record.presenting_complaint),
        ("Physical Examination", record.physical_exam or PE_UNAVAILABLE),
        ("Laboratory Results", render_labs(record.labs)),
        (
            "Imaging",
            "\n\n".join(render_imaging_item(i) for i in record.imaging) or IMAGING_UNAVAILABLE,
        ),
    ]
    return "\n\n".join(f"{title}:\n{body}" for title, body in sections)
