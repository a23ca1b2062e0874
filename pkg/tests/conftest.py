"""Shared fixtures: records, packs, scripted gateways, cohort files."""

from __future__ import annotations

import json
from pathlib import Path

import pytest

from dxagent.canon import CanonMap
from dxagent.feedback import default_rule_packs
from dxagent.gateway import Gateway, HashingEmbedder, ScriptedBackend
from dxagent.records import record_from_json
from dxagent.runner import DiagnosisMatcher

# firewall-clean by construction: no visible field contains "appendicitis"
# ("periappendiceal" and "appendix" do not count as substring hits)
APPENDICITIS_RECORD = {
    "id": "enc-001",
    "presenting_complaint": (
        "22-year-old man with 18 hours of periumbilical pain migrating to the "
        "right lower quadrant, with nausea and low-grade fever."
    ),
    "pathology": "appendicitis",
    "ground_truth": "Acute appendicitis",
    "physical_exam": (
        "Temp 38.1 C. Tenderness at McBurney's point with voluntary guarding. "
        "Positive Rovsing sign. Bowel sounds present."
    ),
    "labs": [
        {"name": "WBC", "value": "14.2 x10^9/L (high)"},
        {"name": "CRP", "value": "48 mg/L (high)"},
        {"name": "Lipase", "value": "30 U/L (normal)"},
    ],
    "imaging": [
        {
            "modality": "CT",
            "region": "Abdomen",
            "report": (
                "Dilated appendix measuring 11 mm with periappendiceal fat "
                "stranding. No free air or abscess."
            ),
        },
        {
            "modality": "Ultrasound",
            "region": "Abdomen",
            "report": (
                "Noncompressible blind-ending tubular structure in the right "
                "iliac fossa."
            ),
        },
    ],
    "clinician_orders": [
        {"action": "Physical Examination"},
        {"action": "Laboratory Tests", "input": "CBC, CRP"},
        {"action": "Imaging", "input": "modality=CT, region=Abdomen"},
    ],
}


@pytest.fixture
def canon() -> CanonMap:
    return CanonMap(
        {"wbc": "cbc", "white blood cells": "cbc", "complete blood count": "cbc"},
        version="test-v1",
    )


@pytest.fixture
def packs():
    return default_rule_packs()


@pytest.fixture
def matcher(packs) -> DiagnosisMatcher:
    return DiagnosisMatcher.from_packs(packs)


@pytest.fixture
def record(canon):
    return record_from_json(APPENDICITIS_RECORD, canon)


def fmt_a(thought: str, action: str, action_input: str) -> str:
    """A scripted completion in Format A, echoing the trailing Observation cue."""
    return f" {thought}\nAction: {action}\nAction Input: {action_input}\nObservation:"


def fmt_b(thought: str, diagnosis: str) -> str:
    return f" {thought}\nFinal Diagnosis: {diagnosis}"


def dcp_reply(pattern: str, ordering: str, decision: str) -> str:
    return (
        f"Experience Pattern: {pattern}\n"
        f"Test Ordering Experience: {ordering}\n"
        f"Diagnostic Decision Experience: {decision}"
    )


def seq_gateway(replies, dim: int = 64) -> Gateway:
    return Gateway(
        backend=ScriptedBackend.sequence(list(replies)),
        embedder=HashingEmbedder(dim=dim),
    )


def rules_gateway(rules, default: str | None = None, dim: int = 64) -> Gateway:
    return Gateway(
        backend=ScriptedBackend.from_rules(rules, default=default),
        embedder=HashingEmbedder(dim=dim),
    )


def embed_gateway(dim: int = 64) -> Gateway:
    """Embedding-only gateway; any generation call exhausts the empty script."""
    return seq_gateway([], dim=dim)


def write_cohort(path: Path, objs) -> Path:
    with Path(path).open("w", encoding="utf-8") as fh:
        for obj in objs:
            fh.write(json.dumps(obj) + "\n")
    return Path(path)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One line per acceptance criterion at the end of the run."""
    stats = terminalreporter.stats
    rows = []
    for outcome in ("passed", "failed", "error"):
        for rep in stats.get(outcome, []):
            if getattr(rep, "when", "call") != "call" and outcome != "error":
                continue
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" in nodeid:
                name = nodeid.rsplit("::", 1)[1]
                number = int(name.split("_")[2])
                rows.append((number, outcome))
    if not rows:
        return
    try:
        import test_acceptance

        titles = test_acceptance.CRITERIA
    except Exception:
        titles = {}
    terminalreporter.write_sep("-", "acceptance criteria")
    for number, outcome in sorted(rows):
        verdict = "PASS" if outcome == "passed" else "FAIL"
        title = titles.get(number, "")
        terminalreporter.write_line(f"[ACCEPTANCE {number}] {verdict} - {title}")
