"""Gated access to a single encounter's evidence.

A session starts with only the presenting complaint revealed. Each workup
request (physical exam, named labs, an imaging study) reveals exactly the
matching fields and is logged with the step index that made it. Fields the
record does not contain come back as fixed unavailability sentinels so the
agent cannot distinguish "withheld" from "never collected".
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .aliases import AliasTable, DEFAULT_ALIASES
from .canon import CanonMap
from .records import (
    EMPTY_LAB_REQUEST,
    EncounterRecord,
    IMAGING_UNAVAILABLE,
    PE_UNAVAILABLE,
    WorkupAction,
    lab_unavailable_line,
    render_imaging_item,
)


@dataclass
class EncounterSession:
    record: EncounterRecord
    canon_map: CanonMap = field(default_factory=CanonMap.identity)
    aliases: AliasTable = field(default_factory=lambda: DEFAULT_ALIASES)
    revealed: set[str] = field(default_factory=set)
    request_log: list[tuple[int, WorkupAction]] = field(default_factory=list)

    @property
    def presenting_complaint(self) -> str:
        return self.record.presenting_complaint

    def _log(self, step_index: int, action: str, action_input: str) -> None:
        self.request_log.append((step_index, WorkupAction(action=action, input=action_input)))

    def request_physical_exam(self, step_index: int) -> str:
        self._log(step_index, "Physical Examination", "")
        if self.record.physical_exam is None:
            return PE_UNAVAILABLE
        self.revealed.add("pe")
        return self.record.physical_exam

    def request_lab_tests(self, names: list[str], step_index: int) -> str:
        self._log(step_index, "Laboratory Tests", ", ".join(names))
        requested = [n for n in (n.strip() for n in names) if n]
        if not requested:
            return EMPTY_LAB_REQUEST
        if self.record.consolidated_labs:
            # the record cannot be split per test, so any lab request
            # reveals the whole panel
            lines = []
            for i, lab in enumerate(self.record.labs):
                self.revealed.add(f"lab:{i}")
                lines.append(f"{lab.name}: {lab.value}")
            if lines:
                return "\n".join(lines)
            return "\n".join(lab_unavailable_line(n) for n in requested)
        wanted = {self.canon_map.apply(n) for n in requested}
        matched: list[str] = []
        matched_ids: set[str] = set()
        for i, lab in enumerate(self.record.labs):
            if lab.canonical_id in wanted:
                self.revealed.add(f"lab:{i}")
                matched.append(f"{lab.name}: {lab.value}")
                matched_ids.add(lab.canonical_id)
        misses = [n for n in requested if self.canon_map.apply(n) not in matched_ids]
        lines = matched + [lab_unavailable_line(n) for n in misses]
        return "\n".join(lines)

    def request_imaging(self, modality: str, region: str, step_index: int) -> str:
        canonical = self.aliases.normalize_modality(modality) or modality
        self._log(
            step_index,
            "Imaging",
            f"{self.aliases.display_region(region)} {canonical}".strip(),
        )
        want = self.aliases.pair_key(modality, region)
        reports = []
        for i, item in enumerate(self.record.imaging):
            if self.aliases.pair_key(item.modality, item.region) == want:
                self.revealed.add(f"imaging:{i}")
                reports.append(render_imaging_item(item))
        if not reports:
            return IMAGING_UNAVAILABLE
        return "\n\n".join(reports)

    def revealed_fraction(self) -> float:
        total = (1 if self.record.physical_exam is not None else 0) + len(self.record.labs) + len(
            self.record.imaging
        )
        if total == 0:
            return 0.0
        return len(self.revealed) / total


def begin_encounter(
    record: EncounterRecord,
    canon_map: CanonMap | None = None,
    aliases: AliasTable | None = None,
) -> EncounterSession:
    return EncounterSession(
        record=record,
        canon_map=canon_map or CanonMap.identity(),
        aliases=aliases or DEFAULT_ALIASES,
    )
