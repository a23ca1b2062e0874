"""Repository of diagnostic cognition primitives (DCPs).

A DCP is one distilled unit of diagnostic experience: a retrievable
presentation pattern, a test-ordering heuristic, and a decision rule,
plus provenance (accrual position, source pathology and encounter,
whether the source episode was diagnosed correctly).

Persistence is an append-only event log (events.ndjson) next to a vector
file (vectors.bin). Opening a repository replays the log, so on-disk
state is the authority and any process can audit it line by line.
Exposure indices are assigned at insertion, 1-based, and never reused;
snapshots at increasing indices are nested views.
"""

from __future__ import annotations

import datetime as dt
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

from .errors import IntegrityError
from .gateway import Gateway
from .index import VectorIndex, read_vector_records, write_vector_record
from .prompts import (
    ModelProfile,
    render_clinician_orders,
    render_consolidation_prompt,
)
from .protocol import ConsolidationParseError, parse_dcp_text

if TYPE_CHECKING:
    from .records import EncounterRecord
    from .runner import EpisodeResult

NO_EXPERIENCE = "No relevant prior experience was found."

DEFAULT_RETRIEVAL_K = 3
SIMILARITY_FLOOR = 0.2


@dataclass(frozen=True)
class DCP:
    id: str
    pattern: str
    ordering: str
    decision: str
    exposure_index: int
    pathology: str
    source_correct: bool
    source_encounter_id: str
    created_at: str
    retracted: bool = False
    retraction_reasons: tuple[str, ...] = ()


@dataclass(frozen=True)
class RetrievalEvent:
    encounter_id: str
    step_index: int
    query: str
    returned: tuple[tuple[str, float], ...]
    snapshot_limit: int | None = None

    def to_json(self) -> dict:
        return {
            "encounter_id": self.encounter_id,
            "step_index": self.step_index,
            "query": self.query,
            "returned": [[dcp_id, sim] for dcp_id, sim in self.returned],
            "snapshot_limit": self.snapshot_limit,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RetrievalEvent":
        return cls(
            encounter_id=str(obj["encounter_id"]),
            step_index=int(obj["step_index"]),
            query=str(obj["query"]),
            returned=tuple((str(i), float(s)) for i, s in obj.get("returned", [])),
            snapshot_limit=(
                None if obj.get("snapshot_limit") is None else int(obj["snapshot_limit"])
            ),
        )


def _utc_now() -> str:
    return dt.datetime.now(dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


class DcpRepository:
    """Event-sourced store with similarity retrieval over patterns.

    Only the pattern field is embedded; ordering and decision text ride
    along as payload for the observation channel.
    """

    def __init__(self, directory: str | Path, create: bool = True):
        self.directory = Path(directory)
        if create:
            self.directory.mkdir(parents=True, exist_ok=True)
        elif not self.directory.is_dir():
            raise FileNotFoundError(f"no repository at {self.directory}")
        self._dcps: dict[str, DCP] = {}
        self._order: list[str] = []
        self._index = VectorIndex()
        self._skips: list[dict] = []
        self._replay()

    @property
    def events_path(self) -> Path:
        return self.directory / "events.ndjson"

    @property
    def vectors_path(self) -> Path:
        return self.directory / "vectors.bin"

    def _replay(self) -> None:
        vectors: dict[str, list[float]] = {}
        if self.vectors_path.exists():
            with self.vectors_path.open("rb") as fh:
                for key, values in read_vector_records(fh):
                    vectors[key] = values
        if not self.events_path.exists():
            return
        for line_no, line in enumerate(
            self.events_path.read_text(encoding="utf-8").splitlines(), 1
        ):
            if not line.strip():
                continue
            event = json.loads(line)
            kind = event.get("event")
            if kind == "insert":
                dcp = DCP(
                    id=str(event["id"]),
                    pattern=str(event["pattern"]),
                    ordering=str(event["ordering"]),
                    decision=str(event["decision"]),
                    exposure_index=int(event["exposure_index"]),
                    pathology=str(event["pathology"]),
                    source_correct=bool(event["source_correct"]),
                    source_encounter_id=str(event["source_encounter_id"]),
                    created_at=str(event.get("created_at", "")),
                )
                if dcp.exposure_index != len(self._order) + 1:
                    raise IntegrityError(
                        f"events.ndjson line {line_no}: exposure_index "
                        f"{dcp.exposure_index} breaks insertion order"
                    )
                if dcp.id not in vectors:
                    raise IntegrityError(
                        f"events.ndjson line {line_no}: no vector stored for {dcp.id}"
                    )
                self._dcps[dcp.id] = dcp
                self._order.append(dcp.id)
                self._index.add(dcp.id, vectors[dcp.id], dcp.pattern)
            elif kind == "retract":
                dcp_id = str(event["id"])
                if dcp_id not in self._dcps:
                    raise IntegrityError(
                        f"events.ndjson line {line_no}: retract of unknown id {dcp_id}"
                    )
                old = self._dcps[dcp_id]
                self._dcps[dcp_id] = replace(
                    old,
                    retracted=True,
                    retraction_reasons=old.retraction_reasons + (str(event.get("reason", "")),),
                )
            elif kind == "skip":
                self._skips.append(event)
            else:
                raise IntegrityError(f"events.ndjson line {line_no}: unknown event {kind!r}")

    def __len__(self) -> int:
        return len(self._order)

    @property
    def size(self) -> int:
        return len(self._order)

    @property
    def encounters_seen(self) -> int:
        return len(self._order) + len(self._skips)

    @property
    def skips(self) -> list[dict]:
        return list(self._skips)

    def get(self, dcp_id: str) -> DCP:
        if dcp_id not in self._dcps:
            raise LookupError(f"no DCP with id {dcp_id!r}")
        return self._dcps[dcp_id]

    def all_dcps(self) -> list[DCP]:
        return [self._dcps[i] for i in self._order]

    def _append_event(self, event: dict) -> None:
        with self.events_path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(event, sort_keys=True) + "\n")

    def insert(
        self,
        pattern: str,
        ordering: str,
        decision: str,
        pathology: str,
        source_correct: bool,
        source_encounter_id: str,
        gateway: Gateway,
    ) -> DCP:
        if not (pattern.strip() and ordering.strip() and decision.strip()):
            raise ValueError("all three DCP fields must be non-empty")
        exposure = len(self._order) + 1
        dcp = DCP(
            id=f"dcp-{exposure:04d}",
            pattern=pattern.strip(),
            ordering=ordering.strip(),
            decision=decision.strip(),
            exposure_index=exposure,
            pathology=pathology,
            source_correct=source_correct,
            source_encounter_id=source_encounter_id,
            created_at=_utc_now(),
        )
        vector = gateway.embed([dcp.pattern])[0]
        self._append_event(
            {
                "event": "insert",
                "id": dcp.id,
                "pattern": dcp.pattern,
                "ordering": dcp.ordering,
                "decision": dcp.decision,
                "exposure_index": dcp.exposure_index,
                "pathology": dcp.pathology,
                "source_correct": dcp.source_correct,
                "source_encounter_id": dcp.source_encounter_id,
                "created_at": dcp.created_at,
            }
        )
        with self.vectors_path.open("ab") as fh:
            write_vector_record(fh, dcp.id, vector)
        self._dcps[dcp.id] = dcp
        self._order.append(dcp.id)
        self._index.add(dcp.id, vector, dcp.pattern)
        return dcp

    def log_skip(self, encounter_id: str, reason: str) -> None:
        event = {
            "event": "skip",
            "encounter_id": encounter_id,
            "reason": reason,
            "created_at": _utc_now(),
        }
        self._append_event(event)
        self._skips.append(event)

    def consolidate(
        self,
        episode: "EpisodeResult",
        record: "EncounterRecord",
        feedback: str,
        gateway: Gateway,
        profile: ModelProfile | None = None,
        audit: list | None = None,
    ) -> DCP | None:
        """Distill one finished episode into a DCP and persist it.

        Generation gets one retry on a malformed reply; a second failure
        skips the encounter (logged, no exposure index consumed) so one
        bad consolidation cannot stall accrual.
        """
        profile = profile or ModelProfile.plain()
        bundle = render_consolidation_prompt(
            patient_input=record.presenting_complaint,
            entries=episode.entries,
            final_diagnosis=episode.final_diagnosis,
            ground_truth=record.ground_truth,
            correct=episode.correct,
            feedback=feedback,
            clinician_orders=render_clinician_orders(record.clinician_orders),
            profile=profile,
        )
        last_error: ConsolidationParseError | None = None
        for _attempt in range(2):
            reply = gateway.generate(bundle, audit=audit)
            try:
                pattern, ordering, decision = parse_dcp_text(reply)
            except ConsolidationParseError as exc:
                last_error = exc
                continue
            return self.insert(
                pattern=pattern,
                ordering=ordering,
                decision=decision,
                pathology=record.pathology,
                source_correct=episode.correct,
                source_encounter_id=record.id,
                gateway=gateway,
            )
        self.log_skip(record.id, f"consolidation parse failed twice: {last_error}")
        return None

    def _allowed_ids(self, snapshot_limit: int | None) -> list[str]:
        out = []
        for dcp_id in self._order:
            dcp = self._dcps[dcp_id]
            if dcp.retracted:
                continue
            if snapshot_limit is not None and dcp.exposure_index > snapshot_limit:
                continue
            out.append(dcp_id)
        return out

    def retrieve(
        self,
        query: str,
        gateway: Gateway,
        k: int = DEFAULT_RETRIEVAL_K,
        snapshot_limit: int | None = None,
        similarity_floor: float = SIMILARITY_FLOOR,
        encounter_id: str = "",
        step_index: int = -1,
    ) -> tuple[list[tuple[DCP, float]], RetrievalEvent]:
        """Rank non-retracted DCPs within the snapshot against a query.

        Results below the similarity floor are dropped; the event records
        exactly what was returned so evaluation-time retrieval is fully
        auditable.
        """
        allowed = self._allowed_ids(snapshot_limit)
        hits: list[tuple[DCP, float]] = []
        if allowed:
            query_vector = gateway.embed([query])[0]
            for dcp_id, sim, _payload in self._index.search(
                query_vector, k, allowed_keys=allowed
            ):
                if sim >= similarity_floor:
                    hits.append((self._dcps[dcp_id], sim))
        event = RetrievalEvent(
            encounter_id=encounter_id,
            step_index=step_index,
            query=query,
            returned=tuple((dcp.id, sim) for dcp, sim in hits),
            snapshot_limit=snapshot_limit,
        )
        return hits, event

    def snapshot_at(self, k: int) -> "DcpView":
        if k < 0 or k > len(self._order):
            raise ValueError(f"snapshot k={k} outside [0, {len(self._order)}]")
        return DcpView(repo=self, max_exposure=k)

    def list_dcps(
        self,
        pathology: str | None = None,
        source_correct: bool | None = None,
        exposure_range: tuple[int, int] | None = None,
        include_retracted: bool = True,
    ) -> list[DCP]:
        rows = []
        for dcp in self.all_dcps():
            if pathology is not None and dcp.pathology != pathology:
                continue
            if source_correct is not None and dcp.source_correct != source_correct:
                continue
            if exposure_range is not None and not (
                exposure_range[0] <= dcp.exposure_index <= exposure_range[1]
            ):
                continue
            if not include_retracted and dcp.retracted:
                continue
            rows.append(dcp)
        return rows

    def retract(self, dcp_id: str, reason: str) -> DCP:
        old = self.get(dcp_id)
        self._append_event(
            {"event": "retract", "id": dcp_id, "reason": reason, "created_at": _utc_now()}
        )
        updated = replace(
            old, retracted=True, retraction_reasons=old.retraction_reasons + (reason,)
        )
        self._dcps[dcp_id] = updated
        return updated


@dataclass(frozen=True)
class DcpView:
    """Read-only window onto the first max_exposure accrued DCPs."""

    repo: DcpRepository
    max_exposure: int

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(
            dcp.id for dcp in self.repo.all_dcps() if dcp.exposure_index <= self.max_exposure
        )

    def __len__(self) -> int:
        return len(self.ids)

    def retrieve(
        self,
        query: str,
        gateway: Gateway,
        k: int = DEFAULT_RETRIEVAL_K,
        similarity_floor: float = SIMILARITY_FLOOR,
        encounter_id: str = "",
        step_index: int = -1,
    ) -> tuple[list[tuple[DCP, float]], RetrievalEvent]:
        return self.repo.retrieve(
            query,
            gateway,
            k=k,
            snapshot_limit=self.max_exposure,
            similarity_floor=similarity_floor,
            encounter_id=encounter_id,
            step_index=step_index,
        )


def render_experience_observation(hits: Sequence[tuple[DCP, float]]) -> str:
    if not hits:
        return NO_EXPERIENCE
    blocks = []
    for i, (dcp, _sim) in enumerate(hits, 1):
        blocks.append(
            f"{i}. Experience Pattern: {dcp.pattern}\n"
            f"Test Ordering Experience: {dcp.ordering}\n"
            f"Diagnostic Decision Experience: {dcp.decision}"
        )
    return "Retrieved prior diagnostic experience:\n\n" + "\n\n".join(blocks)
