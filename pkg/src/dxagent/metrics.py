"""Quantitative analysis over finished episodes.

Set overlaps are scored after canonicalization so coding variants do not
register as disagreement. Scores that are ratios of small integers are
computed with a single division, which keeps them exactly equal to the
rational value a hand calculation gives.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .aliases import AliasTable, DEFAULT_ALIASES
from .canon import CanonMap
from .dcpstore import DcpRepository, RetrievalEvent
from .errors import IntegrityError
from .feedback import RulePack
from .protocol import WorkupEvent, parse_imaging_input, InvalidActionError
from .records import EncounterRecord
from .runner import EpisodeResult, EpisodeStatus


class MetricError(ValueError):
    pass


BROAD_PE = "PE"
BROAD_LAB = "Laboratory"
BROAD_IMAGING = "Imaging"

_KIND_TO_BROAD = {"pe": BROAD_PE, "lab": BROAD_LAB, "imaging": BROAD_IMAGING}


def accuracy(results: Sequence[EpisodeResult], strict: bool = True) -> float:
    """Fraction of correct episodes.

    strict counts every episode; strict=False drops BackendFailure from
    the denominator so infrastructure faults do not read as misdiagnoses.
    """
    if not results:
        raise MetricError("accuracy over empty result set is undefined")
    pool = (
        list(results)
        if strict
        else [r for r in results if r.status is not EpisodeStatus.BACKEND_FAILURE]
    )
    if not pool:
        raise MetricError("no scorable episodes after excluding backend failures")
    return sum(1 for r in pool if r.correct) / len(pool)


def _set_f1(a: frozenset, b: frozenset) -> float:
    if not a and not b:
        return 1.0
    if not a or not b:
        return 0.0
    tp = len(a & b)
    return 2 * tp / (len(a) + len(b))


def lab_set_f1(
    agent_labs: Iterable[str],
    record_labs: Iterable[str],
    canon_map: CanonMap | None = None,
) -> float:
    canon_map = canon_map or CanonMap.identity()
    return _set_f1(
        frozenset(canon_map.apply(n) for n in agent_labs),
        frozenset(canon_map.apply(n) for n in record_labs),
    )


def imaging_set_f1(
    agent_pairs: Iterable[tuple[str, str]],
    record_pairs: Iterable[tuple[str, str]],
    aliases: AliasTable | None = None,
) -> float:
    aliases = aliases or DEFAULT_ALIASES
    return _set_f1(
        frozenset(aliases.pair_key(m, r) for m, r in agent_pairs),
        frozenset(aliases.pair_key(m, r) for m, r in record_pairs),
    )


def _first_positions(order: Sequence[str]) -> dict[str, int]:
    positions: dict[str, int] = {}
    for i, item in enumerate(order):
        positions.setdefault(item, i)
    return positions


def order_concordance(agent_order: Sequence[str], reference_order: Sequence[str]) -> float:
    """Pairwise agreement with the reference ordering of broad workup types.

    Only types executed by both sides are compared; with fewer than two
    shared types the ordering question is vacuous and scores 1.
    """
    agent_pos = _first_positions(agent_order)
    ref_pos = _first_positions(reference_order)
    shared = sorted(set(agent_pos) & set(ref_pos), key=lambda t: ref_pos[t])
    if len(shared) < 2:
        return 1.0
    total = 0
    consistent = 0
    for i, a in enumerate(shared):
        for b in shared[i + 1 :]:
            total += 1
            if agent_pos[a] < agent_pos[b]:
                consistent += 1
    return consistent / total


def broad_type_order(trace: Sequence[WorkupEvent]) -> list[str]:
    order: list[str] = []
    for event in trace:
        broad = _KIND_TO_BROAD.get(event.kind)
        if broad and broad not in order:
            order.append(broad)
    return order


def agent_lab_names(trace: Sequence[WorkupEvent]) -> set[str]:
    return {name for event in trace if event.kind == "lab" for name in event.lab_names}


def agent_imaging_pairs(trace: Sequence[WorkupEvent]) -> set[tuple[str, str]]:
    return {(e.modality, e.region) for e in trace if e.kind == "imaging"}


def pe_timing_score(trace: Sequence[WorkupEvent]) -> int:
    kinds = [e.kind for e in trace]
    if "pe" not in kinds:
        return 0
    return 100 if kinds[0] == "pe" else 50


def lab_adherence_score(
    agent_labs: Iterable[str],
    pack: RulePack,
    canon_map: CanonMap | None = None,
) -> float:
    """Two-tier coverage on a 0-100 scale.

    Primary categories weigh 1.0, secondary 0.5 with their total capped
    at the primary maximum. Computed in integer half-units so the result
    is the exact rational score.
    """
    canon_map = canon_map or CanonMap.identity()
    requested = {canon_map.apply(n) for n in agent_labs}
    n_primary = len(pack.primary_labs)
    n_secondary = len(pack.secondary_labs)
    covered_primary = len(pack.primary_labs & requested)
    covered_secondary = len(pack.secondary_labs & requested)
    max_halves = 2 * n_primary + min(n_secondary, 2 * n_primary)
    if max_halves == 0:
        return 100.0
    achieved_halves = 2 * covered_primary + min(covered_secondary, 2 * n_primary)
    return 100 * achieved_halves / max_halves


def imaging_adherence_score(
    trace: Sequence[WorkupEvent],
    pack: RulePack,
    aliases: AliasTable | None = None,
) -> int:
    aliases = aliases or DEFAULT_ALIASES
    first = next((e for e in trace if e.kind == "imaging"), None)
    if first is None:
        return 0
    key = aliases.pair_key(first.modality, first.region)
    if key in {aliases.pair_key(m, r) for m, r in pack.preferred_imaging}:
        return 100
    if key in {aliases.pair_key(m, r) for m, r in pack.acceptable_imaging}:
        return 50
    return 0


@dataclass(frozen=True)
class ConsistencyReport:
    pe_agreement: int
    lab_f1: float
    imaging_f1: float
    order_concordance: float
    overall: float


@dataclass(frozen=True)
class AdherenceReport:
    pe_timing: int
    lab_adherence: float
    imaging_adherence: int
    overall: float


_ORDER_ACTIONS = {
    "physical examination": "pe",
    "laboratory tests": "lab",
    "imaging": "imaging",
}


def workup_events_from_orders(
    orders: Sequence, aliases: AliasTable | None = None
) -> list[WorkupEvent]:
    """Reduce documented clinician orders to workup events.

    Orders whose action is not one of the three evaluation tools, or
    whose imaging input cannot be parsed, are ignored rather than
    treated as errors: charts carry order types outside this scope.
    """
    aliases = aliases or DEFAULT_ALIASES
    events: list[WorkupEvent] = []
    for order in orders:
        kind = _ORDER_ACTIONS.get(order.action.strip().lower())
        if kind == "pe":
            events.append(WorkupEvent(kind="pe"))
        elif kind == "lab":
            names = tuple(n.strip() for n in order.input.split(",") if n.strip())
            if names:
                events.append(WorkupEvent(kind="lab", lab_names=names))
        elif kind == "imaging":
            try:
                modality, region = parse_imaging_input(order.input, aliases)
            except InvalidActionError:
                continue
            events.append(WorkupEvent(kind="imaging", modality=modality, region=region))
    return events


def reference_workup_events(
    record: EncounterRecord, aliases: AliasTable | None = None
) -> list[WorkupEvent]:
    """The record's documented workup; falls back to section order."""
    events = workup_events_from_orders(record.clinician_orders, aliases)
    if events:
        return events
    fallback: list[WorkupEvent] = []
    if record.physical_exam is not None:
        fallback.append(WorkupEvent(kind="pe"))
    if record.labs:
        fallback.append(
            WorkupEvent(kind="lab", lab_names=tuple(lab.name for lab in record.labs))
        )
    for item in record.imaging:
        fallback.append(WorkupEvent(kind="imaging", modality=item.modality, region=item.region))
    return fallback


def consistency_report(
    result: EpisodeResult,
    record: EncounterRecord,
    canon_map: CanonMap | None = None,
    aliases: AliasTable | None = None,
) -> ConsistencyReport:
    aliases = aliases or DEFAULT_ALIASES
    trace = result.workup_trace
    pe_agreement = 1 if any(e.kind == "pe" for e in trace) else 0
    lab_f1 = lab_set_f1(agent_lab_names(trace), (lab.name for lab in record.labs), canon_map)
    imaging_f1 = imaging_set_f1(
        agent_imaging_pairs(trace),
        ((item.modality, item.region) for item in record.imaging),
        aliases,
    )
    concordance = order_concordance(
        broad_type_order(trace), broad_type_order(reference_workup_events(record, aliases))
    )
    overall = (pe_agreement + lab_f1 + imaging_f1 + concordance) / 4
    return ConsistencyReport(pe_agreement, lab_f1, imaging_f1, concordance, overall)


def adherence_report(
    result: EpisodeResult,
    pack: RulePack,
    canon_map: CanonMap | None = None,
    aliases: AliasTable | None = None,
) -> AdherenceReport:
    trace = result.workup_trace
    pe = pe_timing_score(trace)
    lab = lab_adherence_score(agent_lab_names(trace), pack, canon_map)
    imaging = imaging_adherence_score(trace, pack, aliases)
    overall = (pe + lab + imaging) / 3
    return AdherenceReport(pe, lab, imaging, overall)


@dataclass(frozen=True)
class BurdenSplit:
    low: frozenset[str]
    high: frozenset[str]
    median: float


def stratify_by_burden(
    baseline_results: Sequence[EpisodeResult] | Mapping[str, int],
) -> BurdenSplit:
    """Median split of baseline step footprints; ties go to the low stratum."""
    if isinstance(baseline_results, Mapping):
        footprints = dict(baseline_results)
    else:
        footprints = {r.encounter_id: r.steps_used for r in baseline_results}
    if not footprints:
        raise MetricError("cannot stratify an empty result set")
    median = statistics.median(footprints.values())
    low = frozenset(k for k, v in footprints.items() if v <= median)
    high = frozenset(k for k, v in footprints.items() if v > median)
    return BurdenSplit(low=low, high=high, median=float(median))


def _index_by_id(results: Sequence[EpisodeResult], label: str) -> dict[str, EpisodeResult]:
    indexed: dict[str, EpisodeResult] = {}
    for result in results:
        if result.encounter_id in indexed:
            raise MetricError(f"{label}: duplicate encounter id {result.encounter_id!r}")
        indexed[result.encounter_id] = result
    return indexed


def improvement_cases(
    with_dcp: Sequence[EpisodeResult], without_dcp: Sequence[EpisodeResult]
) -> frozenset[str]:
    """Encounters where experience retrieval plausibly fixed the diagnosis.

    Requires: with-DCP correct, without-DCP incorrect, and at least one
    retrieval during the with-DCP episode.
    """
    by_with = _index_by_id(with_dcp, "with_dcp")
    by_without = _index_by_id(without_dcp, "without_dcp")
    if set(by_with) != set(by_without):
        diff = sorted(set(by_with) ^ set(by_without))
        raise MetricError(f"result sets cover different encounters: {diff}")
    return frozenset(
        eid
        for eid, w in by_with.items()
        if w.correct and not by_without[eid].correct and w.retrieval_events
    )


@dataclass(frozen=True)
class ProvenanceReport:
    rate_improvement: float | None
    rate_all: float | None
    delta: float | None
    improvement_hits: int
    improvement_incorrect_hits: int
    all_hits: int
    all_incorrect_hits: int

    @property
    def no_data(self) -> bool:
        return self.all_hits == 0


def provenance_enrichment(
    retrieval_logs: Sequence[RetrievalEvent],
    improvement_ids: Iterable[str],
    repo: DcpRepository,
) -> ProvenanceReport:
    """Incorrect-source share of retrieved DCPs, improvement cases vs pooled.

    Each hit counts once per retrieval event. Every hit must resolve in
    the repository; a dangling id means logs and repo are out of sync.
    """
    improvement = set(improvement_ids)
    all_hits = all_incorrect = imp_hits = imp_incorrect = 0
    for event in retrieval_logs:
        for dcp_id, _sim in event.returned:
            try:
                dcp = repo.get(dcp_id)
            except LookupError as exc:
                raise IntegrityError(
                    f"retrieval log references unknown DCP {dcp_id!r} "
                    f"(encounter {event.encounter_id!r})"
                ) from exc
            incorrect = not dcp.source_correct
            all_hits += 1
            all_incorrect += incorrect
            if event.encounter_id in improvement:
                imp_hits += 1
                imp_incorrect += incorrect
    rate_all = all_incorrect / all_hits if all_hits else None
    rate_improvement = imp_incorrect / imp_hits if imp_hits else None
    delta = (
        rate_improvement - rate_all
        if rate_improvement is not None and rate_all is not None
        else None
    )
    return ProvenanceReport(
        rate_improvement=rate_improvement,
        rate_all=rate_all,
        delta=delta,
        improvement_hits=imp_hits,
        improvement_incorrect_hits=imp_incorrect,
        all_hits=all_hits,
        all_incorrect_hits=all_incorrect,
    )


def learning_curve(
    eval_fn,
    snapshot_ks: Sequence[int],
    repo_size: int | None = None,
) -> list[tuple[int, float]]:
    """Accuracy of a fixed evaluation under nested repository snapshots."""
    if list(snapshot_ks) != sorted(snapshot_ks):
        raise MetricError("snapshot ks must be ascending")
    points = []
    for k in snapshot_ks:
        if k < 0:
            raise MetricError(f"snapshot k={k} is negative")
        if repo_size is not None and k > repo_size:
            raise MetricError(f"snapshot k={k} exceeds repository size {repo_size}")
        points.append((k, eval_fn(k)))
    return points


@dataclass(frozen=True)
class UsageReport:
    breadth: Mapping[str, int]
    window_rate_all: float | None
    window_rate_correcting: float | None
    total_hits: int
    correcting_hits: int

    @property
    def no_data(self) -> bool:
        return self.total_hits == 0


def retrieval_usage(
    retrieval_logs: Sequence[RetrievalEvent],
    repo: DcpRepository,
    window: tuple[int, int],
    error_correcting_ids: Iterable[str],
) -> UsageReport:
    """Per-DCP reuse breadth and hit share of an exposure window."""
    if not retrieval_logs:
        return UsageReport(
            breadth={dcp.id: 0 for dcp in repo.all_dcps()},
            window_rate_all=None,
            window_rate_correcting=None,
            total_hits=0,
            correcting_hits=0,
        )
    lo, hi = window
    if lo < 1 or hi > repo.size or lo > hi:
        raise MetricError(f"window {window} outside exposure range [1, {repo.size}]")
    correcting = set(error_correcting_ids)
    encounters_per_dcp: dict[str, set[str]] = {dcp.id: set() for dcp in repo.all_dcps()}
    total = window_hits = correcting_total = correcting_window = 0
    for event in retrieval_logs:
        for dcp_id, _sim in event.returned:
            try:
                dcp = repo.get(dcp_id)
            except LookupError as exc:
                raise IntegrityError(
                    f"retrieval log references unknown DCP {dcp_id!r}"
                ) from exc
            encounters_per_dcp[dcp_id].add(event.encounter_id)
            in_window = lo <= dcp.exposure_index <= hi
            total += 1
            window_hits += in_window
            if event.encounter_id in correcting:
                correcting_total += 1
                correcting_window += in_window
    return UsageReport(
        breadth={dcp_id: len(ids) for dcp_id, ids in encounters_per_dcp.items()},
        window_rate_all=window_hits / total if total else None,
        window_rate_correcting=(
            correcting_window / correcting_total if correcting_total else None
        ),
        total_hits=total,
        correcting_hits=correcting_total,
    )


def compliance_rates(results: Sequence[EpisodeResult]) -> dict[str, float]:
    if not results:
        raise MetricError("compliance rates over empty result set")
    keys = sorted({key for r in results for key in r.compliance})
    return {
        key: sum(1 for r in results if r.compliance.get(key, False)) / len(results)
        for key in keys
    }


def evaluation_report(
    results: Sequence[EpisodeResult],
    records_by_id: Mapping[str, EncounterRecord],
    packs: Mapping[str, RulePack],
    canon_map: CanonMap | None = None,
    aliases: AliasTable | None = None,
    strict_denominator: bool = True,
) -> dict:
    """Cohort-level report: accuracy, consistency, adherence, compliance.

    Per-encounter rows are sorted by id so the report is deterministic
    regardless of execution order.
    """
    if not results:
        raise MetricError("cannot report on empty result set")
    ordered = sorted(results, key=lambda r: r.encounter_id)
    rows = []
    consistency_values: list[ConsistencyReport] = []
    adherence_values: list[AdherenceReport] = []
    for result in ordered:
        record = records_by_id.get(result.encounter_id)
        row: dict = {
            "encounter_id": result.encounter_id,
            "pathology": result.pathology,
            "status": result.status.value,
            "correct": result.correct,
            "steps_used": result.steps_used,
            "repairs": result.repairs,
            "retrievals": len(result.retrieval_events),
        }
        if record is not None:
            consistency = consistency_report(result, record, canon_map, aliases)
            consistency_values.append(consistency)
            row["consistency_overall"] = consistency.overall
            pack = packs.get(result.pathology)
            if pack is not None:
                adherence = adherence_report(result, pack, canon_map, aliases)
                adherence_values.append(adherence)
                row["adherence_overall"] = adherence.overall
        rows.append(row)
    report = {
        "n": len(ordered),
        "accuracy": accuracy(ordered, strict=strict_denominator),
        "strict_denominator": strict_denominator,
        "status_counts": {
            status.value: sum(1 for r in ordered if r.status is status)
            for status in EpisodeStatus
            if any(r.status is status for r in ordered)
        },
        "mean_steps": sum(r.steps_used for r in ordered) / len(ordered),
        "compliance_rates": compliance_rates(ordered),
        "per_encounter": rows,
    }
    if consistency_values:
        n = len(consistency_values)
        report["consistency"] = {
            "pe_agreement": sum(c.pe_agreement for c in consistency_values) / n,
            "lab_f1": sum(c.lab_f1 for c in consistency_values) / n,
            "imaging_f1": sum(c.imaging_f1 for c in consistency_values) / n,
            "order_concordance": sum(c.order_concordance for c in consistency_values) / n,
            "overall": sum(c.overall for c in consistency_values) / n,
        }
    if adherence_values:
        n = len(adherence_values)
        report["adherence"] = {
            "pe_timing": sum(a.pe_timing for a in adherence_values) / n,
            "lab_adherence": sum(a.lab_adherence for a in adherence_values) / n,
            "imaging_adherence": sum(a.imaging_adherence for a in adherence_values) / n,
            "overall": sum(a.overall for a in adherence_values) / n,
        }
    return report
