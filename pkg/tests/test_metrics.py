import random
from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import embed_gateway
from dxagent.canon import CanonMap
from dxagent.dcpstore import DcpRepository, RetrievalEvent
from dxagent.errors import IntegrityError
from dxagent.feedback import RulePack
from dxagent.metrics import (
    BROAD_IMAGING,
    BROAD_LAB,
    BROAD_PE,
    MetricError,
    accuracy,
    adherence_report,
    agent_imaging_pairs,
    agent_lab_names,
    broad_type_order,
    compliance_rates,
    consistency_report,
    evaluation_report,
    imaging_adherence_score,
    imaging_set_f1,
    improvement_cases,
    lab_adherence_score,
    lab_set_f1,
    learning_curve,
    order_concordance,
    pe_timing_score,
    provenance_enrichment,
    reference_workup_events,
    retrieval_usage,
    stratify_by_burden,
    workup_events_from_orders,
)
from dxagent.protocol import WorkupEvent
from dxagent.records import WorkupAction, record_from_json
from dxagent.runner import EpisodeResult, EpisodeStatus
from oracles import (
    concordance_oracle,
    f1_oracle,
    imaging_adherence_oracle,
    lab_adherence_oracle,
    pe_timing_oracle,
)

TEMPLATES = {code: code for code in (
    "pe_missing", "pe_not_first", "labs_missing", "labs_primary_missing",
    "imaging_missing", "imaging_first_choice", "efficiency",
)}


def pack_with(primary=(), secondary=(), preferred=(), acceptable=(), pathology="pancreatitis"):
    return RulePack(
        pathology=pathology,
        synonyms=(pathology,),
        primary_labs=frozenset(primary),
        secondary_labs=frozenset(secondary),
        preferred_imaging=frozenset(preferred),
        acceptable_imaging=frozenset(acceptable),
        feedback_templates=dict(TEMPLATES),
    )


def res(
    eid,
    correct,
    steps=3,
    status=EpisodeStatus.DIAGNOSED,
    trace=(),
    retrievals=(),
    compliance=None,
):
    return EpisodeResult(
        encounter_id=eid,
        pathology="appendicitis",
        status=status,
        final_diagnosis="x" if correct else "y",
        correct=correct,
        steps_used=steps,
        workup_trace=list(trace),
        retrieval_events=list(retrievals),
        compliance=dict(compliance or {}),
    )


def test_accuracy_exact():
    results = [res("a", True), res("b", False), res("c", True), res("d", True)]
    assert accuracy(results) == 0.75
    assert accuracy(results) == float(Fraction(3, 4))


def test_accuracy_denominator_policy():
    results = [
        res("a", True),
        res("b", False, status=EpisodeStatus.BACKEND_FAILURE),
    ]
    assert accuracy(results, strict=True) == 0.5
    assert accuracy(results, strict=False) == 1.0
    with pytest.raises(MetricError, match="empty result set"):
        accuracy([])
    only_failures = [res("a", False, status=EpisodeStatus.BACKEND_FAILURE)]
    with pytest.raises(MetricError, match="no scorable episodes"):
        accuracy(only_failures, strict=False)


def test_lab_set_f1_worked_example():
    score = lab_set_f1({"CBC", "Lipase"}, {"CBC", "Lipase", "CMP"})
    assert score == float(Fraction(4, 5))
    assert score == 0.8


def test_lab_set_f1_canon_collapses_coding():
    canon = CanonMap({"wbc": "cbc"}, version="t")
    assert lab_set_f1({"WBC"}, {"CBC"}, canon) == 1.0
    assert lab_set_f1({"WBC"}, {"CBC"}) == 0.0


def test_set_f1_edge_cases():
    assert lab_set_f1(set(), set()) == 1.0
    assert lab_set_f1({"CBC"}, set()) == 0.0
    assert lab_set_f1(set(), {"CBC"}) == 0.0
    assert lab_set_f1({"a"}, {"b"}) == 0.0


def test_imaging_set_f1_worked_example():
    agent = {("CT", "Abdomen")}
    record = {("CT", "Abdomen"), ("Ultrasound", "Abdomen")}
    assert imaging_set_f1(agent, record) == float(Fraction(2, 3))
    # alias spellings resolve to the same pair keys
    assert imaging_set_f1({("ct scan", "abdominal")}, record) == float(Fraction(2, 3))


def test_order_concordance_worked_example():
    agent = [BROAD_LAB, BROAD_PE, BROAD_IMAGING]
    ref = [BROAD_PE, BROAD_LAB, BROAD_IMAGING]
    assert order_concordance(agent, ref) == float(Fraction(2, 3))
    assert order_concordance(ref, ref) == 1.0
    assert order_concordance(list(reversed(ref)), ref) == 0.0
    assert order_concordance([BROAD_PE], ref) == 1.0
    assert order_concordance([], ref) == 1.0
    assert order_concordance(["Other"], ref) == 1.0
    # repeats collapse to first occurrence
    assert order_concordance([BROAD_PE, BROAD_LAB, BROAD_PE], [BROAD_PE, BROAD_LAB]) == 1.0


def test_order_concordance_all_permutations():
    import itertools

    ref = [BROAD_PE, BROAD_LAB, BROAD_IMAGING]
    for perm in itertools.permutations(ref):
        assert order_concordance(list(perm), ref) == float(
            concordance_oracle(list(perm), ref)
        )


def test_broad_type_order_and_extractors():
    trace = [
        WorkupEvent(kind="lab", lab_names=("CBC",)),
        WorkupEvent(kind="pe"),
        WorkupEvent(kind="lab", lab_names=("CRP", "CBC")),
        WorkupEvent(kind="imaging", modality="CT", region="Abdomen"),
    ]
    assert broad_type_order(trace) == [BROAD_LAB, BROAD_PE, BROAD_IMAGING]
    assert agent_lab_names(trace) == {"CBC", "CRP"}
    assert agent_imaging_pairs(trace) == {("CT", "Abdomen")}
    assert broad_type_order([]) == []


def test_pe_timing_score():
    pe = WorkupEvent(kind="pe")
    lab = WorkupEvent(kind="lab", lab_names=("CBC",))
    assert pe_timing_score([pe, lab]) == 100
    assert pe_timing_score([lab, pe]) == 50
    assert pe_timing_score([lab]) == 0
    assert pe_timing_score([]) == 0


def test_lab_adherence_worked_examples():
    pack = pack_with(primary={"lipase"}, secondary={"cbc", "cmp", "lft"})
    assert lab_adherence_score({"Lipase", "CBC"}, pack) == 75.0
    assert lab_adherence_score({"cbc", "cmp", "lft"}, pack) == 50.0
    assert lab_adherence_score({"lipase", "cbc", "cmp", "lft"}, pack) == 100.0
    assert lab_adherence_score(set(), pack) == 0.0
    assert lab_adherence_score({"Lipase"}, pack_with()) == 100.0


def test_lab_adherence_secondary_cap():
    pack = pack_with(primary={"p1"}, secondary={"s1", "s2", "s3", "s4"})
    # max halves: 2*1 + min(4, 2) = 4; all four secondary still cap at 2
    assert lab_adherence_score({"s1", "s2", "s3", "s4"}, pack) == 50.0
    assert lab_adherence_score({"p1"}, pack) == 50.0
    assert lab_adherence_score({"p1", "s1", "s2"}, pack) == 100.0


def test_lab_adherence_canon():
    pack = pack_with(primary={"cbc"})
    canon = CanonMap({"complete blood count": "cbc"}, version="t")
    assert lab_adherence_score({"Complete Blood Count"}, pack, canon) == 100.0


def test_imaging_adherence_score():
    pack = pack_with(
        preferred={("CT", "Abdomen")}, acceptable={("Ultrasound", "Abdomen")}
    )
    ct = WorkupEvent(kind="imaging", modality="ct scan", region="abd")
    us = WorkupEvent(kind="imaging", modality="US", region="Abdomen")
    xr = WorkupEvent(kind="imaging", modality="X-ray", region="Chest")
    pe = WorkupEvent(kind="pe")
    assert imaging_adherence_score([pe, ct, xr], pack) == 100
    assert imaging_adherence_score([us, ct], pack) == 50
    assert imaging_adherence_score([xr], pack) == 0
    assert imaging_adherence_score([pe], pack) == 0
    assert isinstance(imaging_adherence_score([ct], pack), int)


def test_randomized_against_oracles():
    rng = random.Random(2024)
    labs = [f"lab{i}" for i in range(8)]
    types = [BROAD_PE, BROAD_LAB, BROAD_IMAGING, "Other"]
    for _ in range(150):
        a = set(rng.sample(labs, rng.randint(0, 6)))
        b = set(rng.sample(labs, rng.randint(0, 6)))
        assert lab_set_f1(a, b) == float(f1_oracle(a, b))

        agent = [rng.choice(types) for _ in range(rng.randint(0, 5))]
        ref = [rng.choice(types) for _ in range(rng.randint(0, 5))]
        assert order_concordance(agent, ref) == float(concordance_oracle(agent, ref))

        kinds = [rng.choice(["pe", "lab", "imaging"]) for _ in range(rng.randint(0, 4))]
        trace = [WorkupEvent(kind=k) for k in kinds]
        assert pe_timing_score(trace) == pe_timing_oracle(kinds)

        primary = set(rng.sample(labs, rng.randint(0, 3)))
        secondary = set(rng.sample([l for l in labs if l not in primary], rng.randint(0, 4)))
        requested = set(rng.sample(labs, rng.randint(0, 8)))
        pack = pack_with(primary=primary, secondary=secondary)
        assert lab_adherence_score(requested, pack) == float(
            lab_adherence_oracle(requested, primary, secondary)
        )


@given(
    st.sets(st.sampled_from("abcdefgh"), max_size=6),
    st.sets(st.sampled_from("abcdefgh"), max_size=6),
)
def test_f1_properties(a, b):
    score = lab_set_f1(a, b)
    assert 0.0 <= score <= 1.0
    assert score == lab_set_f1(b, a)
    assert score == float(f1_oracle(a, b))


@given(
    st.lists(st.sampled_from([BROAD_PE, BROAD_LAB, BROAD_IMAGING, "O"]), max_size=6),
    st.lists(st.sampled_from([BROAD_PE, BROAD_LAB, BROAD_IMAGING, "O"]), max_size=6),
)
def test_concordance_properties(agent, ref):
    score = order_concordance(agent, ref)
    assert 0.0 <= score <= 1.0
    assert score == float(concordance_oracle(agent, ref))


def test_workup_events_from_orders():
    orders = [
        WorkupAction(action="Physical Examination", input=""),
        WorkupAction(action="Laboratory Tests", input="CBC, CRP"),
        WorkupAction(action="Imaging", input="modality=CT, region=Abdomen"),
        WorkupAction(action="Consult Surgery", input=""),
        WorkupAction(action="Imaging", input="interpretive dance"),
        WorkupAction(action="Laboratory Tests", input="  ,  "),
    ]
    events = workup_events_from_orders(orders)
    assert [e.kind for e in events] == ["pe", "lab", "imaging"]
    assert events[1].lab_names == ("CBC", "CRP")
    assert (events[2].modality, events[2].region) == ("CT", "Abdomen")


def test_reference_workup_events(record, canon):
    events = reference_workup_events(record)
    assert [e.kind for e in events] == ["pe", "lab", "imaging"]
    no_orders = record_from_json(
        {
            "id": "enc-f",
            "presenting_complaint": "pain",
            "pathology": "appendicitis",
            "ground_truth": "Acute appendicitis",
            "physical_exam": "Soft abdomen.",
            "labs": [{"name": "WBC", "value": "12"}],
            "imaging": [
                {"modality": "CT", "region": "Abdomen", "report": "Normal."},
                {"modality": "Ultrasound", "region": "Abdomen", "report": "Normal."},
            ],
        },
        canon,
    )
    fallback = reference_workup_events(no_orders)
    assert [e.kind for e in fallback] == ["pe", "lab", "imaging", "imaging"]
    assert fallback[1].lab_names == ("WBC",)
    minimal = record_from_json(
        {
            "id": "enc-m",
            "presenting_complaint": "pain",
            "pathology": "appendicitis",
            "ground_truth": "Acute appendicitis",
        },
        canon,
    )
    assert reference_workup_events(minimal) == []


def test_consistency_report_perfect_match(record, canon):
    trace = [
        WorkupEvent(kind="pe"),
        WorkupEvent(kind="lab", lab_names=("WBC", "CRP", "Lipase")),
        WorkupEvent(kind="imaging", modality="CT", region="Abdomen"),
        WorkupEvent(kind="imaging", modality="Ultrasound", region="Abdomen"),
    ]
    report = consistency_report(res("enc-001", True, trace=trace), record, canon)
    assert report.pe_agreement == 1
    assert report.lab_f1 == 1.0
    assert report.imaging_f1 == 1.0
    assert report.order_concordance == 1.0
    assert report.overall == 1.0


def test_consistency_report_partial(record, canon):
    trace = [
        WorkupEvent(kind="lab", lab_names=("CBC",)),
        WorkupEvent(kind="pe"),
    ]
    report = consistency_report(res("enc-001", True, trace=trace), record, canon)
    assert report.pe_agreement == 1
    # CBC canonicalizes onto the WBC row: 1 shared of 1 vs 3
    assert report.lab_f1 == float(Fraction(2, 4))
    assert report.imaging_f1 == 0.0
    # agent did Lab before PE against reference PE, Lab, Imaging
    assert report.order_concordance == 0.0
    assert report.overall == (1 + 0.5 + 0.0 + 0.0) / 4


def test_adherence_report_exact_mean(record, canon, packs):
    pack = packs["appendicitis"]
    trace = [
        WorkupEvent(kind="pe"),
        WorkupEvent(kind="lab", lab_names=("CBC", "CRP", "CMP", "Urinalysis")),
        WorkupEvent(kind="imaging", modality="CT", region="Abdomen"),
    ]
    report = adherence_report(res("enc-001", True, trace=trace), pack, canon)
    assert report.pe_timing == 100
    assert report.lab_adherence == 100.0
    assert report.imaging_adherence == 100
    assert report.overall == 100.0
    partial = adherence_report(
        res("enc-001", True, trace=[WorkupEvent(kind="lab", lab_names=("CBC",))]),
        pack,
        canon,
    )
    assert partial.pe_timing == 0
    # one of two primaries in half-units: 2 of max 2*2 + min(2, 4) = 6
    assert partial.lab_adherence == float(Fraction(200, 6))
    assert partial.imaging_adherence == 0
    assert partial.overall == (0 + partial.lab_adherence + 0) / 3


def test_stratify_by_burden():
    split = stratify_by_burden({"a": 2, "b": 3, "c": 5, "d": 7})
    assert split.median == 4.0
    assert split.low == frozenset({"a", "b"})
    assert split.high == frozenset({"c", "d"})
    tied = stratify_by_burden({"a": 3, "b": 3, "c": 9})
    assert tied.median == 3.0
    assert tied.low == frozenset({"a", "b"})
    from_results = stratify_by_burden([res("a", True, steps=2), res("b", True, steps=8)])
    assert from_results.low == frozenset({"a"})
    with pytest.raises(MetricError, match="empty"):
        stratify_by_burden({})


def fake_event(eid, returned, step=2):
    return RetrievalEvent(
        encounter_id=eid,
        step_index=step,
        query="q",
        returned=tuple((i, 0.9) for i in returned),
    )


def test_improvement_cases():
    with_dcp = [
        res("a", True, retrievals=[fake_event("a", ["dcp-0001"])]),
        res("b", True),
        res("c", False, retrievals=[fake_event("c", ["dcp-0001"])]),
        res("d", True, retrievals=[fake_event("d", ["dcp-0002"])]),
    ]
    without = [res("a", False), res("b", False), res("c", False), res("d", True)]
    # a: flipped with retrieval; b: flipped but never retrieved; c: still wrong;
    # d: was already right
    assert improvement_cases(with_dcp, without) == frozenset({"a"})


def test_improvement_cases_input_validation():
    with pytest.raises(MetricError, match="duplicate encounter id 'a'"):
        improvement_cases([res("a", True), res("a", True)], [res("a", False)])
    with pytest.raises(MetricError, match=r"different encounters: \['b', 'c'\]"):
        improvement_cases([res("a", True), res("b", True)], [res("a", False), res("c", False)])


def seeded_repo(tmp_path, flags):
    repo = DcpRepository(tmp_path / "repo")
    gateway = embed_gateway()
    for i, source_correct in enumerate(flags, 1):
        repo.insert(
            pattern=f"pattern {i}",
            ordering="o",
            decision="d",
            pathology="appendicitis",
            source_correct=source_correct,
            source_encounter_id=f"src-{i}",
            gateway=gateway,
        )
    return repo


def test_provenance_enrichment(tmp_path):
    repo = seeded_repo(tmp_path, [False, False, True, True])
    logs = [
        fake_event("imp-1", ["dcp-0001", "dcp-0002", "dcp-0003"]),
        fake_event("o1", ["dcp-0003", "dcp-0004", "dcp-0004"]),
        fake_event("o2", ["dcp-0003", "dcp-0003", "dcp-0004"]),
        fake_event("o3", ["dcp-0001", "dcp-0004", "dcp-0003"]),
    ]
    report = provenance_enrichment(logs, {"imp-1"}, repo)
    assert report.improvement_hits == 3
    assert report.improvement_incorrect_hits == 2
    assert report.all_hits == 12
    assert report.all_incorrect_hits == 3
    assert report.rate_improvement == float(Fraction(2, 3))
    assert report.rate_all == 0.25
    assert report.delta == pytest.approx(float(Fraction(5, 12)), abs=1e-12)
    assert report.no_data is False


def test_provenance_no_data_and_dangling(tmp_path):
    repo = seeded_repo(tmp_path, [True])
    empty = provenance_enrichment([], {"x"}, repo)
    assert empty.no_data is True
    assert empty.rate_all is None and empty.rate_improvement is None and empty.delta is None
    with pytest.raises(IntegrityError, match="unknown DCP 'dcp-0099'"):
        provenance_enrichment([fake_event("e", ["dcp-0099"])], set(), repo)


def test_learning_curve():
    calls = []

    def eval_fn(k):
        calls.append(k)
        return {0: 0.5, 3: 0.7, 6: 0.75}[k]

    points = learning_curve(eval_fn, [0, 3, 6], repo_size=6)
    assert points == [(0, 0.5), (3, 0.7), (6, 0.75)]
    assert calls == [0, 3, 6]
    with pytest.raises(MetricError, match="ascending"):
        learning_curve(eval_fn, [3, 0])
    with pytest.raises(MetricError, match="negative"):
        learning_curve(eval_fn, [-1, 2])
    with pytest.raises(MetricError, match="exceeds repository size"):
        learning_curve(eval_fn, [0, 9], repo_size=6)


def test_retrieval_usage(tmp_path):
    repo = seeded_repo(tmp_path, [True] * 5)
    logs = [
        fake_event("e1", ["dcp-0003", "dcp-0001"]),
        fake_event("e1", ["dcp-0002"]),
        fake_event("e2", ["dcp-0003", "dcp-0004", "dcp-0005"]),
        fake_event("e3", ["dcp-0004", "dcp-0005", "dcp-0004", "dcp-0005"]),
    ]
    report = retrieval_usage(logs, repo, window=(1, 2), error_correcting_ids={"e1"})
    assert report.total_hits == 10
    assert report.window_rate_all == 0.2
    assert report.breadth == {
        "dcp-0001": 1,
        "dcp-0002": 1,
        "dcp-0003": 2,
        "dcp-0004": 2,
        "dcp-0005": 2,
    }
    assert report.correcting_hits == 3
    assert report.window_rate_correcting == float(Fraction(2, 3))
    assert report.no_data is False


def test_retrieval_usage_edge_cases(tmp_path):
    repo = seeded_repo(tmp_path, [True, True])
    empty = retrieval_usage([], repo, window=(0, 99), error_correcting_ids=set())
    assert empty.no_data is True
    assert empty.breadth == {"dcp-0001": 0, "dcp-0002": 0}
    assert empty.window_rate_all is None
    with pytest.raises(MetricError, match=r"window \(0, 2\) outside exposure range \[1, 2\]"):
        retrieval_usage([fake_event("e", ["dcp-0001"])], repo, (0, 2), set())
    with pytest.raises(IntegrityError):
        retrieval_usage([fake_event("e", ["dcp-0042"])], repo, (1, 2), set())


def test_compliance_rates():
    results = [
        res("a", True, compliance={"physical_exam": True, "labs": False}),
        res("b", True, compliance={"physical_exam": True, "labs": True}),
    ]
    rates = compliance_rates(results)
    assert rates == {"physical_exam": 1.0, "labs": 0.5}
    with pytest.raises(MetricError):
        compliance_rates([])


def test_evaluation_report_structure(record, canon, packs):
    trace = [
        WorkupEvent(kind="pe"),
        WorkupEvent(kind="lab", lab_names=("CBC", "CRP")),
        WorkupEvent(kind="imaging", modality="CT", region="Abdomen"),
    ]
    results = [
        res("enc-002", False, steps=7, compliance={"physical_exam": False}),
        res("enc-001", True, steps=3, trace=trace, compliance={"physical_exam": True}),
    ]
    report = evaluation_report(results, {"enc-001": record}, packs, canon)
    assert report["n"] == 2
    assert report["accuracy"] == 0.5
    assert report["strict_denominator"] is True
    assert report["status_counts"] == {"Diagnosed": 2}
    assert abs(report["mean_steps"] - 5.0) <= 1e-12
    assert report["compliance_rates"]["physical_exam"] == 0.5
    ids = [row["encounter_id"] for row in report["per_encounter"]]
    assert ids == ["enc-001", "enc-002"]
    assert "consistency_overall" in report["per_encounter"][0]
    assert "consistency_overall" not in report["per_encounter"][1]
    assert "adherence_overall" in report["per_encounter"][0]
    assert report["consistency"]["overall"] == report["per_encounter"][0]["consistency_overall"]
    assert report["adherence"]["pe_timing"] == 100.0
    with pytest.raises(MetricError):
        evaluation_report([], {}, packs)


def test_evaluation_report_without_records(packs):
    results = [res("z", False, status=EpisodeStatus.STEP_CAP)]
    report = evaluation_report(results, {}, packs)
    assert "consistency" not in report
    assert "adherence" not in report
    assert report["status_counts"] == {"StepCapReached": 1}
