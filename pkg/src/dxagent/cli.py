"""Operator command line.

Exit codes are stable for scripting: 0 success, 2 validation failure,
3 governance refusal, 4 backend failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .canon import CanonMap, CanonMapError
from .dcpstore import DcpRepository
from .errors import ConfigurationError, IntegrityError
from .feedback import NO_ISSUES, evaluate_process
from .gateway import Gateway, GatewayError
from .guidelines import PartialIndexError, index_corpus, load_corpus_dir
from .index import ChunkingConfig
from .metrics import (
    MetricError,
    accuracy,
    adherence_report,
    consistency_report,
    evaluation_report,
    improvement_cases,
    provenance_enrichment,
    retrieval_usage,
    stratify_by_burden,
)
from .records import CohortLoadError, load_cohort
from .runner import (
    DiagnosisMatcher,
    EpisodeResult,
    EpisodeStatus,
    EpisodeTools,
    load_episode_result,
    run_episode,
    run_full_information,
    write_episode_artifacts,
)
from .workspace import (
    ROLE_ACCRUAL,
    ROLE_EVALUATION,
    EngineConfig,
    GovernanceError,
    Workspace,
)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_GOVERNANCE = 3
EXIT_BACKEND = 4


class _NoGeneration:
    """Embedding-only gateway backend; generation is a config error."""

    def complete(self, bundle, params):
        raise GatewayError("no generation backend configured for this command")


def _load_config(args) -> EngineConfig:
    if getattr(args, "config", None):
        return EngineConfig.load(args.config)
    return EngineConfig.defaults()


def _print_cohort_errors(exc: CohortLoadError, out) -> None:
    for error in exc.errors:
        print(f"  - {error}", file=out)


def cmd_validate(args) -> int:
    canon = CanonMap.from_tsv(args.canon) if args.canon else CanonMap.identity()
    try:
        records = load_cohort(args.cohort, canon)
    except CohortLoadError as exc:
        _print_cohort_errors(exc, sys.stderr)
        print(f"validation failed: {len(exc.errors)} error(s)", file=sys.stderr)
        return EXIT_VALIDATION
    print(f"{len(records)} records OK")
    return EXIT_OK


def cmd_index_guidelines(args) -> int:
    config = _load_config(args)
    docs = load_corpus_dir(args.corpus)
    gateway = Gateway(
        backend=_NoGeneration(),
        embedder=config.build_embedder(),
        params=config.generation_params(),
    )
    chunking = ChunkingConfig(max_words=args.max_words, overlap_words=args.overlap_words)
    try:
        index = index_corpus(
            docs,
            gateway,
            chunking=chunking,
            out_dir=args.out,
            encoder_tag=config.embedder.get("kind", "hashing"),
        )
    except PartialIndexError as exc:
        for key, reason in exc.failed:
            print(f"chunk {key}: {reason}", file=sys.stderr)
        print(f"indexing failed for {len(exc.failed)} chunk(s)", file=sys.stderr)
        return EXIT_VALIDATION
    print(f"indexed {len(index.chunks)} chunks from {len(docs)} documents -> {args.out}")
    return EXIT_OK


def _accrual_seen(repo: DcpRepository) -> set[str]:
    seen = {dcp.source_encounter_id for dcp in repo.all_dcps()}
    seen.update(event.get("encounter_id", "") for event in repo.skips)
    return seen


def cmd_accrue(args) -> int:
    config = _load_config(args)
    workspace = Workspace(args.workspace)
    canon = config.canon_map()
    aliases = config.alias_table()
    packs = config.rule_packs()
    try:
        records = load_cohort(args.cohort, canon)
    except CohortLoadError as exc:
        _print_cohort_errors(exc, sys.stderr)
        return EXIT_VALIDATION
    workspace.register_cohort(
        Path(args.cohort).stem, [r.id for r in records], ROLE_ACCRUAL, path=args.cohort
    )
    gateway, recorder = config.build_gateway()
    repo = DcpRepository(workspace.repo_dir(args.repo))
    if args.resume:
        seen = _accrual_seen(repo)
        records = [r for r in records if r.id not in seen]
    episode_config = config.episode_config(
        dcp_enabled=True,
        guidelines_enabled=config.engine.get("guidelines_enabled", True)
        and config.guideline_index() is not None,
    )
    matcher = DiagnosisMatcher.from_packs(packs)
    tools = EpisodeTools(
        matcher=matcher,
        dcp_view=repo,
        guideline_index=(
            config.guideline_index() if episode_config.guidelines_enabled else None
        ),
        pubmed=config.pubmed_client() if episode_config.pubmed_enabled else None,
        canon_map=canon,
        aliases=aliases,
    )
    created = skipped = correct = 0
    for i, record in enumerate(records, 1):
        result = run_episode(record, episode_config, tools, gateway)
        pack = packs.get(record.pathology)
        feedback = (
            evaluate_process(result, record, pack, canon, aliases) if pack else NO_ISSUES
        )
        dcp = repo.consolidate(
            result, record, feedback, gateway, profile=episode_config.profile
        )
        correct += result.correct
        if dcp is None:
            skipped += 1
            outcome = "skipped"
        else:
            created += 1
            outcome = dcp.id
        print(
            f"[{i}/{len(records)}] {record.id}: "
            f"{'correct' if result.correct else 'incorrect'} -> {outcome} "
            f"(running accuracy {correct / i:.2f})"
        )
    if recorder is not None:
        recorder.save(config.resolve(config.backend["record"]))
    print(
        f"processed {len(records)} encounters: {created} DCPs, {skipped} skips, "
        f"repository size {repo.size}"
    )
    return EXIT_OK


def _run_one(record, episode_config, tools, gateway):
    return run_episode(record, episode_config, tools, gateway)


def _write_tables(run_dir: Path, results, records_by_id, packs, canon, aliases) -> None:
    ordered = sorted(results, key=lambda r: r.encounter_id)
    with (run_dir / "consistency.tsv").open("w", encoding="utf-8") as fh:
        fh.write("encounter_id\tpe_agreement\tlab_f1\timaging_f1\torder_concordance\toverall\n")
        for result in ordered:
            record = records_by_id.get(result.encounter_id)
            if record is None:
                continue
            c = consistency_report(result, record, canon, aliases)
            fh.write(
                f"{result.encounter_id}\t{c.pe_agreement}\t{c.lab_f1:.6f}\t"
                f"{c.imaging_f1:.6f}\t{c.order_concordance:.6f}\t{c.overall:.6f}\n"
            )
    with (run_dir / "adherence.tsv").open("w", encoding="utf-8") as fh:
        fh.write("encounter_id\tpe_timing\tlab_adherence\timaging_adherence\toverall\n")
        for result in ordered:
            pack = packs.get(result.pathology)
            if pack is None:
                continue
            a = adherence_report(result, pack, canon, aliases)
            fh.write(
                f"{result.encounter_id}\t{a.pe_timing}\t{a.lab_adherence:.6f}\t"
                f"{a.imaging_adherence}\t{a.overall:.6f}\n"
            )
    keys = sorted({key for r in ordered for key in r.compliance})
    with (run_dir / "compliance.tsv").open("w", encoding="utf-8") as fh:
        fh.write("encounter_id\t" + "\t".join(keys) + "\n")
        for result in ordered:
            flags = "\t".join(str(int(result.compliance.get(k, False))) for k in keys)
            fh.write(f"{result.encounter_id}\t{flags}\n")


def cmd_evaluate(args) -> int:
    config = _load_config(args)
    workspace = Workspace(args.workspace)
    canon = config.canon_map()
    aliases = config.alias_table()
    packs = config.rule_packs()
    try:
        records = load_cohort(args.cohort, canon)
    except CohortLoadError as exc:
        _print_cohort_errors(exc, sys.stderr)
        return EXIT_VALIDATION
    cohort_name = Path(args.cohort).stem
    workspace.register_cohort(
        cohort_name, [r.id for r in records], ROLE_EVALUATION, path=args.cohort
    )
    overrides: dict = {}
    for flag in ("dcp", "guidelines", "pubmed"):
        value = getattr(args, flag)
        if value is not None:
            overrides[f"{flag}_enabled"] = value
    episode_config = config.episode_config(**overrides)
    gateway, recorder = config.build_gateway()
    matcher = DiagnosisMatcher.from_packs(packs)
    run_name = args.run or f"{cohort_name}-{args.mode}"
    run_dir = workspace.run_dir(run_name)

    if args.mode == "fi":
        results = [
            run_full_information(record, episode_config, gateway, matcher)
            for record in records
        ]
    else:
        dcp_view = None
        if episode_config.dcp_enabled:
            if not args.repo:
                raise ConfigurationError(
                    "interactive evaluation with DCP retrieval enabled requires --repo; "
                    "pass --no-dcp to run the ablation"
                )
            repo = DcpRepository(workspace.repo_dir(args.repo), create=False)
            k = args.snapshot_k if args.snapshot_k is not None else repo.size
            dcp_view = repo.snapshot_at(k)
        guideline_index = (
            config.guideline_index() if episode_config.guidelines_enabled else None
        )
        if episode_config.guidelines_enabled and guideline_index is None:
            if args.guidelines:
                raise ConfigurationError(
                    "guidelines requested but no guideline_index configured in [paths]"
                )
            overrides["guidelines_enabled"] = False
            episode_config = config.episode_config(**overrides)
        tools = EpisodeTools(
            matcher=matcher,
            dcp_view=dcp_view,
            guideline_index=guideline_index,
            pubmed=config.pubmed_client() if episode_config.pubmed_enabled else None,
            canon_map=canon,
            aliases=aliases,
        )
        if args.workers > 1:
            with ThreadPoolExecutor(max_workers=args.workers) as pool:
                futures = [
                    pool.submit(_run_one, record, episode_config, tools, gateway)
                    for record in records
                ]
                results = [f.result() for f in futures]
        else:
            results = [
                run_episode(record, episode_config, tools, gateway) for record in records
            ]

    for record, result in zip(records, results):
        write_episode_artifacts(result, run_dir / "encounters" / record.id)
    records_by_id = {r.id: r for r in records}
    report = evaluation_report(
        results,
        records_by_id,
        packs,
        canon,
        aliases,
        strict_denominator=args.strict_denominator,
    )
    (run_dir / "report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    _write_tables(run_dir, results, records_by_id, packs, canon, aliases)
    if recorder is not None:
        recorder.save(config.resolve(config.backend["record"]))
    print(
        f"run {run_name}: accuracy {report['accuracy']:.3f} "
        f"over {report['n']} encounters -> {run_dir}"
    )
    failures = sum(1 for r in results if r.status is EpisodeStatus.BACKEND_FAILURE)
    if failures:
        print(f"{failures} episode(s) ended in backend failure", file=sys.stderr)
        return EXIT_BACKEND
    return EXIT_OK


def _load_run_results(path: Path) -> list[EpisodeResult]:
    encounters = path / "encounters"
    if not encounters.is_dir():
        raise ConfigurationError(f"no encounters directory under {path}")
    return [
        load_episode_result(sub) for sub in sorted(encounters.iterdir()) if sub.is_dir()
    ]


def _resolve_run(workspace: Workspace, name: str) -> Path:
    candidate = workspace.runs_dir / name
    return candidate if candidate.is_dir() else Path(name)


def _stratum_block(results_with, results_without, ids) -> dict:
    pool_with = [r for r in results_with if r.encounter_id in ids]
    pool_without = [r for r in results_without if r.encounter_id in ids]
    if not pool_with:
        return {"n": 0, "accuracy_with": None, "accuracy_without": None, "delta": None}
    acc_with = accuracy(pool_with)
    acc_without = accuracy(pool_without)
    return {
        "n": len(pool_with),
        "accuracy_with": acc_with,
        "accuracy_without": acc_without,
        "delta": acc_with - acc_without,
    }


def cmd_analyze(args) -> int:
    workspace = Workspace(args.workspace, create=False)
    results_with = _load_run_results(_resolve_run(workspace, getattr(args, "with")))
    results_without = _load_run_results(_resolve_run(workspace, args.without))
    improvement = improvement_cases(results_with, results_without)
    logs = [event for result in results_with for event in result.retrieval_events]
    bundle: dict = {
        "n": len(results_with),
        "accuracy_with": accuracy(results_with),
        "accuracy_without": accuracy(results_without),
        "improvement_cases": sorted(improvement),
    }
    split = stratify_by_burden(results_without)
    bundle["burden"] = {
        "median_steps": split.median,
        "low": _stratum_block(results_with, results_without, split.low),
        "high": _stratum_block(results_with, results_without, split.high),
    }
    repo = None
    if args.repo:
        repo = DcpRepository(workspace.repo_dir(args.repo), create=False)
    if repo is not None and logs and repo.size:
        provenance = provenance_enrichment(logs, improvement, repo)
        bundle["provenance"] = {
            "rate_improvement": provenance.rate_improvement,
            "rate_all": provenance.rate_all,
            "delta": provenance.delta,
            "improvement_hits": provenance.improvement_hits,
            "all_hits": provenance.all_hits,
        }
        usage = retrieval_usage(logs, repo, (1, repo.size), improvement)
        bundle["retrieval_usage"] = {
            "breadth": dict(sorted(usage.breadth.items())),
            "window": [1, repo.size],
            "window_rate_all": usage.window_rate_all,
            "window_rate_correcting": usage.window_rate_correcting,
            "total_hits": usage.total_hits,
        }
    else:
        bundle["provenance"] = "no data"
        bundle["retrieval_usage"] = "no data"
    text = json.dumps(bundle, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"analysis written to {args.out}")
    else:
        print(text, end="")
    return EXIT_OK


def cmd_dcp(args) -> int:
    workspace = Workspace(args.workspace, create=False)
    repo = DcpRepository(workspace.repo_dir(args.repo), create=False)
    if args.dcp_command == "list":
        source_correct = False if args.incorrect_source else None
        exposure_range = tuple(args.exposure_range) if args.exposure_range else None
        rows = repo.list_dcps(
            pathology=args.pathology,
            source_correct=source_correct,
            exposure_range=exposure_range,
            include_retracted=args.include_retracted,
        )
        print("id\texposure\tpathology\tsource_correct\tsource_encounter\tretracted")
        for dcp in rows:
            print(
                f"{dcp.id}\t{dcp.exposure_index}\t{dcp.pathology}\t"
                f"{str(dcp.source_correct).lower()}\t{dcp.source_encounter_id}\t"
                f"{str(dcp.retracted).lower()}"
            )
        print(f"{len(rows)} DCP(s)")
        return EXIT_OK
    if args.dcp_command == "show":
        dcp = repo.get(args.id)
        print(f"DCP {dcp.id}")
        print()
        print(f"Experience Pattern:\n{dcp.pattern}")
        print()
        print(f"Test Ordering Experience:\n{dcp.ordering}")
        print()
        print(f"Diagnostic Decision Experience:\n{dcp.decision}")
        print()
        print(f"exposure index: {dcp.exposure_index}")
        print(f"pathology: {dcp.pathology}")
        print(f"source encounter: {dcp.source_encounter_id}")
        print(f"source correct: {str(dcp.source_correct).lower()}")
        print(f"created at: {dcp.created_at}")
        if dcp.retracted:
            print(f"retracted: {'; '.join(dcp.retraction_reasons)}")
        return EXIT_OK
    if args.dcp_command == "retract":
        dcp = repo.retract(args.id, args.reason)
        print(f"retracted {dcp.id}: {args.reason}")
        return EXIT_OK
    raise ConfigurationError(f"unknown dcp subcommand {args.dcp_command!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dxagent",
        description="Evidence-gated diagnostic agent with an evolving experience repository.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a cohort file and its label firewall")
    p.add_argument("cohort", help="NDJSON cohort file")
    p.add_argument("--canon", help="canonicalization TSV applied to lab names")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("index-guidelines", help="embed a guideline corpus for retrieval")
    p.add_argument("corpus", help="directory with manifest.json and document texts")
    p.add_argument("out", help="output index directory")
    p.add_argument("--config", help="engine TOML config (for embedder settings)")
    p.add_argument("--max-words", type=int, default=400)
    p.add_argument("--overlap-words", type=int, default=80)
    p.set_defaults(func=cmd_index_guidelines)

    p = sub.add_parser("accrue", help="run accrual episodes and consolidate DCPs")
    p.add_argument("cohort", help="NDJSON accrual cohort")
    p.add_argument("--workspace", required=True)
    p.add_argument("--repo", required=True, help="repository name under workspace/repos")
    p.add_argument("--config", help="engine TOML config")
    p.add_argument(
        "--resume",
        action="store_true",
        help="skip encounters already consolidated or skipped in the repository",
    )
    p.set_defaults(func=cmd_accrue)

    p = sub.add_parser("evaluate", help="run an evaluation cohort and write a report")
    p.add_argument("cohort", help="NDJSON evaluation cohort")
    p.add_argument("--workspace", required=True)
    p.add_argument("--config", help="engine TOML config")
    p.add_argument("--mode", choices=("interactive", "fi"), default="interactive")
    p.add_argument("--repo", help="repository name (required when DCP retrieval is on)")
    p.add_argument(
        "--snapshot-k", type=int, default=None, help="evaluate against the first k DCPs"
    )
    p.add_argument("--run", help="run name under workspace/runs")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument(
        "--strict-denominator",
        action=argparse.BooleanOptionalAction,
        default=True,
        help="count backend failures in the accuracy denominator",
    )
    p.add_argument("--dcp", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--guidelines", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--pubmed", action=argparse.BooleanOptionalAction, default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze", help="compare paired runs and summarize retrieval use")
    p.add_argument("--workspace", required=True)
    p.add_argument("--with", dest="with", required=True, help="run name or path (with DCP)")
    p.add_argument("--without", required=True, help="run name or path (without DCP)")
    p.add_argument("--repo", help="repository name for provenance analysis")
    p.add_argument("--out", help="write the analysis bundle to this file")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("dcp", help="inspect or curate the DCP repository")
    p.add_argument("--workspace", required=True)
    p.add_argument("--repo", required=True)
    dcp_sub = p.add_subparsers(dest="dcp_command", required=True)
    pl = dcp_sub.add_parser("list")
    pl.add_argument("--pathology")
    pl.add_argument("--incorrect-source", action="store_true")
    pl.add_argument("--include-retracted", action="store_true")
    pl.add_argument("--exposure-range", type=int, nargs=2, metavar=("LO", "HI"))
    ps = dcp_sub.add_parser("show")
    ps.add_argument("id")
    pr = dcp_sub.add_parser("retract")
    pr.add_argument("id")
    pr.add_argument("--reason", required=True)
    p.set_defaults(func=cmd_dcp)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except GovernanceError as exc:
        print(f"governance refusal: {exc}", file=sys.stderr)
        return EXIT_GOVERNANCE
    except GatewayError as exc:
        print(f"backend failure: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except CohortLoadError as exc:
        _print_cohort_errors(exc, sys.stderr)
        return EXIT_VALIDATION
    except (
        ConfigurationError,
        IntegrityError,
        CanonMapError,
        MetricError,
        LookupError,
        ValueError,
        OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
