"""Command line entry point: ``lesionkb <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 provider error.
"""

from __future__ import annotations

import argparse
import logging
import re
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from .config import RunConfig, load_config
from .errors import DataError, IoFailure, LesionKBError, ProviderError
from .evaluation import evaluate, grid_search_topk
from .grader import save_audit
from .pipeline import load_reports, load_results, run_pipeline, save_results
from .retrieval import HashingEmbedder, embed_external_kb
from .rulegen import build_internal_kb, load_training_set
from .store import (
    DEFAULT_CHUNK_SIZE,
    DEFAULT_OVERLAP,
    LUNG_IRRELEVANT,
    LUNG_RELATED,
    build_external_kb,
    load_external_kb,
    load_rule_base,
    read_sources,
    save_external_kb,
    save_rule_base,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_PROVIDER = 3

logger = logging.getLogger("lesionkb")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def int_range(text: str) -> list[int]:
    """``"0..4"`` (inclusive), ``"2"`` or ``"0,2,3"``."""
    text = text.strip()
    m = re.fullmatch(r"(\d+)\.\.(\d+)", text)
    if m:
        lo, hi = int(m.group(1)), int(m.group(2))
        if lo > hi:
            raise argparse.ArgumentTypeError(f"empty range {text!r}")
        return list(range(lo, hi + 1))
    if re.fullmatch(r"\d+(,\d+)*", text):
        return [int(v) for v in text.split(",")]
    raise argparse.ArgumentTypeError(f"expected N..M or a comma list, got {text!r}")


def _require_config(args) -> RunConfig:
    if not args.config:
        raise UsageError(f"{args.command} needs --config")
    return load_config(args.config).with_jobs(args.jobs)


def _pipeline_config(args, cfg: RunConfig):
    pipeline = cfg.pipeline
    if getattr(args, "no_knowledge", False):
        pipeline = replace(pipeline, use_knowledge=False)
    if getattr(args, "no_grading", False):
        pipeline = replace(pipeline, use_grading=False)
    if getattr(args, "no_context", False):
        # Removes both the surrounding report and the vocabulary list from stage 2.
        pipeline = replace(pipeline, use_extended_context=False, use_vocabulary=False)
    if getattr(args, "no_vocabulary", False):
        pipeline = replace(pipeline, use_vocabulary=False)
    if getattr(args, "cot", False):
        pipeline = replace(pipeline, use_cot=True)
    return pipeline


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_kb_build_external(args) -> int:
    sources = read_sources(args.sources)
    if not sources:
        raise DataError(f"no sources in {args.sources}")
    kb = build_external_kb(sources, args.chunk_size, args.overlap)
    embedder = load_config(args.config).make_embedder() if args.config else HashingEmbedder()
    kb = embed_external_kb(kb, embedder, jobs=args.jobs)
    save_external_kb(kb, args.out)
    print(f"{len(kb)} chunks from {len(sources)} sources")
    return EXIT_OK


def cmd_generate_rules(args) -> int:
    cfg = _require_config(args)
    train = load_training_set(args.train)
    base = build_internal_kb(train, cfg.make_gateway(), cfg.make_embedder(), cfg.rulegen, jobs=args.jobs)
    save_rule_base(base, args.out)
    print(f"{LUNG_RELATED}: {len(base.by_polarity(LUNG_RELATED))}")
    print(f"{LUNG_IRRELEVANT}: {len(base.by_polarity(LUNG_IRRELEVANT))}")
    return EXIT_OK


def cmd_extract(args) -> int:
    cfg = _require_config(args)
    pipeline = _pipeline_config(args, cfg)
    reports = load_reports(args.reports)
    base = load_rule_base(args.rules)
    kb = load_external_kb(args.external)
    train = load_training_set(args.train) if args.train else []
    run = run_pipeline(reports, base, kb, pipeline, cfg.make_gateway(), cfg.make_embedder(), train=train)
    save_results(run.results, args.out)
    if args.audit:
        save_audit(run.audit, args.audit)
    if args.rules_out:
        save_rule_base(run.base, args.rules_out)
    failed = sum(r.error is not None for r in run.results)
    found = sum(len(r.findings) for r in run.results)
    print(f"{len(run.results)} reports, {found} findings, {failed} failed")
    if reports and failed == len(reports):
        logger.error("every report failed")
        return EXIT_PROVIDER if all(r.provider_failure for r in run.results) else EXIT_DATA
    return EXIT_OK


def cmd_eval(args) -> int:
    gold = {r.report_id: r.findings for r in load_results(args.gold)}
    pred = {r.report_id: r.findings for r in load_results(args.pred)}
    report = evaluate(gold, pred, full_size=args.full_size)
    text = report.to_json()
    try:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write {args.out}: {exc}") from exc
    for name, m in report.metrics.items():
        flag = " (undefined)" if m.undefined else ""
        print(f"{name:16s} P={m.precision:.3f} R={m.recall:.3f} F1={m.f1:.3f}{flag}")
    return EXIT_OK


def cmd_tune_topk(args) -> int:
    cfg = _require_config(args)
    pipeline = _pipeline_config(args, cfg)
    train = load_training_set(args.train)
    base = load_rule_base(args.rules)
    kb = load_external_kb(args.external)
    grid = grid_search_topk(train, base, kb, pipeline, cfg.make_gateway(), cfg.make_embedder(), args.kr, args.ki)
    grid.save(args.out)
    kr, ki, f1 = grid.best
    print(f"best k_related={kr} k_irrelevant={ki} lesion-size F1={f1:.4f} ({len(grid.rows)} cells)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_ablation_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--no-knowledge", action="store_true", help="no retrieved rules in the detection prompt")
    p.add_argument("--no-grading", action="store_true", help="use retrieved rules without grading")
    p.add_argument("--no-context", action="store_true",
                   help="stage 2 sees only the lesion description, without report text or vocabulary")
    p.add_argument("--no-vocabulary", action="store_true", help="drop only the vocabulary list from stage 2")
    p.add_argument("--cot", action="store_true", help="ask for step-by-step reasoning in stage 1")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--jobs", type=int, default=4, help="parallel calls (default 4)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="lesionkb", description="Knowledge-grounded lung lesion extraction from reports.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("kb-build-external", parents=[common], help="chunk and embed reference documents")
    p.add_argument("--sources", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--chunk-size", type=int, default=DEFAULT_CHUNK_SIZE)
    p.add_argument("--overlap", type=int, default=DEFAULT_OVERLAP)
    p.set_defaults(func=cmd_kb_build_external)

    p = sub.add_parser("generate-rules", parents=[common], help="build the internal rule base")
    p.add_argument("--train", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate_rules)

    p = sub.add_parser("extract", parents=[common], help="extract findings from reports")
    p.add_argument("--reports", required=True)
    p.add_argument("--rules", required=True)
    p.add_argument("--external", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--audit", help="write grading decisions here")
    p.add_argument("--rules-out", help="write the rule base as updated by grading here")
    p.add_argument("--train", help="annotated examples for few-shot samples")
    _add_ablation_flags(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("eval", parents=[common], help="score predictions against gold")
    p.add_argument("--gold", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--full-size", action="store_true", help="compare every size dimension, not only the largest")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("tune-topk", parents=[common], help="grid search over retrieval top-k")
    p.add_argument("--train", required=True)
    p.add_argument("--rules", required=True)
    p.add_argument("--external", required=True)
    p.add_argument("--kr", type=int_range, default=list(range(5)))
    p.add_argument("--ki", type=int_range, default=list(range(5)))
    p.add_argument("--out", required=True)
    _add_ablation_flags(p)
    p.set_defaults(func=cmd_tune_topk)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        parser.error("--jobs must be >= 1")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"lesionkb: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ProviderError as exc:
        print(f"lesionkb: provider error: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except (LesionKBError, ValueError, OSError) as exc:
        print(f"lesionkb: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
