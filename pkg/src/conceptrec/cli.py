"""Command-line entrypoints: annotate, evaluate, build-index, validate-config."""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from . import evaluation, pipeline, retrieval
from .ontology import content_hash
from .pipeline import ConfigError


def _abs(path: str | None) -> str | None:
    return str(Path(path).resolve()) if path else None


def _load_config_with_overrides(args) -> pipeline.RunConfig:
    raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
    if not isinstance(raw, dict):
        raise ConfigError(["config root must be a JSON object"])
    # CLI flags override config fields one-to-one; paths given on the command
    # line are resolved from the working directory, not the config location.
    if getattr(args, "corpus", None):
        raw["corpus_path"] = _abs(args.corpus)
    if getattr(args, "gold", None):
        raw["gold_path"] = _abs(args.gold)
    if getattr(args, "output_dir", None):
        raw["output_dir"] = _abs(args.output_dir)
    if getattr(args, "cache_dir", None):
        raw["cache_dir"] = _abs(args.cache_dir)
    if getattr(args, "tau1", None) is not None:
        raw.setdefault("retrieval", {})["tau1"] = args.tau1
    if getattr(args, "tau2", None) is not None:
        raw.setdefault("retrieval", {})["tau2"] = args.tau2
    if getattr(args, "k", None) is not None:
        raw.setdefault("retrieval", {})["k"] = args.k
    if getattr(args, "index_path", None):
        raw.setdefault("retrieval", {})["index_path"] = _abs(args.index_path)
    if getattr(args, "strategy", None):
        raw.setdefault("extraction", {})["strategy"] = args.strategy
    if getattr(args, "workers", None) is not None:
        raw["workers"] = args.workers
    return pipeline.parse_config(raw, base_dir=Path(args.config).parent)


def cmd_annotate(args) -> int:
    cfg = _load_config_with_overrides(args)
    result = pipeline.run(cfg)
    counts = result.manifest["counts"]
    print(f"annotated {counts['documents']} documents: "
          f"{counts['spans']} spans, {counts['mentions']} mentions")
    print(f"annotations: {result.manifest['outputs']['annotations_tsv']}")
    if result.reports:
        print(evaluation.render_report(result.reports))
    return 0


def cmd_evaluate(args) -> int:
    preds = pipeline.load_annotations(args.annotations)
    gold = evaluation.load_gold(args.gold)
    doc_ids = None
    if args.corpus:
        doc_ids = pipeline.ingest_corpus(args.corpus).doc_ids()
    onto = None
    if args.ontology:
        onto = pipeline.load_ontology(pipeline.OntologySection(
            path=_abs(args.ontology), root_id=args.root_id))
    validation = evaluation.validate_gold(gold, doc_ids=doc_ids, ontology=onto)
    reports = [
        evaluation.mention_metrics(preds, gold, matching=args.matching, doc_ids=doc_ids),
        evaluation.document_metrics(preds, gold, doc_ids=doc_ids),
    ]
    print(evaluation.render_report(reports, validation, per_document=args.per_doc))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / pipeline.REPORT_JSON).write_text(
            evaluation.report_json(reports, validation, per_document=True) + "\n",
            encoding="utf-8")
        (out / pipeline.REPORT_TXT).write_text(
            evaluation.render_report(reports, validation, per_document=args.per_doc) + "\n",
            encoding="utf-8")
    return 0


def cmd_build_index(args) -> int:
    cfg = _load_config_with_overrides(args)
    out_path = args.out or cfg.retrieval.index_path
    if not out_path:
        raise ConfigError(["build-index needs retrieval.index_path in the config or --out"])
    out_path = Path(_abs(out_path))

    onto = pipeline.load_ontology(cfg.ontology)
    embedder = pipeline.build_embedder(cfg.embedder)
    t0 = time.perf_counter()
    index = retrieval.build_index(onto, embedder)
    duration = time.perf_counter() - t0
    digest = retrieval.index_content_hash(index)

    up_to_date = False
    if out_path.exists():
        try:
            existing = retrieval.read_index_header(out_path)
            up_to_date = existing.get("content_hash") == digest
        except retrieval.IndexFormatError:
            up_to_date = False
    if up_to_date:
        print(f"index up to date (content hash unchanged): {out_path}")
    else:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        retrieval.save_index(index, out_path)
        print(f"wrote index with {len(index)} entries: {out_path}")

    manifest = {
        "index_path": str(out_path),
        "entries": len(index),
        "dimension": index.dimension,
        "content_hash": digest,
        "ontology_hash": content_hash(onto),
        "embedder": embedder.identity,
        "build_seconds": round(duration, 6),
        "up_to_date": up_to_date,
    }
    manifest_path = out_path.with_suffix(out_path.suffix + ".manifest.json")
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                             encoding="utf-8")
    print(f"build took {duration:.3f} s; manifest: {manifest_path}")
    return 0


def cmd_validate_config(args) -> int:
    _load_config_with_overrides(args)
    print("config OK")
    return 0


def _add_override_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--corpus", help="override corpus_path")
    p.add_argument("--gold", help="override gold_path")
    p.add_argument("--output-dir", help="override output_dir")
    p.add_argument("--cache-dir", help="override cache_dir")
    p.add_argument("--tau1", type=float, help="override retrieval.tau1")
    p.add_argument("--tau2", type=float, help="override retrieval.tau2")
    p.add_argument("--k", type=int, help="override retrieval.k")
    p.add_argument("--index-path", help="override retrieval.index_path")
    p.add_argument("--strategy", choices=["rule_based", "segment_based"],
                   help="override extraction.strategy")
    p.add_argument("--workers", type=int, help="override workers")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conceptrec",
                                     description="Ontology concept recognition pipeline")
    parser.add_argument("--json-errors", action="store_true",
                        help="emit errors as JSON on stdout")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("annotate", help="run the full pipeline over a corpus")
    p.add_argument("--config", required=True)
    _add_override_flags(p)
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("evaluate", help="rescore an annotations file against gold")
    p.add_argument("--annotations", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--corpus", help="corpus path for document validation")
    p.add_argument("--ontology", help="OBO path for gold concept validation")
    p.add_argument("--root-id", help="subtree root used with --ontology")
    p.add_argument("--matching", choices=[evaluation.ONE_TO_ONE, evaluation.ANY_OVERLAP],
                   default=evaluation.ONE_TO_ONE)
    p.add_argument("--per-doc", action="store_true", help="include per-document breakdown")
    p.add_argument("--out", help="directory for report files")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("build-index", help="build and persist the concept index")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="index output path (defaults to retrieval.index_path)")
    _add_override_flags(p)
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("validate-config", help="validate a config file and exit")
    p.add_argument("--config", required=True)
    _add_override_flags(p)
    p.set_defaults(func=cmd_validate_config)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        if args.json_errors:
            print(json.dumps({"error": "ConfigError", "problems": exc.problems}))
        else:
            print(str(exc), file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        if args.json_errors:
            print(json.dumps({"error": type(exc).__name__, "message": str(exc)}))
        else:
            print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
