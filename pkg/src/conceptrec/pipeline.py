"""Batch orchestration: configuration, corpus ingestion, and the full run.

A run walks ontology -> index -> extract -> retrieve -> link -> resolve ->
score, writing an annotations file (TSV plus a JSON variant), optional
evaluation reports, and a manifest recording content hashes, backend
identities, and per-stage timings. Entity-level backend failures degrade to
skipped entities counted in the manifest; only configuration and IO errors
abort a run.
"""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import evaluation, extraction, linking, postprocess, retrieval
from .embedding import Embedder, EmbeddingError, FileEmbedder, HttpEmbedder, MockEmbedder
from .evaluation import ANY_OVERLAP, ONE_TO_ONE
from .extraction import RULE_BASED, SEGMENT_BASED
from .linking import (ChatRequestError, HttpChatClient, LinkedMention, ReplyCache,
                      ScriptedChatClient)
from .ontology import (Ontology, content_hash, load_obo, load_xref_synonyms,
                       subtree_filter, with_xref_synonyms)

ANNOTATIONS_TSV = "annotations.tsv"
ANNOTATIONS_JSON = "annotations.json"
MANIFEST_JSON = "run_manifest.json"
REPORT_JSON = "eval_report.json"
REPORT_TXT = "eval_report.txt"


class ConfigError(ValueError):
    """Configuration is invalid; message lists every failing field."""

    def __init__(self, problems: list[str]):
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in problems))
        self.problems = problems


class CorpusError(ValueError):
    """Corpus input violates its contract (duplicate IDs, empty text, ...)."""


@dataclass(frozen=True)
class Document:
    doc_id: str
    text: str


@dataclass(frozen=True)
class Corpus:
    documents: tuple[Document, ...]

    def __len__(self) -> int:
        return len(self.documents)

    def doc_ids(self) -> list[str]:
        return [d.doc_id for d in self.documents]


@dataclass
class OntologySection:
    path: str = ""
    root_id: str | None = None
    xref_synonyms_path: str | None = None
    source_label: str | None = None


@dataclass
class ExtractionSection:
    strategy: str = RULE_BASED
    lexicon_path: str | None = None
    segments_path: str | None = None


@dataclass
class EmbedderSection:
    kind: str = "mock"
    dimension: int = 256
    endpoint: str | None = None
    path: str | None = None
    batch_size: int = 64
    seed: int = 0


@dataclass
class RetrievalSection:
    tau1: float = 0.95
    tau2: float = 0.85
    k: int = 5
    index_path: str | None = None


@dataclass
class ChatSection:
    kind: str = "disabled"
    endpoint: str | None = None
    model: str | None = None
    auth_env: str | None = None
    concurrency: int = 4
    rate_limit_per_s: float | None = None
    replies_path: str | None = None


@dataclass
class RunConfig:
    ontology: OntologySection = field(default_factory=OntologySection)
    extraction: ExtractionSection = field(default_factory=ExtractionSection)
    embedder: EmbedderSection = field(default_factory=EmbedderSection)
    retrieval: RetrievalSection = field(default_factory=RetrievalSection)
    chat: ChatSection = field(default_factory=ChatSection)
    corpus_path: str = ""
    gold_path: str | None = None
    output_dir: str = ""
    cache_dir: str | None = None
    workers: int = 1
    matching: str = ONE_TO_ONE

    def as_dict(self) -> dict:
        return asdict(self)


_SECTION_TYPES = {
    "ontology": OntologySection,
    "extraction": ExtractionSection,
    "embedder": EmbedderSection,
    "retrieval": RetrievalSection,
    "chat": ChatSection,
}


def _apply_section(section_name: str, cls, raw: dict, problems: list[str]):
    obj = cls()
    known = set(obj.__dataclass_fields__)
    for key, value in raw.items():
        if key not in known:
            problems.append(f"unknown field: {section_name}.{key}")
            continue
        setattr(obj, key, value)
    return obj


def _resolve(base: Path, value: str | None) -> str | None:
    if not value:
        return None
    p = Path(value)
    return str(p if p.is_absolute() else (base / p))


def parse_config(raw: dict, base_dir: str | Path = ".") -> RunConfig:
    """Validate a raw config mapping; every problem is reported at once.

    Relative paths resolve against ``base_dir`` (the config file's directory
    when loaded from disk). The schema is strict: unknown fields are errors.
    """
    problems: list[str] = []
    base = Path(base_dir)
    cfg = RunConfig()
    top_known = set(cfg.__dataclass_fields__)
    for key, value in raw.items():
        if key not in top_known:
            problems.append(f"unknown field: {key}")
        elif key in _SECTION_TYPES:
            if isinstance(value, dict):
                setattr(cfg, key, _apply_section(key, _SECTION_TYPES[key], value, problems))
            else:
                problems.append(f"field {key} must be an object")
        else:
            setattr(cfg, key, value)

    cfg.ontology.path = _resolve(base, cfg.ontology.path) or ""
    cfg.ontology.xref_synonyms_path = _resolve(base, cfg.ontology.xref_synonyms_path)
    cfg.extraction.lexicon_path = _resolve(base, cfg.extraction.lexicon_path)
    cfg.extraction.segments_path = _resolve(base, cfg.extraction.segments_path)
    cfg.embedder.path = _resolve(base, cfg.embedder.path)
    cfg.retrieval.index_path = _resolve(base, cfg.retrieval.index_path)
    cfg.chat.replies_path = _resolve(base, cfg.chat.replies_path)
    cfg.corpus_path = _resolve(base, cfg.corpus_path) or ""
    cfg.gold_path = _resolve(base, cfg.gold_path)
    cfg.output_dir = _resolve(base, cfg.output_dir) or ""
    cfg.cache_dir = _resolve(base, cfg.cache_dir)

    if not cfg.ontology.path:
        problems.append("ontology.path is required")
    elif not Path(cfg.ontology.path).exists():
        problems.append(f"ontology.path does not exist: {cfg.ontology.path}")
    if cfg.ontology.xref_synonyms_path and not Path(cfg.ontology.xref_synonyms_path).exists():
        problems.append(f"ontology.xref_synonyms_path does not exist: {cfg.ontology.xref_synonyms_path}")

    if cfg.extraction.strategy not in (RULE_BASED, SEGMENT_BASED):
        problems.append(f"extraction.strategy must be {RULE_BASED!r} or {SEGMENT_BASED!r}")
    if cfg.extraction.segments_path:
        if cfg.extraction.strategy != SEGMENT_BASED:
            problems.append("extraction.segments_path is only valid with the segment_based strategy")
        elif not Path(cfg.extraction.segments_path).exists():
            problems.append(f"extraction.segments_path does not exist: {cfg.extraction.segments_path}")
    if cfg.extraction.lexicon_path and not Path(cfg.extraction.lexicon_path).exists():
        problems.append(f"extraction.lexicon_path does not exist: {cfg.extraction.lexicon_path}")

    if cfg.embedder.kind not in ("mock", "file", "http"):
        problems.append("embedder.kind must be one of: mock, file, http")
    if cfg.embedder.kind == "file":
        if not cfg.embedder.path:
            problems.append("embedder.path is required for the file backend")
        elif not Path(cfg.embedder.path).exists():
            problems.append(f"embedder.path does not exist: {cfg.embedder.path}")
    if cfg.embedder.kind == "http" and not cfg.embedder.endpoint:
        problems.append("embedder.endpoint is required for the http backend")
    if not isinstance(cfg.embedder.dimension, int) or cfg.embedder.dimension <= 0:
        problems.append("embedder.dimension must be a positive integer")
    if not isinstance(cfg.embedder.batch_size, int) or cfg.embedder.batch_size <= 0:
        problems.append("embedder.batch_size must be a positive integer")

    tau1, tau2 = cfg.retrieval.tau1, cfg.retrieval.tau2
    if not (isinstance(tau1, (int, float)) and isinstance(tau2, (int, float))
            and 0.0 <= tau2 < tau1 <= 1.0):
        problems.append(f"retrieval thresholds must satisfy 0 <= tau2 < tau1 <= 1, got tau1={tau1}, tau2={tau2}")
    if not isinstance(cfg.retrieval.k, int) or cfg.retrieval.k < 1:
        problems.append("retrieval.k must be an integer >= 1")

    if cfg.chat.kind not in ("disabled", "http", "scripted"):
        problems.append("chat.kind must be one of: disabled, http, scripted")
    if cfg.chat.kind == "http":
        if not cfg.chat.endpoint:
            problems.append("chat.endpoint is required for the http chat backend")
        if not cfg.chat.model:
            problems.append("chat.model is required for the http chat backend")
    if cfg.chat.kind == "scripted" and cfg.chat.replies_path and not Path(cfg.chat.replies_path).exists():
        problems.append(f"chat.replies_path does not exist: {cfg.chat.replies_path}")
    if not isinstance(cfg.chat.concurrency, int) or cfg.chat.concurrency < 1:
        problems.append("chat.concurrency must be an integer >= 1")

    if not cfg.corpus_path:
        problems.append("corpus_path is required")
    elif not Path(cfg.corpus_path).exists():
        problems.append(f"corpus_path does not exist: {cfg.corpus_path}")
    if cfg.gold_path and not Path(cfg.gold_path).exists():
        problems.append(f"gold_path does not exist: {cfg.gold_path}")
    if not cfg.output_dir:
        problems.append("output_dir is required")
    if not isinstance(cfg.workers, int) or cfg.workers < 1:
        problems.append("workers must be an integer >= 1")
    if cfg.matching not in (ONE_TO_ONE, ANY_OVERLAP):
        problems.append(f"matching must be {ONE_TO_ONE!r} or {ANY_OVERLAP!r}")

    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path: str | Path) -> RunConfig:
    p = Path(path)
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError([f"config is not valid JSON: {exc}"]) from exc
    if not isinstance(raw, dict):
        raise ConfigError(["config root must be a JSON object"])
    return parse_config(raw, base_dir=p.parent)


def config_hash(cfg: RunConfig) -> str:
    canonical = json.dumps(cfg.as_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def ingest_corpus(path: str | Path) -> Corpus:
    """Load a corpus from a directory of <doc_id>.txt files or a JSONL file.

    Documents are ordered by doc_id, and offsets refer to the text exactly as
    loaded (no normalization of any kind).
    """
    p = Path(path)
    docs: list[Document] = []
    if p.is_dir():
        for txt in sorted(p.glob("*.txt")):
            text = txt.read_text(encoding="utf-8")
            if not text:
                raise CorpusError(f"document {txt.stem!r} has empty text")
            docs.append(Document(doc_id=txt.stem, text=text))
    else:
        seen: set[str] = set()
        with p.open("r", encoding="utf-8") as fh:
            for line_no, raw in enumerate(fh, start=1):
                line = raw.strip()
                if not line:
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise CorpusError(f"line {line_no}: invalid JSON: {exc}") from exc
                if not isinstance(record, dict) or "doc_id" not in record or "text" not in record:
                    raise CorpusError(f'line {line_no}: expected {{"doc_id": ..., "text": ...}}')
                doc_id, text = str(record["doc_id"]), str(record["text"])
                if doc_id in seen:
                    raise CorpusError(f"line {line_no}: duplicate doc_id {doc_id!r}")
                if not text:
                    raise CorpusError(f"line {line_no}: document {doc_id!r} has empty text")
                seen.add(doc_id)
                docs.append(Document(doc_id=doc_id, text=text))
        docs.sort(key=lambda d: d.doc_id)
    return Corpus(documents=tuple(docs))


def build_embedder(spec: EmbedderSection) -> Embedder:
    if spec.kind == "mock":
        return MockEmbedder(dimension=spec.dimension, seed=spec.seed, batch_size=spec.batch_size)
    if spec.kind == "file":
        return FileEmbedder(spec.path, batch_size=spec.batch_size)
    if spec.kind == "http":
        return HttpEmbedder(spec.endpoint, dimension=spec.dimension, batch_size=spec.batch_size)
    raise ConfigError([f"unknown embedder kind {spec.kind!r}"])


def build_chat_client(spec: ChatSection):
    if spec.kind == "disabled":
        return None
    if spec.kind == "scripted":
        replies = {}
        if spec.replies_path:
            replies = json.loads(Path(spec.replies_path).read_text(encoding="utf-8"))
        return ScriptedChatClient(replies=replies)
    if spec.kind == "http":
        return HttpChatClient(
            endpoint=spec.endpoint,
            model=spec.model,
            auth_env=spec.auth_env,
            concurrency=spec.concurrency,
            rate_limit_per_s=spec.rate_limit_per_s,
        )
    raise ConfigError([f"unknown chat kind {spec.kind!r}"])


def load_ontology(section: OntologySection) -> Ontology:
    onto = load_obo(section.path, source_label=section.source_label)
    if section.root_id:
        onto = subtree_filter(onto, section.root_id)
    if section.xref_synonyms_path:
        onto = with_xref_synonyms(onto, load_xref_synonyms(section.xref_synonyms_path))
    return onto


class _StageTimer:
    def __init__(self):
        self.seconds: dict[str, float] = {}

    def add(self, stage: str, dt: float) -> None:
        self.seconds[stage] = self.seconds.get(stage, 0.0) + dt

    def time(self, stage: str):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.t0 = time.perf_counter()
                return self

            def __exit__(self, *exc):
                timer.add(stage, time.perf_counter() - self.t0)
                return False

        return _Ctx()


@dataclass
class DocOutcome:
    doc_id: str
    mentions: list[LinkedMention]
    decisions: dict[str, int]
    span_count: int
    warnings: list[str]


@dataclass
class RunResult:
    mentions: list[LinkedMention]
    reports: list[evaluation.EvalReport]
    manifest: dict
    output_dir: Path


def _score_str(score: float | str) -> str:
    if isinstance(score, str):
        return score
    return f"{score:.6f}"


def write_annotations(mentions: list[LinkedMention], out_dir: Path) -> tuple[Path, Path]:
    rows = sorted(mentions, key=lambda m: (m.span.doc_id, m.span.start, m.span.end, m.concept_id))
    tsv_path = out_dir / ANNOTATIONS_TSV
    with tsv_path.open("w", encoding="utf-8") as fh:
        for m in rows:
            fh.write(f"{m.span.doc_id}\t{m.span.start}\t{m.span.end}\t{m.concept_id}"
                     f"\t{m.provenance}\t{_score_str(m.score)}\n")
    json_path = out_dir / ANNOTATIONS_JSON
    payload = [
        {
            "doc_id": m.span.doc_id,
            "start": m.span.start,
            "end": m.span.end,
            "text": m.span.text,
            "strategy": m.span.strategy,
            "concept_id": m.concept_id,
            "provenance": m.provenance,
            "score": m.score,
        }
        for m in rows
    ]
    json_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return tsv_path, json_path


@dataclass(frozen=True)
class PredictedMention:
    doc_id: str
    start: int
    end: int
    concept_id: str
    provenance: str = ""
    score: str = ""


def load_annotations(path: str | Path) -> list[PredictedMention]:
    """Read an annotations TSV back for rescoring."""
    out: list[PredictedMention] = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 6:
                raise ValueError(f"line {line_no}: expected 6 tab-separated fields")
            out.append(PredictedMention(
                doc_id=parts[0], start=int(parts[1]), end=int(parts[2]),
                concept_id=parts[3], provenance=parts[4], score=parts[5],
            ))
    return out


def _process_document(
    doc: Document,
    cfg: RunConfig,
    onto: Ontology,
    index: retrieval.ConceptIndex,
    embedder: Embedder,
    chat,
    cache: ReplyCache | None,
    lexicon,
    segments_by_doc: dict[str, list[extraction.Segment]],
    timer: _StageTimer,
) -> DocOutcome:
    warnings: list[str] = []
    decisions = {retrieval.DIRECT: 0, retrieval.AMBIGUOUS: 0, retrieval.NO_MATCH: 0}

    with timer.time("extract"):
        if cfg.extraction.strategy == RULE_BASED:
            spans = extraction.extract_rule_based(doc.doc_id, doc.text, lexicon=lexicon)
        else:
            spans = extraction.extract_segment_based(
                doc.doc_id, doc.text,
                external_segments=segments_by_doc.get(doc.doc_id, []),
                lexicon=lexicon,
            )

    span_decisions: list[tuple[extraction.EntitySpan, retrieval.RetrievalDecision]] = []
    with timer.time("retrieve"):
        for span in spans:
            try:
                decision = retrieval.query(
                    index, span, embedder,
                    tau1=cfg.retrieval.tau1, tau2=cfg.retrieval.tau2, k=cfg.retrieval.k,
                )
            except EmbeddingError:
                warnings.append("entity skipped: embedding backend failure")
                continue
            decisions[decision.variant] += 1
            span_decisions.append((span, decision))

    def _link_one(item):
        span, decision = item
        if decision.variant == retrieval.AMBIGUOUS and chat is None:
            return None, "entity skipped: ambiguous decision but no chat backend configured"
        try:
            return linking.link(span, decision, chat, onto, cache), None
        except ChatRequestError:
            return None, "entity skipped: chat backend failure"

    mentions: list[LinkedMention] = []
    with timer.time("link"):
        linkable = [(s, d) for s, d in span_decisions if d.variant != retrieval.NO_MATCH]
        if chat is not None and cfg.chat.concurrency > 1 and len(linkable) > 1:
            with ThreadPoolExecutor(max_workers=cfg.chat.concurrency) as pool:
                results = list(pool.map(_link_one, linkable))
        else:
            results = [_link_one(item) for item in linkable]
        for mention, warning in results:
            if warning:
                warnings.append(warning)
            elif mention is not None:
                mentions.append(mention)

    with timer.time("resolve"):
        policy = postprocess.policy_for_strategy(cfg.extraction.strategy)
        resolved = postprocess.resolve_overlaps(mentions, policy)

    return DocOutcome(doc_id=doc.doc_id, mentions=resolved, decisions=decisions,
                      span_count=len(spans), warnings=warnings)


def run(cfg: RunConfig, embedder: Embedder | None = None, chat=None) -> RunResult:
    """Execute the full pipeline for one configuration.

    ``embedder`` and ``chat`` override the configured backends when given
    (used by tests and by callers that manage backend lifecycles).
    """
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    timer = _StageTimer()
    t_start = time.perf_counter()

    with timer.time("ontology"):
        onto = load_ontology(cfg.ontology)
    onto_hash = content_hash(onto)

    if embedder is None:
        embedder = build_embedder(cfg.embedder)
    if chat is None:
        chat = build_chat_client(cfg.chat)
    cache = ReplyCache(Path(cfg.cache_dir) / "replies") if cfg.cache_dir else None

    index_path = cfg.retrieval.index_path
    if index_path and Path(index_path).exists():
        with timer.time("index_load"):
            index = retrieval.load_index(index_path)
    else:
        with timer.time("index_build"):
            index = retrieval.build_index(onto, embedder)
        if index_path:
            retrieval.save_index(index, index_path)
    index_hash = retrieval.index_content_hash(index)

    corpus = ingest_corpus(cfg.corpus_path)
    lexicon = extraction.load_function_words(cfg.extraction.lexicon_path) \
        if cfg.extraction.lexicon_path else None
    segments_by_doc = extraction.load_segments(cfg.extraction.segments_path) \
        if cfg.extraction.segments_path else {}

    def work(doc: Document) -> DocOutcome:
        return _process_document(doc, cfg, onto, index, embedder, chat, cache,
                                 lexicon, segments_by_doc, timer)

    if cfg.workers > 1 and len(corpus) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            outcomes = list(pool.map(work, corpus.documents))
    else:
        outcomes = [work(doc) for doc in corpus.documents]

    mentions = [m for o in outcomes for m in o.mentions]
    tsv_path, json_path = write_annotations(mentions, out_dir)

    reports: list[evaluation.EvalReport] = []
    validation: list[str] = []
    if cfg.gold_path:
        with timer.time("score"):
            gold = evaluation.load_gold(cfg.gold_path)
            doc_ids = corpus.doc_ids()
            validation = evaluation.validate_gold(gold, doc_ids=doc_ids, ontology=onto)
            reports = [
                evaluation.mention_metrics(mentions, gold, matching=cfg.matching, doc_ids=doc_ids),
                evaluation.document_metrics(mentions, gold, doc_ids=doc_ids),
            ]
        (out_dir / REPORT_JSON).write_text(
            evaluation.report_json(reports, validation, per_document=True) + "\n",
            encoding="utf-8",
        )
        (out_dir / REPORT_TXT).write_text(
            evaluation.render_report(reports, validation, per_document=False) + "\n",
            encoding="utf-8",
        )

    warning_counts: dict[str, int] = {}
    for o in outcomes:
        for w in o.warnings:
            warning_counts[w] = warning_counts.get(w, 0) + 1

    manifest = {
        "config_hash": config_hash(cfg),
        "ontology_hash": onto_hash,
        "index_hash": index_hash,
        "backends": {
            "embedder": embedder.identity,
            "chat": getattr(chat, "model", None) if chat is not None else None,
        },
        "document_unit": "corpus_record",
        "counts": {
            "documents": len(corpus),
            "spans": sum(o.span_count for o in outcomes),
            "decisions": {
                variant: sum(o.decisions[variant] for o in outcomes)
                for variant in (retrieval.DIRECT, retrieval.AMBIGUOUS, retrieval.NO_MATCH)
            },
            "mentions": len(mentions),
            "skipped_entities": sum(warning_counts.values()),
        },
        "warnings": [
            {"message": msg, "count": n} for msg, n in sorted(warning_counts.items())
        ],
        "timings_seconds": {k: round(v, 6) for k, v in sorted(timer.seconds.items())},
        "total_seconds": round(time.perf_counter() - t_start, 6),
        "outputs": {
            "annotations_tsv": str(tsv_path),
            "annotations_json": str(json_path),
        },
    }
    (out_dir / MANIFEST_JSON).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return RunResult(mentions=mentions, reports=reports, manifest=manifest, output_dir=out_dir)
