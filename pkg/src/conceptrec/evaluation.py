"""Scoring of predicted mentions against gold standoff annotations.

Mention level: a prediction is correct when an unclaimed gold mention shares
its concept and overlaps its offsets (greedy one-to-one matching within each
document). Document level: per-document concept sets are compared and counts
micro-averaged across documents before computing precision/recall/F1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

ONE_TO_ONE = "one_to_one"
ANY_OVERLAP = "any_overlap"


class GoldFormatError(ValueError):
    """Raised for malformed gold TSV rows."""


class UnknownDocumentError(ValueError):
    """A prediction references a document absent from the corpus."""


@dataclass(frozen=True)
class GoldMention:
    doc_id: str
    start: int
    end: int
    concept_id: str


@dataclass(frozen=True)
class EvalReport:
    level: str
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    per_document: dict[str, dict] = field(default_factory=dict, compare=False)

    def as_dict(self, include_per_document: bool = False) -> dict:
        d = {
            "level": self.level,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
        }
        if include_per_document:
            d["per_document"] = self.per_document
        return d


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    # division-by-zero convention: a metric with zero denominator is 0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def _make_report(level: str, tp: int, fp: int, fn: int, per_document: dict[str, dict]) -> EvalReport:
    precision, recall, f1 = _prf(tp, fp, fn)
    return EvalReport(level=level, tp=tp, fp=fp, fn=fn,
                      precision=precision, recall=recall, f1=f1,
                      per_document=per_document)


def _coerce(record) -> tuple[str, int, int, str]:
    span = getattr(record, "span", None)
    if span is not None:
        return (span.doc_id, span.start, span.end, record.concept_id)
    return (record.doc_id, record.start, record.end, record.concept_id)


def _group(records) -> dict[str, list[tuple[str, int, int, str]]]:
    grouped: dict[str, list[tuple[str, int, int, str]]] = {}
    for r in records:
        t = _coerce(r)
        grouped.setdefault(t[0], []).append(t)
    return grouped


def _check_docs(pred_docs, doc_ids) -> None:
    if doc_ids is None:
        return
    unknown = sorted(set(pred_docs) - set(doc_ids))
    if unknown:
        raise UnknownDocumentError(f"predictions reference documents not in corpus: {unknown}")


def mention_metrics(pred, gold, matching: str = ONE_TO_ONE, doc_ids=None) -> EvalReport:
    """Micro-averaged mention-level report.

    ``one_to_one`` consumes each gold mention at most once (greedy, both
    sides iterated by offsets); ``any_overlap`` lets one gold mention
    validate every overlapping prediction, for comparison runs.
    """
    if matching not in (ONE_TO_ONE, ANY_OVERLAP):
        raise ValueError(f"unknown matching mode {matching!r}")
    pred_by_doc = _group(pred)
    gold_by_doc = _group(gold)
    _check_docs(pred_by_doc, doc_ids)

    tp = fp = fn = 0
    per_document: dict[str, dict] = {}
    for doc_id in sorted(set(pred_by_doc) | set(gold_by_doc)):
        preds = sorted(pred_by_doc.get(doc_id, ()), key=lambda t: (t[1], t[2], t[3]))
        golds = sorted(gold_by_doc.get(doc_id, ()), key=lambda t: (t[1], t[2], t[3]))
        claimed = [False] * len(golds)
        doc_tp = 0
        for _, ps, pe, pc in preds:
            matched = False
            for i, (_, gs, ge, gc) in enumerate(golds):
                if matching == ONE_TO_ONE and claimed[i]:
                    continue
                if gc == pc and max(ps, gs) < min(pe, ge):
                    claimed[i] = True
                    matched = True
                    break
            if matched:
                doc_tp += 1
        doc_fp = len(preds) - doc_tp
        doc_fn = sum(1 for c in claimed if not c)
        tp += doc_tp
        fp += doc_fp
        fn += doc_fn
        per_document[doc_id] = {"tp": doc_tp, "fp": doc_fp, "fn": doc_fn}
    return _make_report("mention", tp, fp, fn, per_document)


def document_metrics(pred, gold, doc_ids=None) -> EvalReport:
    """Micro-averaged document-level report over per-document concept sets."""
    pred_by_doc = _group(pred)
    gold_by_doc = _group(gold)
    _check_docs(pred_by_doc, doc_ids)

    tp = fp = fn = 0
    per_document: dict[str, dict] = {}
    for doc_id in sorted(set(pred_by_doc) | set(gold_by_doc)):
        pred_set = {t[3] for t in pred_by_doc.get(doc_id, ())}
        gold_set = {t[3] for t in gold_by_doc.get(doc_id, ())}
        doc_tp = len(pred_set & gold_set)
        doc_fp = len(pred_set - gold_set)
        doc_fn = len(gold_set - pred_set)
        tp += doc_tp
        fp += doc_fp
        fn += doc_fn
        per_document[doc_id] = {"tp": doc_tp, "fp": doc_fp, "fn": doc_fn}
    return _make_report("document", tp, fp, fn, per_document)


def load_gold(path: str | Path) -> list[GoldMention]:
    """Parse gold TSV rows: doc_id<TAB>start<TAB>end<TAB>concept_id."""
    mentions: list[GoldMention] = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise GoldFormatError(
                    f"line {line_no}: expected 4 tab-separated fields, got {len(parts)}"
                )
            doc_id, start_s, end_s, concept_id = parts
            try:
                start, end = int(start_s), int(end_s)
            except ValueError:
                raise GoldFormatError(f"line {line_no}: non-integer offsets in {line!r}") from None
            if end <= start:
                raise GoldFormatError(f"line {line_no}: end {end} must exceed start {start}")
            if not doc_id or not concept_id:
                raise GoldFormatError(f"line {line_no}: empty doc_id or concept_id")
            mentions.append(GoldMention(doc_id=doc_id, start=start, end=end, concept_id=concept_id))
    return mentions


def validate_gold(gold: list[GoldMention], doc_ids=None, ontology=None) -> list[str]:
    """Non-fatal validation findings for the report appendix.

    Gold mentions with unknown concepts stay in scoring (they can still be
    matched or counted as misses); this only surfaces them.
    """
    issues: list[str] = []
    if doc_ids is not None:
        known = set(doc_ids)
        for g in gold:
            if g.doc_id not in known:
                issues.append(f"gold mention references unknown document {g.doc_id!r}")
    if ontology is not None:
        missing = sorted({g.concept_id for g in gold if g.concept_id not in ontology})
        for cid in missing:
            issues.append(f"gold concept {cid} not present in the filtered ontology")
    return issues


def render_report(reports: list[EvalReport], validation_issues: list[str] | None = None,
                  per_document: bool = False) -> str:
    """Aligned plain-text table of one or more reports."""
    header = ["level", "tp", "fp", "fn", "precision", "recall", "f1"]
    rows = [
        [r.level, str(r.tp), str(r.fp), str(r.fn),
         f"{r.precision:.4f}", f"{r.recall:.4f}", f"{r.f1:.4f}"]
        for r in reports
    ]
    widths = [max(len(header[i]), *(len(row[i]) for row in rows)) for i in range(len(header))]
    lines = [
        "  ".join(h.ljust(widths[i]) for i, h in enumerate(header)),
        "  ".join("-" * w for w in widths),
    ]
    for row in rows:
        lines.append("  ".join(cell.rjust(widths[i]) if i else cell.ljust(widths[i])
                               for i, cell in enumerate(row)))
    if per_document:
        for r in reports:
            lines.append("")
            lines.append(f"per-document ({r.level}):")
            for doc_id in sorted(r.per_document):
                c = r.per_document[doc_id]
                lines.append(f"  {doc_id}: tp={c['tp']} fp={c['fp']} fn={c['fn']}")
    if validation_issues:
        lines.append("")
        lines.append("validation:")
        lines.extend(f"  - {issue}" for issue in validation_issues)
    return "\n".join(lines)


def report_json(reports: list[EvalReport], validation_issues: list[str] | None = None,
                per_document: bool = False) -> str:
    payload = {
        "reports": [r.as_dict(include_per_document=per_document) for r in reports],
        "validation": validation_issues or [],
    }
    return json.dumps(payload, indent=2, sort_keys=True)
