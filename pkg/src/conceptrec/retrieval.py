"""Dense alias index and two-threshold candidate retrieval.

Every ontology alias is embedded once and searched exactly (vectorized dot
products over the whole matrix); alias scores collapse to per-concept maxima.
A query resolves three ways: direct link when the best score clears the high
threshold, an in-band candidate set for the linker, or no match.

Exact search is deliberate: alias counts at ontology scale stay small enough
that a full scan is fast, and results are reproducible bit-for-bit. An ANN
index could replace the scan inside `top_k_concepts` without touching the
decision logic.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embedding import Embedder
from .extraction import EntitySpan
from .ontology import Ontology, alias_list

MAGIC = b"CRIX"
FORMAT_VERSION = 1

DIRECT = "direct"
AMBIGUOUS = "ambiguous"
NO_MATCH = "no_match"

_KIND_CODES = {"name": 0, "synonym": 1, "xref": 2}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


class IndexFormatError(ValueError):
    """Raised when an index file is unreadable or inconsistent."""


@dataclass(frozen=True)
class Candidate:
    concept_id: str
    best_alias: str
    score: float


@dataclass(frozen=True)
class RetrievalDecision:
    variant: str
    candidates: tuple[Candidate, ...] = ()

    @property
    def candidate(self) -> Candidate:
        if self.variant != DIRECT:
            raise ValueError(f"decision variant {self.variant} has no single candidate")
        return self.candidates[0]


class ConceptIndex:
    """Immutable alias-level vector index over one ontology."""

    def __init__(
        self,
        aliases: list[str],
        concept_ids: list[str],
        kinds: list[str],
        vectors: np.ndarray,
        ontology_label: str = "",
    ):
        n = len(aliases)
        if not (len(concept_ids) == len(kinds) == n and vectors.shape[0] == n):
            raise IndexFormatError("entry arrays have inconsistent lengths")
        self.aliases = list(aliases)
        self.concept_ids = list(concept_ids)
        self.kinds = list(kinds)
        self.vectors = np.ascontiguousarray(vectors, dtype=np.float64)
        self.ontology_label = ontology_label
        self.dimension = int(vectors.shape[1]) if n else 0
        # group rows by concept for the per-concept max collapse
        self._unique_ids = sorted(set(concept_ids))
        id_pos = {cid: i for i, cid in enumerate(self._unique_ids)}
        self._concept_codes = np.array([id_pos[c] for c in concept_ids], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.aliases)

    @property
    def unique_concept_ids(self) -> list[str]:
        return list(self._unique_ids)

    def entries(self) -> list[tuple[str, str, str, np.ndarray]]:
        return [
            (self.aliases[i], self.concept_ids[i], self.kinds[i], self.vectors[i])
            for i in range(len(self.aliases))
        ]


def build_index(ontology: Ontology, backend: Embedder) -> ConceptIndex:
    """Embed every alias of the ontology; one index row per alias entry."""
    entries = alias_list(ontology)
    if not entries:
        raise ValueError("ontology has no non-obsolete concepts to index")
    aliases = [e[0] for e in entries]
    concept_ids = [e[1] for e in entries]
    kinds = [e[2] for e in entries]

    vectors = np.empty((len(aliases), backend.dimension), dtype=np.float64)
    step = backend.batch_size
    for i in range(0, len(aliases), step):
        chunk = aliases[i:i + step]
        try:
            rows = backend.embed_batch(chunk)
        except Exception as exc:
            raise type(exc)(
                f"{exc} (while embedding alias batch {i}..{i + len(chunk) - 1}, "
                f"first alias {chunk[0]!r})"
            ) from exc
        vectors[i:i + len(chunk)] = rows
    return ConceptIndex(aliases, concept_ids, kinds, vectors, ontology.source_label)


def _entries_blob(index: ConceptIndex) -> bytes:
    parts = []
    for alias, cid, kind in zip(index.aliases, index.concept_ids, index.kinds):
        a = alias.encode("utf-8")
        c = cid.encode("utf-8")
        parts.append(struct.pack("<I", len(a)) + a + struct.pack("<I", len(c)) + c
                     + struct.pack("<B", _KIND_CODES[kind]))
    return b"".join(parts)


def index_content_hash(index: ConceptIndex) -> str:
    h = hashlib.sha256()
    h.update(_entries_blob(index))
    h.update(index.vectors.tobytes())
    return h.hexdigest()


def save_index(index: ConceptIndex, path: str | Path) -> str:
    """Write the binary container; returns the content hash stored in the header."""
    blob = _entries_blob(index)
    digest = index_content_hash(index)
    header = json.dumps(
        {
            "dimension": index.dimension,
            "count": len(index),
            "ontology_label": index.ontology_label,
            "content_hash": digest,
        },
        sort_keys=True,
    ).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(index.vectors.tobytes())
    return digest


def read_index_header(path: str | Path) -> dict:
    with Path(path).open("rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise IndexFormatError(f"{path}: not a concept index file")
        version = struct.unpack("<I", fh.read(4))[0]
        if version != FORMAT_VERSION:
            raise IndexFormatError(f"{path}: unsupported index version {version}")
        header_len = struct.unpack("<I", fh.read(4))[0]
        return json.loads(fh.read(header_len).decode("utf-8"))


def load_index(path: str | Path) -> ConceptIndex:
    with Path(path).open("rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise IndexFormatError(f"{path}: not a concept index file")
        version = struct.unpack("<I", fh.read(4))[0]
        if version != FORMAT_VERSION:
            raise IndexFormatError(f"{path}: unsupported index version {version}")
        header_len = struct.unpack("<I", fh.read(4))[0]
        header = json.loads(fh.read(header_len).decode("utf-8"))
        blob_len = struct.unpack("<Q", fh.read(8))[0]
        blob = fh.read(blob_len)
        count = header["count"]
        dim = header["dimension"]
        aliases, concept_ids, kinds = [], [], []
        pos = 0
        for _ in range(count):
            (alen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            aliases.append(blob[pos:pos + alen].decode("utf-8"))
            pos += alen
            (clen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            concept_ids.append(blob[pos:pos + clen].decode("utf-8"))
            pos += clen
            (kcode,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            kinds.append(_KIND_NAMES[kcode])
        vec_bytes = fh.read(count * dim * 8)
        vectors = np.frombuffer(vec_bytes, dtype=np.float64).reshape(count, dim).copy()
    index = ConceptIndex(aliases, concept_ids, kinds, vectors, header.get("ontology_label", ""))
    stored = header.get("content_hash")
    if stored and stored != index_content_hash(index):
        raise IndexFormatError(f"{path}: content hash mismatch (file corrupted or stale)")
    return index


def export_vector_file(index: ConceptIndex, path: str | Path) -> None:
    """Dump index vectors in the inspectable text vector format."""
    from .embedding import dump_vector_file

    mapping = {}
    for alias, vec in zip(index.aliases, index.vectors):
        mapping.setdefault(alias, vec)
    dump_vector_file(path, index.dimension, mapping)


def _per_concept_scores(index: ConceptIndex, query_vector: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Max dot product per concept; also the first alias row achieving the max."""
    scores = index.vectors @ query_vector
    codes = index._concept_codes
    n_concepts = len(index.unique_concept_ids)
    best = np.full(n_concepts, -np.inf, dtype=np.float64)
    np.maximum.at(best, codes, scores)
    at_max = scores == best[codes]
    best_row = np.full(n_concepts, len(scores), dtype=np.int64)
    np.minimum.at(best_row, codes[at_max], np.nonzero(at_max)[0])
    return best, best_row


def top_k_concepts(index: ConceptIndex, query_vector: np.ndarray, k: int) -> list[Candidate]:
    """The k most similar distinct concepts, score-descending.

    Equal scores order by lexicographically smaller concept ID so results are
    stable across runs and ontology releases.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    query_vector = np.asarray(query_vector, dtype=np.float64)
    if query_vector.shape != (index.dimension,):
        raise ValueError(f"query vector has shape {query_vector.shape}, index dimension {index.dimension}")
    ids = index.unique_concept_ids
    best, best_row = _per_concept_scores(index, query_vector)
    # _unique_ids is lexicographically sorted, so a stable sort on -score
    # breaks score ties toward the smaller concept ID.
    order = np.argsort(-best, kind="stable")
    out = []
    for i in order[:k]:
        out.append(Candidate(concept_id=ids[i], best_alias=index.aliases[best_row[i]], score=float(best[i])))
    return out


def query(
    index: ConceptIndex,
    entity: EntitySpan,
    backend: Embedder,
    tau1: float = 0.95,
    tau2: float = 0.85,
    k: int = 5,
) -> RetrievalDecision:
    """Three-way retrieval decision for one entity span.

    Best per-concept score >= tau1 links directly; a best score inside
    [tau2, tau1) yields up to k candidates whose scores all lie in that band;
    anything lower is no match.
    """
    if not (0.0 <= tau2 < tau1 <= 1.0):
        raise ValueError(f"thresholds must satisfy 0 <= tau2 < tau1 <= 1, got tau1={tau1}, tau2={tau2}")
    if k < 1:
        raise ValueError("k must be >= 1")
    query_vector = backend.embed_batch([entity.text])[0]
    top = top_k_concepts(index, query_vector, k)
    if not top:
        return RetrievalDecision(variant=NO_MATCH)
    best = top[0].score
    if best >= tau1:
        return RetrievalDecision(variant=DIRECT, candidates=(top[0],))
    if best >= tau2:
        in_band = tuple(c for c in top if tau2 <= c.score < tau1)
        return RetrievalDecision(variant=AMBIGUOUS, candidates=in_band)
    return RetrievalDecision(variant=NO_MATCH)
