"""OBO ontology parsing, subtree filtering, and alias enumeration.

Concepts are stored immutably; every downstream module (index build, prompt
rendering) reads from the same frozen store, so it is safe to share one
Ontology across worker threads.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Iterator


class OboParseError(ValueError):
    """Raised when an OBO stream violates the stanza grammar."""


class UnknownConceptError(KeyError):
    """Raised when a concept ID is not present in the ontology."""


_QUOTED_RE = re.compile(r'"((?:[^"\\]|\\.)*)"')
_WS_RE = re.compile(r"\s+")


def normalize_alias(text: str) -> str:
    """Lowercase and collapse runs of whitespace to single spaces."""
    return _WS_RE.sub(" ", text.strip()).lower()


@dataclass(frozen=True)
class Concept:
    """One ontology term with its surface forms and is_a parents."""

    id: str
    name: str
    definition: str | None = None
    synonyms: tuple[str, ...] = ()
    xref_synonyms: tuple[str, ...] = ()
    parents: tuple[str, ...] = ()
    xrefs: tuple[str, ...] = ()
    obsolete: bool = False


@dataclass(frozen=True)
class Ontology:
    """Immutable concept store, optionally filtered under a root."""

    concepts: dict[str, Concept]
    root_id: str | None = None
    source_label: str = ""

    def __len__(self) -> int:
        return len(self.concepts)

    def __contains__(self, concept_id: str) -> bool:
        return concept_id in self.concepts

    def __getitem__(self, concept_id: str) -> Concept:
        try:
            return self.concepts[concept_id]
        except KeyError:
            raise UnknownConceptError(concept_id) from None

    def __iter__(self) -> Iterator[Concept]:
        return iter(self.concepts.values())

    def non_obsolete(self) -> list[Concept]:
        return [c for c in self.concepts.values() if not c.obsolete]


def _unquote(value: str, line_no: int, tag: str) -> str:
    m = _QUOTED_RE.search(value)
    if m is None:
        raise OboParseError(f"line {line_no}: {tag} tag has no quoted text: {value!r}")
    return m.group(1).replace('\\"', '"').replace("\\\\", "\\")


def _strip_trailing_comment(value: str) -> str:
    # OBO allows "is_a: HP:0000001 ! name-of-parent"; the comment is noise.
    return value.split("!", 1)[0].strip()


def _dedupe_normalized(values: Iterable[str], taken: set[str]) -> tuple[str, ...]:
    out: list[str] = []
    for v in values:
        key = normalize_alias(v)
        if not key or key in taken:
            continue
        taken.add(key)
        out.append(v)
    return tuple(out)


def parse_obo(stream, source_label: str = "") -> Ontology:
    """Parse OBO 1.2/1.4 text into an Ontology.

    Accepts a binary or text file-like object. One Concept per ``[Term]``
    stanza; non-Term stanzas are skipped. Obsolete terms are kept with
    ``obsolete=True`` so subtree filtering can drop them explicitly.
    """
    if isinstance(stream, (bytes, str)):
        raise TypeError("parse_obo takes a file-like stream; use load_obo for paths")

    concepts: dict[str, Concept] = {}
    in_term = False
    stanza_line = 0
    fields: dict[str, object] = {}

    def flush() -> None:
        nonlocal fields, in_term
        if not in_term:
            return
        cid = fields.get("id")
        if not cid:
            raise OboParseError(f"line {stanza_line}: [Term] stanza has no id")
        if cid in concepts:
            raise OboParseError(f"duplicate concept id {cid}")
        obsolete = bool(fields.get("obsolete", False))
        name = str(fields.get("name", ""))
        if not name and not obsolete:
            raise OboParseError(f"line {stanza_line}: term {cid} has no name")
        taken: set[str] = set()
        synonyms = _dedupe_normalized(fields.get("synonyms", []), taken={normalize_alias(name)} if name else set())
        concepts[str(cid)] = Concept(
            id=str(cid),
            name=name,
            definition=fields.get("definition"),
            synonyms=synonyms,
            parents=tuple(fields.get("parents", [])),
            xrefs=tuple(fields.get("xrefs", [])),
            obsolete=obsolete,
        )
        fields = {}
        in_term = False

    line_no = 0
    for raw in stream:
        line_no += 1
        if isinstance(raw, bytes):
            raw = raw.decode("utf-8")
        line = raw.strip()
        if not line:
            continue
        if line.startswith("["):
            flush()
            if line == "[Term]":
                in_term = True
                stanza_line = line_no
                fields = {}
            continue
        if not in_term:
            # header metadata or non-Term stanza content
            continue
        if ":" not in line:
            raise OboParseError(f"line {line_no}: expected 'tag: value', got {line!r}")
        tag, value = line.split(":", 1)
        tag = tag.strip()
        value = value.strip()
        if tag == "id":
            fields["id"] = value
        elif tag == "name":
            fields["name"] = value
        elif tag == "def":
            fields["definition"] = _unquote(value, line_no, "def")
        elif tag == "synonym":
            fields.setdefault("synonyms", []).append(_unquote(value, line_no, "synonym"))
        elif tag == "is_a":
            fields.setdefault("parents", []).append(_strip_trailing_comment(value))
        elif tag == "xref":
            fields.setdefault("xrefs", []).append(_strip_trailing_comment(value))
        elif tag == "is_obsolete":
            fields["obsolete"] = value.lower() == "true"
        # other tags (comment, alt_id, subset, ...) are ignored
    flush()
    return Ontology(concepts=concepts, source_label=source_label)


def load_obo(path: str | Path, source_label: str | None = None) -> Ontology:
    p = Path(path)
    with p.open("rb") as fh:
        return parse_obo(fh, source_label=source_label if source_label is not None else p.name)


def dump_obo(ontology: Ontology) -> str:
    """Serialize concepts back to OBO text (round-trips through parse_obo)."""
    chunks: list[str] = []
    for c in ontology.concepts.values():
        lines = ["[Term]", f"id: {c.id}"]
        if c.name:
            lines.append(f"name: {c.name}")
        if c.definition is not None:
            escaped = c.definition.replace("\\", "\\\\").replace('"', '\\"')
            lines.append(f'def: "{escaped}" []')
        for s in c.synonyms:
            escaped = s.replace("\\", "\\\\").replace('"', '\\"')
            lines.append(f'synonym: "{escaped}" []')
        for x in c.xrefs:
            lines.append(f"xref: {x}")
        for p in c.parents:
            lines.append(f"is_a: {p}")
        if c.obsolete:
            lines.append("is_obsolete: true")
        chunks.append("\n".join(lines))
    return "\n\n".join(chunks) + ("\n" if chunks else "")


def subtree_filter(ontology: Ontology, root_id: str) -> Ontology:
    """Restrict to the non-obsolete descendants of root_id (root included).

    Parent lists are pruned to IDs that survive the filter, so the result
    never contains dangling is_a edges.
    """
    if root_id not in ontology.concepts:
        raise UnknownConceptError(f"root concept {root_id} not found in ontology")

    children: dict[str, list[str]] = {}
    for c in ontology:
        for p in c.parents:
            children.setdefault(p, []).append(c.id)

    keep: set[str] = set()
    stack = [root_id]
    while stack:
        cid = stack.pop()
        if cid in keep:
            continue
        concept = ontology.concepts.get(cid)
        if concept is None or concept.obsolete:
            continue
        keep.add(cid)
        stack.extend(children.get(cid, ()))

    filtered = {
        cid: replace(
            ontology.concepts[cid],
            parents=tuple(p for p in ontology.concepts[cid].parents if p in keep),
        )
        for cid in ontology.concepts
        if cid in keep
    }
    return Ontology(concepts=filtered, root_id=root_id, source_label=ontology.source_label)


def load_xref_synonyms(path: str | Path) -> dict[str, list[str]]:
    """Read the sidecar TSV mapping concept_id -> extra synonym strings."""
    mapping: dict[str, list[str]] = {}
    with Path(path).open("r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
                raise OboParseError(
                    f"line {line_no}: expected 'concept_id<TAB>synonym', got {line!r}"
                )
            mapping.setdefault(parts[0].strip(), []).append(parts[1].strip())
    return mapping


def with_xref_synonyms(ontology: Ontology, mapping: dict[str, list[str]]) -> Ontology:
    """Return a copy with xref_synonyms attached from the sidecar mapping.

    Sidecar entries whose normalized form collides with the concept's name
    or an existing synonym are dropped, keeping aliases distinct per concept.
    """
    out: dict[str, Concept] = {}
    for cid, c in ontology.concepts.items():
        extra = mapping.get(cid)
        if not extra:
            out[cid] = c
            continue
        taken = {normalize_alias(c.name)} | {normalize_alias(s) for s in c.synonyms}
        out[cid] = replace(c, xref_synonyms=_dedupe_normalized(extra, taken))
    return Ontology(concepts=out, root_id=ontology.root_id, source_label=ontology.source_label)


KIND_NAME = "name"
KIND_SYNONYM = "synonym"
KIND_XREF = "xref"

_KIND_ORDER = {KIND_NAME: 0, KIND_SYNONYM: 1, KIND_XREF: 2}


def alias_list(ontology: Ontology) -> list[tuple[str, str, str]]:
    """Enumerate (alias, concept_id, kind) over every non-obsolete concept.

    Aliases are normalized (lowercase, single-spaced) and the result is
    deterministically ordered by concept ID, kind, then alias text.
    """
    entries: list[tuple[str, str, str]] = []
    for c in ontology:
        if c.obsolete:
            continue
        entries.append((normalize_alias(c.name), c.id, KIND_NAME))
        for s in c.synonyms:
            entries.append((normalize_alias(s), c.id, KIND_SYNONYM))
        for s in c.xref_synonyms:
            entries.append((normalize_alias(s), c.id, KIND_XREF))
    entries.sort(key=lambda e: (e[1], _KIND_ORDER[e[2]], e[0]))
    return entries


def content_hash(ontology: Ontology) -> str:
    """Stable digest of concept content, used in run manifests."""
    import hashlib

    h = hashlib.sha256()
    for cid in sorted(ontology.concepts):
        c = ontology.concepts[cid]
        h.update(
            "\x1f".join(
                [
                    c.id,
                    c.name,
                    c.definition or "",
                    "\x1e".join(c.synonyms),
                    "\x1e".join(c.xref_synonyms),
                    "\x1e".join(c.parents),
                    "1" if c.obsolete else "0",
                ]
            ).encode("utf-8")
        )
        h.update(b"\x00")
    return h.hexdigest()
