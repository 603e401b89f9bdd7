"""Entity linking through a chat-completion backend.

An ambiguous retrieval decision is rendered into a fixed two-part prompt
listing the candidate concepts with their ontology information; the model
answers with a concept ID (or None) plus a confidence tier, and only HIGH
confidence answers naming an offered candidate become mentions. Direct
retrieval decisions bypass the model entirely.
"""

from __future__ import annotations

import hashlib
import logging
import os
import tempfile
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import requests

from .extraction import EntitySpan
from .ontology import Ontology
from .retrieval import AMBIGUOUS, DIRECT, Candidate, RetrievalDecision

logger = logging.getLogger(__name__)

DIRECT_RETRIEVAL = "direct_retrieval"
LLM_LINKED = "llm_linked"

CONFIDENCE_TIERS = ("HIGH", "MEDIUM", "LOW")

SYSTEM_TEMPLATE = (
    "As an expert clinician, your task is to accurately link the entity using "
    "the concepts listed below. Accuracy is paramount. If the entity does not "
    'precisely refer to any of the concepts listed below, please return "None"; '
    "otherwise, return the corresponding concept ID in the following format:\n"
    "answer:<concept ID or None>\n"
    "confidence:<one of HIGH, LOW, MEDIUM>\n"
    "\n"
    "Here are the concepts:\n"
)

USER_TEMPLATE = "Here is the entity to link:\nlabel: {label}"


class MalformedReplyError(ValueError):
    """The model reply is missing the answer/confidence grammar."""


class ChatRequestError(RuntimeError):
    """Chat backend failed after retries."""

    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


@dataclass(frozen=True)
class PromptPair:
    system: str
    user: str


@dataclass(frozen=True)
class LinkVerdict:
    answer: str | None
    confidence: str
    raw: str


@dataclass(frozen=True)
class LinkedMention:
    span: EntitySpan
    concept_id: str
    provenance: str
    score: float | str


def _candidate_block(candidate: Candidate, ontology: Ontology) -> str:
    concept = ontology[candidate.concept_id]
    lines = [f"id: {concept.id}", f"name: {concept.name}"]
    if concept.definition:
        lines.append(f"definition: {concept.definition}")
    if concept.synonyms:
        lines.append("synonyms: " + ", ".join(concept.synonyms))
    if concept.xref_synonyms:
        lines.append("umls_synonyms: " + ", ".join(concept.xref_synonyms))
    return "\n".join(lines)


def build_prompt(entity: EntitySpan, candidates: tuple[Candidate, ...] | list[Candidate],
                 ontology: Ontology) -> PromptPair:
    """Render the linking prompt; candidates keep their retrieval-score order."""
    if not candidates:
        raise ValueError("build_prompt requires at least one candidate")
    blocks = "\n\n".join(_candidate_block(c, ontology) for c in candidates)
    return PromptPair(
        system=SYSTEM_TEMPLATE + blocks,
        user=USER_TEMPLATE.format(label=entity.text),
    )


def parse_reply(raw: str) -> LinkVerdict:
    """Extract (answer, confidence) from a model reply.

    The first line containing ``answer:`` and the first containing
    ``confidence:`` win (case-insensitive); the value is the first token
    after the marker. ``None`` in any case is the abstention marker.
    """
    answer_token: str | None = None
    confidence_token: str | None = None
    for line in raw.splitlines():
        low = line.lower()
        if answer_token is None:
            pos = low.find("answer:")
            if pos >= 0:
                tokens = line[pos + len("answer:"):].split()
                if tokens:
                    answer_token = tokens[0].strip("\"'`")
        if confidence_token is None:
            pos = low.find("confidence:")
            if pos >= 0:
                tokens = line[pos + len("confidence:"):].split()
                if tokens:
                    confidence_token = tokens[0].strip("\"'`").upper()
    if answer_token is None:
        raise MalformedReplyError(f"reply has no answer line: {raw!r}")
    if confidence_token is None:
        raise MalformedReplyError(f"reply has no confidence line: {raw!r}")
    if confidence_token not in CONFIDENCE_TIERS:
        raise MalformedReplyError(f"confidence {confidence_token!r} not in {CONFIDENCE_TIERS}")
    answer = None if answer_token.lower() == "none" else answer_token
    return LinkVerdict(answer=answer, confidence=confidence_token, raw=raw)


class ReplyCache:
    """On-disk reply store keyed by (model, system, user) hash.

    Entries are written atomically (temp file + rename) so concurrent workers
    can share one cache directory.
    """

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(model: str, prompt: PromptPair) -> str:
        h = hashlib.sha256()
        for part in (model, prompt.system, prompt.user):
            h.update(part.encode("utf-8"))
            h.update(b"\x00")
        return h.hexdigest()

    def _path(self, key: str) -> Path:
        return self.directory / f"{key}.txt"

    def get(self, key: str) -> str | None:
        p = self._path(key)
        try:
            return p.read_text(encoding="utf-8")
        except FileNotFoundError:
            return None

    def put(self, key: str, reply: str) -> None:
        fd, tmp = tempfile.mkstemp(dir=self.directory, suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write(reply)
            os.replace(tmp, self._path(key))
        except BaseException:
            try:
                os.unlink(tmp)
            except OSError:
                pass
            raise


def cached_call(client, prompt: PromptPair, cache: ReplyCache | None = None) -> str:
    """Send the prompt through the client, memoizing replies when a cache is set."""
    if cache is None:
        return client.complete(prompt.system, prompt.user)
    key = ReplyCache.key(client.model, prompt)
    hit = cache.get(key)
    if hit is not None:
        return hit
    reply = client.complete(prompt.system, prompt.user)
    cache.put(key, reply)
    return reply


class TokenBucket:
    """Blocking token-bucket rate limiter (rate tokens/second, burst capacity)."""

    def __init__(self, rate_per_s: float, capacity: float | None = None,
                 clock=time.monotonic, sleep=time.sleep):
        if rate_per_s <= 0:
            raise ValueError("rate_per_s must be positive")
        self.rate = rate_per_s
        self.capacity = capacity if capacity is not None else max(1.0, rate_per_s)
        self._tokens = self.capacity
        self._last = clock()
        self._clock = clock
        self._sleep = sleep
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.rate)
                self._last = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self.rate
            self._sleep(wait)


class HttpChatClient:
    """OpenAI-compatible chat endpoint client.

    Sends ``{"model", "messages", "temperature": 0}`` and reads the assistant
    text from ``choices[0].message.content``. The auth token is read from the
    named environment variable, never stored in configuration.
    """

    MAX_ATTEMPTS = 3
    BACKOFF_S = 0.25

    def __init__(
        self,
        endpoint: str,
        model: str,
        auth_env: str | None = None,
        concurrency: int = 4,
        rate_limit_per_s: float | None = None,
        timeout: float = 60.0,
        session: requests.Session | None = None,
        sleep=time.sleep,
    ):
        self.endpoint = endpoint
        self.model = model
        self._token = os.environ.get(auth_env, "") if auth_env else ""
        self._session = session or requests.Session()
        self._inflight = threading.BoundedSemaphore(concurrency)
        self._bucket = TokenBucket(rate_limit_per_s, sleep=sleep) if rate_limit_per_s else None
        self.timeout = timeout
        self._sleep = sleep

    def complete(self, system: str, user: str) -> str:
        payload = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
            "temperature": 0,
        }
        headers = {}
        if self._token:
            headers["Authorization"] = f"Bearer {self._token}"
        delay = self.BACKOFF_S
        last: Exception | None = None
        for attempt in range(self.MAX_ATTEMPTS):
            if self._bucket is not None:
                self._bucket.acquire()
            try:
                with self._inflight:
                    resp = self._session.post(
                        self.endpoint, json=payload, headers=headers, timeout=self.timeout
                    )
                if resp.status_code == 200:
                    body = resp.json()
                    return body["choices"][0]["message"]["content"]
                last = ChatRequestError(
                    f"chat endpoint returned {resp.status_code}", status=resp.status_code
                )
            except (requests.RequestException, KeyError, IndexError, ValueError) as exc:
                last = ChatRequestError(f"chat request failed: {exc}")
            if attempt + 1 < self.MAX_ATTEMPTS:
                self._sleep(delay)
                delay *= 2
        raise last  # type: ignore[misc]


class ScriptedChatClient:
    """Test double: replies are looked up by the prompt's entity label.

    Counts every call so tests can assert that direct decisions never reach
    the model.
    """

    def __init__(self, replies: dict[str, str] | None = None,
                 default: str = "answer: None\nconfidence: LOW"):
        self.model = "scripted"
        self.replies = dict(replies or {})
        self.default = default
        self.calls = 0
        self._lock = threading.Lock()

    @staticmethod
    def _label_of(user: str) -> str:
        for line in user.splitlines():
            if line.startswith("label: "):
                return line[len("label: "):]
        return user

    def complete(self, system: str, user: str) -> str:
        with self._lock:
            self.calls += 1
        return self.replies.get(self._label_of(user), self.default)


def link(
    entity: EntitySpan,
    decision: RetrievalDecision,
    client,
    ontology: Ontology,
    cache: ReplyCache | None = None,
) -> LinkedMention | None:
    """Resolve one retrieval decision to a linked mention, or abstain.

    Direct decisions are emitted without any model call. Ambiguous decisions
    go through the prompt/parse path and survive only as HIGH-confidence
    answers naming one of the offered candidates. Transport errors propagate
    to the caller; everything else degrades to abstention.
    """
    if decision.variant == DIRECT:
        c = decision.candidate
        return LinkedMention(span=entity, concept_id=c.concept_id,
                             provenance=DIRECT_RETRIEVAL, score=c.score)
    if decision.variant != AMBIGUOUS or not decision.candidates:
        return None

    prompt = build_prompt(entity, decision.candidates, ontology)
    raw = cached_call(client, prompt, cache)
    try:
        verdict = parse_reply(raw)
    except MalformedReplyError as exc:
        logger.warning("malformed reply for %r: %s", entity.text, exc)
        return None
    if verdict.answer is None or verdict.confidence != "HIGH":
        return None
    offered = {c.concept_id for c in decision.candidates}
    if verdict.answer not in offered:
        logger.warning("reply for %r named %s, not among offered candidates %s",
                       entity.text, verdict.answer, sorted(offered))
        return None
    return LinkedMention(span=entity, concept_id=verdict.answer,
                         provenance=LLM_LINKED, score=verdict.confidence)
