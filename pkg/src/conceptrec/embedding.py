"""Text-to-vector backends behind one contract.

Three interchangeable backends: an HTTP service speaking a minimal JSON
protocol, a precomputed vector file for replaying frozen embeddings, and a
deterministic token-hash mock for tests. Every backend returns L2-normalized
float64 vectors so retrieval can use plain dot products as cosine similarity.
"""

from __future__ import annotations

import hashlib
import threading
import time
from pathlib import Path

import numpy as np
import requests


class EmbeddingError(RuntimeError):
    """Base class for backend failures."""


class BackendRequestError(EmbeddingError):
    """HTTP backend failed after retries; carries the last status/reason."""

    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class LookupMissError(EmbeddingError):
    """File backend has no vector for the requested text."""


class DimensionMismatchError(EmbeddingError):
    """A backend emitted a vector of the wrong length."""


def normalize(v: np.ndarray) -> np.ndarray:
    """Scale to unit L2 norm. Zero vectors cannot be normalized."""
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise EmbeddingError("cannot normalize a zero vector")
    return v / norm


def mock_embed(text: str, dimension: int, seed: int = 0) -> np.ndarray:
    """Deterministic bag-of-tokens hash embedding.

    Each whitespace token of the lowercased text is hashed (with the seed)
    to a bucket and a +/-1 contribution; contributions are summed and the
    result normalized. Identical token multisets give identical vectors and
    shared tokens raise cosine similarity.
    """
    tokens = text.lower().split()
    if not tokens:
        raise EmbeddingError(f"cannot embed text with no tokens: {text!r}")
    v = np.zeros(dimension, dtype=np.float64)
    for tok in tokens:
        digest = hashlib.sha256(f"{seed}\x00{tok}".encode("utf-8")).digest()
        bucket = int.from_bytes(digest[:8], "big") % dimension
        sign = 1.0 if digest[8] & 1 else -1.0
        v[bucket] += sign
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        # opposing signs cancelled out; nudge deterministically via first token
        digest = hashlib.sha256(f"{seed}\x01{tokens[0]}".encode("utf-8")).digest()
        v[int.from_bytes(digest[:8], "big") % dimension] = 1.0
        norm = 1.0
    return v / norm


class Embedder:
    """Shared embed_batch contract with a thread-safe per-run text cache."""

    dimension: int
    identity: str

    def __init__(self, dimension: int, batch_size: int = 64, cache: bool = True):
        if dimension <= 0:
            raise ValueError("dimension must be positive")
        if batch_size <= 0:
            raise ValueError("batch_size must be positive")
        self.dimension = dimension
        self.batch_size = batch_size
        self._cache: dict[str, np.ndarray] | None = {} if cache else None
        self._lock = threading.Lock()

    def _embed_uncached(self, texts: list[str]) -> list[np.ndarray]:
        raise NotImplementedError

    def embed_batch(self, texts: list[str]) -> list[np.ndarray]:
        """One unit-norm vector per text, in input order."""
        for t in texts:
            if not isinstance(t, str) or not t:
                raise ValueError(f"texts must be non-empty strings, got {t!r}")
        if self._cache is None:
            return self._check(texts, self._embed_uncached(texts))

        with self._lock:
            missing = [t for t in texts if t not in self._cache]
            # preserve first-occurrence order, dedupe repeats within the batch
            missing = list(dict.fromkeys(missing))
        if missing:
            fresh = self._check(missing, self._embed_uncached(missing))
            with self._lock:
                for t, v in zip(missing, fresh):
                    self._cache[t] = v
        with self._lock:
            return [self._cache[t] for t in texts]

    def _check(self, texts: list[str], vectors: list[np.ndarray]) -> list[np.ndarray]:
        out = []
        for t, v in zip(texts, vectors):
            v = np.asarray(v, dtype=np.float64)
            if v.shape != (self.dimension,):
                raise DimensionMismatchError(
                    f"backend returned dimension {v.shape} for {t!r}, expected ({self.dimension},)"
                )
            out.append(normalize(v))
        return out

    def cache_snapshot(self) -> dict[str, np.ndarray]:
        """Copy of every text->vector pair embedded so far (for freezing fixtures)."""
        if self._cache is None:
            return {}
        with self._lock:
            return dict(self._cache)


class MockEmbedder(Embedder):
    """Offline deterministic backend; similarity is controlled by token overlap."""

    def __init__(self, dimension: int = 256, seed: int = 0, batch_size: int = 64, cache: bool = True):
        super().__init__(dimension, batch_size, cache)
        self.seed = seed
        self.identity = f"mock(dim={dimension},seed={seed})"

    def _embed_uncached(self, texts: list[str]) -> list[np.ndarray]:
        return [mock_embed(t, self.dimension, self.seed) for t in texts]


class FileEmbedder(Embedder):
    """Replays vectors from a precomputed vector file; unknown text is an error."""

    def __init__(self, path: str | Path, batch_size: int = 64, cache: bool = True):
        dimension, mapping = load_vector_file(path)
        super().__init__(dimension, batch_size, cache)
        self._mapping = mapping
        self.identity = f"file({Path(path).name},dim={dimension})"

    def _embed_uncached(self, texts: list[str]) -> list[np.ndarray]:
        out = []
        for t in texts:
            if t not in self._mapping:
                raise LookupMissError(f"no precomputed vector for text {t!r}")
            out.append(self._mapping[t])
        return out


class HttpEmbedder(Embedder):
    """POSTs {"inputs": [...]} and expects {"vectors": [[...], ...]}.

    Requests are idempotent, so transient failures are retried with
    exponential backoff (3 attempts starting at 250 ms).
    """

    MAX_ATTEMPTS = 3
    BACKOFF_S = 0.25

    def __init__(
        self,
        endpoint: str,
        dimension: int,
        batch_size: int = 64,
        cache: bool = True,
        timeout: float = 30.0,
        max_inflight: int = 4,
        session: requests.Session | None = None,
        sleep=time.sleep,
    ):
        super().__init__(dimension, batch_size, cache)
        self.endpoint = endpoint
        self.timeout = timeout
        self._session = session or requests.Session()
        self._inflight = threading.BoundedSemaphore(max_inflight)
        self._sleep = sleep
        self.identity = f"http({endpoint},dim={dimension})"

    def _post(self, texts: list[str]) -> list[list[float]]:
        delay = self.BACKOFF_S
        last: Exception | None = None
        for attempt in range(self.MAX_ATTEMPTS):
            try:
                with self._inflight:
                    resp = self._session.post(
                        self.endpoint, json={"inputs": texts}, timeout=self.timeout
                    )
                if resp.status_code == 200:
                    return resp.json()["vectors"]
                last = BackendRequestError(
                    f"embedding endpoint returned {resp.status_code}", status=resp.status_code
                )
            except requests.RequestException as exc:
                last = BackendRequestError(f"embedding request failed: {exc}")
            if attempt + 1 < self.MAX_ATTEMPTS:
                self._sleep(delay)
                delay *= 2
        raise last  # type: ignore[misc]

    def _embed_uncached(self, texts: list[str]) -> list[np.ndarray]:
        vectors: list[np.ndarray] = []
        for i in range(0, len(texts), self.batch_size):
            chunk = texts[i:i + self.batch_size]
            try:
                rows = self._post(chunk)
            except BackendRequestError as exc:
                raise BackendRequestError(
                    f"{exc} (batch of {len(chunk)} starting with {chunk[0]!r})", status=exc.status
                ) from exc
            if len(rows) != len(chunk):
                raise BackendRequestError(
                    f"endpoint returned {len(rows)} vectors for {len(chunk)} inputs"
                )
            vectors.extend(np.asarray(r, dtype=np.float64) for r in rows)
        return vectors


def load_vector_file(path: str | Path) -> tuple[int, dict[str, np.ndarray]]:
    """Parse the text vector format: 'dim=<D>' header, then text<TAB>v1,v2,..."""
    mapping: dict[str, np.ndarray] = {}
    with Path(path).open("r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header.startswith("dim="):
            raise ValueError(f"vector file {path} missing 'dim=<D>' header, got {header!r}")
        dimension = int(header[4:])
        for line_no, raw in enumerate(fh, start=2):
            line = raw.rstrip("\n")
            if not line:
                continue
            try:
                text, values = line.split("\t", 1)
            except ValueError:
                raise ValueError(f"line {line_no}: expected 'text<TAB>values'") from None
            v = np.array([float(x) for x in values.split(",")], dtype=np.float64)
            if v.shape != (dimension,):
                raise DimensionMismatchError(
                    f"line {line_no}: vector of length {v.size}, header says {dimension}"
                )
            mapping[text] = v
    return dimension, mapping


def dump_vector_file(path: str | Path, dimension: int, mapping: dict[str, np.ndarray]) -> None:
    """Write vectors in the text format FileEmbedder loads (exact float repr)."""
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(f"dim={dimension}\n")
        for text in sorted(mapping):
            values = ",".join(repr(float(x)) for x in mapping[text])
            fh.write(f"{text}\t{values}\n")
