"""Mapping open-vocabulary answers onto the dataset vocabulary.

Resolution order: exact normalized match, then a unique substring match,
then nearest neighbor under an embedding provider, then token-level Jaccard
overlap when no provider is available (or it fails).
"""

from __future__ import annotations

import hashlib
import logging
import re
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Protocol, Sequence

import httpx
import numpy as np

from groundloop.dataset import Vocabulary, normalize_name

logger = logging.getLogger(__name__)

UNMAPPED = -1


class EmbeddingError(RuntimeError):
    pass


class EmbeddingProvider(Protocol):
    def embed(self, texts: Sequence[str]) -> np.ndarray:
        """(len(texts), d) array of unit-norm rows."""
        ...


def _unit_rows(vectors) -> np.ndarray:
    arr = np.asarray(vectors, dtype=np.float64)
    if arr.ndim != 2:
        raise EmbeddingError(f"expected a 2-d array of vectors, got shape {arr.shape}")
    norms = np.linalg.norm(arr, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise EmbeddingError("provider returned a zero vector")
    return arr / norms


class HTTPEmbeddingProvider:
    """Client for ``POST {"texts": [...]}`` -> ``{"vectors": [[...], ...]}``."""

    def __init__(self, url: str, timeout: float = 30.0, batch_size: int = 256,
                 client: Optional[httpx.Client] = None):
        self.url = url
        self.batch_size = batch_size
        self._client = client or httpx.Client(timeout=timeout)

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        rows = []
        for start in range(0, len(texts), self.batch_size):
            batch = list(texts[start:start + self.batch_size])
            try:
                resp = self._client.post(self.url, json={"texts": batch})
                resp.raise_for_status()
                vectors = resp.json()["vectors"]
            except (httpx.HTTPError, KeyError, ValueError) as exc:
                raise EmbeddingError(f"embedding request to {self.url} failed: {exc}") from exc
            if len(vectors) != len(batch):
                raise EmbeddingError(f"sent {len(batch)} texts, got {len(vectors)} vectors")
            rows.extend(vectors)
        return _unit_rows(rows) if rows else np.zeros((0, 0))


_REC_HEAD = struct.Struct("<I32sI")


def text_key(text: str) -> bytes:
    return hashlib.sha256(text.encode("utf-8")).digest()


class CachedEmbeddingProvider:
    """Wraps a provider with a persistent cache keyed by the SHA-256 of the text.

    The cache file is a sequence of records ``<u32 record_len><32-byte
    hash><u32 d><d x f32>`` (little endian), where ``record_len`` counts the
    bytes after itself. A torn trailing record is ignored on load.
    """

    def __init__(self, inner: Optional[EmbeddingProvider], path: Optional[Path | str] = None):
        self.inner = inner
        self.path = Path(path) if path is not None else None
        self._cache: dict[bytes, np.ndarray] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self) -> None:
        data = self.path.read_bytes()
        pos = 0
        while pos + 4 <= len(data):
            (length,) = struct.unpack_from("<I", data, pos)
            if pos + 4 + length > len(data) or length < _REC_HEAD.size - 4:
                logger.warning("ignoring truncated record at byte %d of %s", pos, self.path)
                break
            _, key, d = _REC_HEAD.unpack_from(data, pos)
            vec = np.frombuffer(data, dtype="<f4", count=d, offset=pos + _REC_HEAD.size)
            self._cache[key] = vec.astype(np.float64)
            pos += 4 + length

    def _append(self, items: list[tuple[bytes, np.ndarray]]) -> None:
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "ab") as fh:
            for key, vec in items:
                payload = vec.astype("<f4").tobytes()
                fh.write(_REC_HEAD.pack(_REC_HEAD.size - 4 + len(payload), key, vec.size))
                fh.write(payload)

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        keys = [text_key(t) for t in texts]
        missing = [(k, t) for k, t in dict(zip(keys, texts)).items() if k not in self._cache]
        if missing:
            if self.inner is None:
                raise EmbeddingError(f"{len(missing)} texts not cached and no provider configured")
            vectors = self.inner.embed([t for _, t in missing])
            with self._lock:
                new = [(k, v) for (k, _), v in zip(missing, vectors) if k not in self._cache]
                for k, v in new:
                    self._cache[k] = np.asarray(v, dtype=np.float64)
                self._append(new)
        return _unit_rows([self._cache[k] for k in keys]) if keys else np.zeros((0, 0))


def cosine_argmax(query: np.ndarray, label_vecs: np.ndarray) -> int:
    """Index of the largest dot product; ties go to the smallest index."""
    query = np.asarray(query, dtype=np.float64)
    label_vecs = np.asarray(label_vecs, dtype=np.float64)
    if label_vecs.ndim != 2 or query.ndim != 1 or label_vecs.shape[1] != query.shape[0]:
        raise ValueError(f"dimension mismatch: query {query.shape} vs labels {label_vecs.shape}")
    return int(np.argmax(label_vecs @ query))  # argmax returns the first maximum


_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokens(text: str) -> set[str]:
    return set(_TOKEN_RE.findall(text.lower()))


def jaccard(a: str, b: str) -> float:
    ta, tb = tokens(a), tokens(b)
    if not ta and not tb:
        return 0.0
    return len(ta & tb) / len(ta | tb)


@dataclass(frozen=True)
class LabelMapping:
    raw: str
    mapped_index: int
    score: float
    tier: str  # exact | substring | embedding | lexical | unparsed


class LabelMapper:
    """Maps raw strings to vocabulary indices; vocabulary vectors are
    embedded once and reused."""

    def __init__(self, vocabulary: Vocabulary, provider: Optional[EmbeddingProvider] = None):
        if not len(vocabulary):
            raise ValueError("vocabulary must be non-empty")
        self.vocabulary = vocabulary
        self.provider = provider
        self._norm = [normalize_name(n) for n in vocabulary]
        self._label_vecs: Optional[np.ndarray] = None
        self._lock = threading.Lock()
        self.warnings: list[str] = []

    def _vocab_vectors(self) -> np.ndarray:
        with self._lock:
            if self._label_vecs is None:
                self._label_vecs = self.provider.embed(list(self.vocabulary))
            return self._label_vecs

    def map(self, raw: str) -> LabelMapping:
        from groundloop.responses import UNPARSED

        if raw == UNPARSED:
            return LabelMapping(raw, UNMAPPED, 0.0, "unparsed")
        key = normalize_name(raw)
        idx = self.vocabulary.index(key)
        if idx is not None:
            return LabelMapping(raw, idx, 1.0, "exact")
        if key:
            hits = [i for i, n in enumerate(self._norm) if key in n or n in key]
            if len(hits) == 1:
                return LabelMapping(raw, hits[0], 1.0, "substring")
        if self.provider is not None:
            try:
                q = self.provider.embed([raw])[0]
                vecs = self._vocab_vectors()
                i = cosine_argmax(q, vecs)
                return LabelMapping(raw, i, float(vecs[i] @ q), "embedding")
            except Exception as exc:  # provider failures degrade to lexical matching
                msg = f"embedding provider failed for {raw!r}: {exc}"
                logger.warning(msg)
                self.warnings.append(msg)
        scores = [jaccard(raw, n) for n in self.vocabulary]
        best = max(scores)
        return LabelMapping(raw, scores.index(best), best, "lexical")


def map_to_label(raw: str, vocabulary: Vocabulary, provider: Optional[EmbeddingProvider] = None) -> LabelMapping:
    return LabelMapper(vocabulary, provider).map(raw)
