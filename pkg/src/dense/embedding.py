"""Embedding providers and batched, normalized embedding.

Two profiles exist: ``retrieval`` (384 dimensions) for chunk search and
``evaluation`` (768 dimensions) for note-level scoring. Each resolves to a
remote HTTP provider or to the offline feature-hashing embedder.
"""

from __future__ import annotations

import hashlib
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Protocol, Sequence

import httpx
import numpy as np

from .providers import (
    DEFAULT_ATTEMPTS,
    DEFAULT_BASE_DELAY,
    DimensionMismatchError,
    TransportError,
    auth_headers,
    call_with_retries,
    post_json,
)

PROFILE_DIMENSIONS = {"retrieval": 384, "evaluation": 768}

_WORD_RE = re.compile(r"[^\W_]+", re.UNICODE)


class EmbeddingProvider(Protocol):
    provider_id: str
    dimension: int
    batch_limit: int

    def embed(self, texts: Sequence[str]) -> list[list[float]]: ...


@dataclass(eq=False)
class EmbeddingVector:
    values: np.ndarray
    provider_id: str

    @property
    def dimension(self) -> int:
        return int(self.values.shape[0])


@lru_cache(maxsize=1 << 18)
def _bucket_and_sign(feature: str, dimension: int) -> tuple[int, float]:
    h = int.from_bytes(hashlib.blake2b(feature.encode("utf-8"), digest_size=8).digest(), "little")
    return h % dimension, (1.0 if (h >> 63) == 0 else -1.0)


def hashing_features(text: str) -> list[str]:
    """Lowercased word unigrams and bigrams; a token-free text is one opaque feature."""
    words = _WORD_RE.findall(text.lower())
    if not words:
        return [text] if text else []
    return words + [f"{a} {b}" for a, b in zip(words, words[1:])]


class HashingEmbedder:
    """Deterministic offline embedder: signed feature hashing of word 1-2-grams."""

    def __init__(self, dimension: int = 384, profile: str = "retrieval", batch_limit: int = 256):
        self.dimension = dimension
        self.profile = profile
        self.batch_limit = batch_limit
        self.provider_id = f"hashing-{profile}-{dimension}"

    def embed_one(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dimension, dtype=np.float64)
        for feature in hashing_features(text):
            bucket, sign = _bucket_and_sign(feature, self.dimension)
            vec[bucket] += sign
        return vec

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        return [self.embed_one(t).tolist() for t in texts]


class RemoteEmbedder:
    """Client for ``POST {base_url}/embed`` returning ``{"vectors": [...], "dimension": D}``."""

    def __init__(
        self,
        base_url: str,
        dimension: int,
        profile: str = "retrieval",
        batch_limit: int = 64,
        api_key: str | None = None,
        timeout: float = 30.0,
        client: httpx.Client | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.dimension = dimension
        self.profile = profile
        self.batch_limit = batch_limit
        self.provider_id = f"remote-{profile}-{dimension}@{self.base_url}"
        self._headers = auth_headers(api_key)
        self._client = client or httpx.Client(timeout=timeout)

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        body = post_json(self._client, f"{self.base_url}/embed", {"texts": list(texts)}, self._headers)
        vectors = body.get("vectors")
        if not isinstance(vectors, list) or len(vectors) != len(texts):
            raise TransportError(f"embed response carried {len(vectors or [])} vectors for {len(texts)} texts")
        if body.get("dimension") not in (None, self.dimension):
            raise DimensionMismatchError(f"provider reports dimension {body.get('dimension')}, expected {self.dimension}")
        return vectors


def make_embedder(
    profile: str,
    url: str | None = None,
    *,
    offline: bool = True,
    api_key: str | None = None,
    dimension: int | None = None,
    client: httpx.Client | None = None,
) -> EmbeddingProvider:
    if profile not in PROFILE_DIMENSIONS:
        raise ValueError(f"unknown embedding profile {profile!r}")
    dim = dimension or PROFILE_DIMENSIONS[profile]
    if offline or not url:
        return HashingEmbedder(dim, profile)
    return RemoteEmbedder(url, dim, profile, api_key=api_key, client=client)


def _normalize(values: Sequence[float], provider: EmbeddingProvider) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] != provider.dimension:
        raise DimensionMismatchError(f"{provider.provider_id} returned shape {arr.shape}, expected ({provider.dimension},)")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{provider.provider_id} returned a non-finite vector")
    norm = float(np.linalg.norm(arr))
    return arr / norm if norm > 0 else arr


def embed_texts(
    provider: EmbeddingProvider,
    texts: Sequence[str],
    *,
    max_workers: int = 1,
    attempts: int = DEFAULT_ATTEMPTS,
    base_delay: float = DEFAULT_BASE_DELAY,
    sleep: Callable[[float], None] = time.sleep,
) -> list[EmbeddingVector]:
    """Embed ``texts`` in provider-sized batches, returning L2-normalized vectors in input order."""
    for i, t in enumerate(texts):
        if not isinstance(t, str) or t == "":
            raise ValueError(f"text {i} is empty; embeddings need non-empty strings")
    size = max(1, provider.batch_limit)
    batches = [list(texts[i:i + size]) for i in range(0, len(texts), size)]

    def run(batch: list[str]) -> list[list[float]]:
        return call_with_retries(
            lambda: provider.embed(batch),
            attempts=attempts,
            base_delay=base_delay,
            sleep=sleep,
            what=f"embed via {provider.provider_id}",
        )

    if max_workers > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            results = list(pool.map(run, batches))
    else:
        results = [run(b) for b in batches]
    out = []
    for batch, raw in zip(batches, results):
        if len(raw) != len(batch):
            raise DimensionMismatchError(f"{provider.provider_id} returned {len(raw)} vectors for {len(batch)} texts")
        out.extend(EmbeddingVector(_normalize(v, provider), provider.provider_id) for v in raw)
    return out


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity with a zero-vector guard, clipped to [-1, 1]."""
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(min(1.0, max(-1.0, float(np.dot(a, b)) / (na * nb))))
