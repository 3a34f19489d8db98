"""Embedding providers, a persisted embedding cache, and cosine top-k retrieval.

The index is an exhaustive scan over unit-normalized vectors: libraries
top out around 75k actions, so exact search is both affordable and
oracle-equal by construction. Ties break by insertion order.
"""

from __future__ import annotations

import hashlib
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import requests

from .dataset import ActionLibrary
from .grounding import normalize


class ProviderError(Exception):
    """Bad provider behavior: wrong dimension, non-finite values, zero vectors."""


class RetrievalBackendError(ProviderError):
    """Embedding transport failed after the retry budget."""


@dataclass(frozen=True, eq=False)
class Embedding:
    values: np.ndarray

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])

    @staticmethod
    def of(values: Sequence[float]) -> "Embedding":
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise ProviderError("embedding must be a non-empty 1-D vector")
        if not np.all(np.isfinite(arr)):
            raise ProviderError("embedding contains non-finite components")
        return Embedding(arr)


class EmbeddingProvider(Protocol):
    id: str
    dim: int

    def embed(self, texts: Sequence[str]) -> list[list[float]]: ...


class HashingEmbedder:
    """Deterministic offline embedder: whitespace tokens hashed into a signed bag.

    Same text always yields the same vector for a given (dim, seed), across
    processes, so it doubles as the test-time stand-in for a live service.
    """

    def __init__(self, dim: int = 256, seed: int = 0):
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = dim
        self.seed = seed
        self.id = f"hash{dim}-seed{seed}"

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        out = []
        for text in texts:
            vec = np.zeros(self.dim, dtype=np.float64)
            for token in text.split():
                digest = hashlib.sha256(f"{self.seed}\x1f{token}".encode("utf-8")).digest()
                idx = int.from_bytes(digest[:4], "big") % self.dim
                sign = 1.0 if digest[4] & 1 else -1.0
                vec[idx] += sign
            norm = float(np.linalg.norm(vec))
            if norm > 0.0:
                vec /= norm
            out.append(vec.tolist())
        return out


class HttpEmbeddingProvider:
    """Client for an embeddings endpoint taking {model, input} and returning one vector per input."""

    def __init__(
        self,
        url: str,
        model: str,
        api_key: str | None = None,
        dim: int | None = None,
        timeout: float = 60.0,
        transport_retries: int = 3,
        backoff_s: float = 0.5,
        session: requests.Session | None = None,
    ):
        self.url = url
        self.model = model
        self.dim = dim or 0
        self.id = f"http:{model}"
        self._headers = {"Content-Type": "application/json"}
        if api_key:
            self._headers["Authorization"] = f"Bearer {api_key}"
        self._timeout = timeout
        self._retries = max(1, transport_retries)
        self._backoff = backoff_s
        self._session = session or requests.Session()

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        payload = {"model": self.model, "input": list(texts)}
        last: Exception | None = None
        for attempt in range(self._retries):
            try:
                resp = self._session.post(
                    self.url, json=payload, headers=self._headers, timeout=self._timeout
                )
                resp.raise_for_status()
                data = resp.json()["data"]
                if any("index" in item for item in data):
                    data = sorted(data, key=lambda item: item.get("index", 0))
                vectors = [item["embedding"] for item in data]
                if len(vectors) != len(texts):
                    raise ProviderError(
                        f"expected {len(texts)} embeddings, got {len(vectors)}"
                    )
                if not self.dim:
                    self.dim = len(vectors[0])
                return vectors
            except ProviderError:
                raise
            except Exception as exc:  # noqa: BLE001 - transport layer
                last = exc
                if attempt + 1 < self._retries:
                    time.sleep(self._backoff * (2**attempt))
        raise RetrievalBackendError(f"embedding request failed after {self._retries} tries: {last}")


class EmbeddingCache:
    """Append-only on-disk cache keyed by (provider_id, exact text).

    One record per line: provider_id, SHA-256 of the text, dimension, and
    comma-separated decimal components, tab-separated. Writes are
    serialized; a torn trailing line from an interrupted writer is skipped
    on load.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._mem: dict[tuple[str, str], list[float]] = {}
        if self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                try:
                    provider_id, digest, dim, body = line.split("\t")
                    values = [float(x) for x in body.split(",")]
                    if len(values) != int(dim):
                        continue
                except ValueError:
                    continue
                self._mem[(provider_id, digest)] = values

    @staticmethod
    def _digest(text: str) -> str:
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def get(self, provider_id: str, text: str) -> list[float] | None:
        return self._mem.get((provider_id, self._digest(text)))

    def put(self, provider_id: str, text: str, values: Sequence[float]) -> None:
        digest = self._digest(text)
        line = "\t".join(
            [provider_id, digest, str(len(values)), ",".join(repr(float(v)) for v in values)]
        )
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(line + "\n")
            self._mem[(provider_id, digest)] = list(values)


def embed_batch(
    provider: EmbeddingProvider,
    texts: Sequence[str],
    cache: EmbeddingCache | None = None,
) -> list[Embedding]:
    """Embed each text once, serving cache hits without touching the provider."""
    if not texts:
        raise ValueError("texts must be non-empty")
    for text in texts:
        if not text.strip():
            raise ValueError("texts must be non-empty after trimming")

    results: list[Embedding | None] = [None] * len(texts)
    missing: list[int] = []
    for i, text in enumerate(texts):
        hit = cache.get(provider.id, text) if cache is not None else None
        if hit is not None:
            results[i] = Embedding.of(hit)
        else:
            missing.append(i)

    if missing:
        fresh = provider.embed([texts[i] for i in missing])
        if len(fresh) != len(missing):
            raise ProviderError("provider returned a mismatched number of embeddings")
        for i, values in zip(missing, fresh):
            emb = Embedding.of(values)
            if provider.dim and emb.dim != provider.dim:
                raise ProviderError(
                    f"provider {provider.id} returned dim {emb.dim}, expected {provider.dim}"
                )
            if cache is not None:
                cache.put(provider.id, texts[i], emb.values.tolist())
            results[i] = emb

    dims = {e.dim for e in results}  # type: ignore[union-attr]
    if len(dims) > 1:
        raise ProviderError(f"inconsistent embedding dimensions: {sorted(dims)}")
    return results  # type: ignore[return-value]


@dataclass(eq=False)
class ActionIndex:
    """Read-only similarity index over a library; immutable after build."""

    actions: list[str]
    vectors: list[Embedding]
    provider_id: str
    library: ActionLibrary
    provider: EmbeddingProvider
    cache: EmbeddingCache | None = None
    _unit: np.ndarray = field(init=False, repr=False)
    _dup_groups: list[list[int]] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if len(self.actions) != len(self.vectors):
            raise ProviderError("actions and vectors must be parallel")
        keys = [normalize(a) for a in self.actions]
        if len(set(keys)) != len(keys):
            raise ProviderError("index actions must be unique by normalization key")
        matrix = np.stack([e.values for e in self.vectors])
        norms = np.linalg.norm(matrix, axis=1)
        if np.any(norms == 0.0):
            bad = self.actions[int(np.argmin(norms))]
            raise ProviderError(f"zero-norm embedding for action {bad!r}")
        self._unit = matrix / norms[:, None]
        # BLAS may round identical rows differently depending on position;
        # duplicate-content rows are grouped so they score identically and
        # tie-break by insertion order as promised.
        groups: dict[bytes, list[int]] = {}
        for i in range(matrix.shape[0]):
            groups.setdefault(matrix[i].tobytes(), []).append(i)
        self._dup_groups = [idxs for idxs in groups.values() if len(idxs) > 1]

    def __len__(self) -> int:
        return len(self.actions)


def build_index(
    library: ActionLibrary,
    provider: EmbeddingProvider,
    cache: EmbeddingCache | None = None,
) -> ActionIndex:
    if not library.actions:
        raise ValueError("library must be non-empty")
    vectors = embed_batch(provider, library.actions, cache)
    return ActionIndex(
        actions=list(library.actions),
        vectors=vectors,
        provider_id=provider.id,
        library=library,
        provider=provider,
        cache=cache,
    )


def retrieve(index: ActionIndex, query: str, k: int) -> list[str]:
    """Top-k actions by cosine similarity to the query, descending, stable ties."""
    if k < 1:
        raise ValueError("k must be >= 1")
    emb = embed_batch(index.provider, [query], index.cache)[0]
    norm = float(np.linalg.norm(emb.values))
    if norm == 0.0:
        raise ProviderError(f"zero-norm embedding for query {query!r}")
    sims = index._unit @ (emb.values / norm)
    for group in index._dup_groups:
        sims[group[1:]] = sims[group[0]]
    order = sorted(range(len(index)), key=lambda i: (-sims[i], i))
    return [index.actions[i] for i in order[:k]]


def retrieve_multi(
    index: ActionIndex,
    queries: Sequence[str],
    per_query_k: int,
    total_budget: int | None = None,
) -> list[str]:
    """Per-query retrieval concatenated in query order, deduplicated, optionally truncated."""
    if not queries:
        raise ValueError("queries must be non-empty")
    merged: list[str] = []
    seen: set[str] = set()
    for query in queries:
        for action in retrieve(index, query, per_query_k):
            key = normalize(action)
            if key not in seen:
                seen.add(key)
                merged.append(action)
    if total_budget is not None:
        merged = merged[:total_budget]
    return merged
