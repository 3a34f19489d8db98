"""Shared test plumbing: lookup-table embedders and call-counting wrappers."""

from __future__ import annotations

import json
from typing import Sequence

from groundplan.gateway import ScriptedBackend


class MappingProvider:
    """Embedder backed by an explicit text-to-vector table."""

    def __init__(self, table: dict[str, Sequence[float]], id: str = "mapping"):
        self.table = {k: list(v) for k, v in table.items()}
        self.id = id
        self.dim = len(next(iter(table.values())))

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        return [list(self.table[t]) for t in texts]


class CountingProvider:
    """Delegating embedder that counts provider invocations and texts embedded."""

    def __init__(self, inner):
        self.inner = inner
        self.id = inner.id
        self.calls = 0
        self.texts_embedded = 0

    @property
    def dim(self):
        return self.inner.dim

    def embed(self, texts):
        self.calls += 1
        self.texts_embedded += len(texts)
        return self.inner.embed(texts)


def script_backend(world, name: str, **kwargs) -> ScriptedBackend:
    """Fresh deterministic backend for one named TinyWorld transcript."""
    return ScriptedBackend.from_dict(world.scripts[name], **kwargs)


def trace_bytes(trace) -> bytes:
    return json.dumps(trace.to_dict(), sort_keys=True).encode("utf-8")
