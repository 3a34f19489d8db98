from __future__ import annotations

from pathlib import Path

import pytest

from groundplan.dataset import DomainKind, load_benchmark
from groundplan.oracle import TinyWorld, load_tiny_world
from groundplan.prompts import default_catalog
from groundplan.retrieval import HashingEmbedder, build_index

FIXTURES = Path(__file__).parent / "fixtures"
TINYWORLD = FIXTURES / "tinyworld"


@pytest.fixture(scope="session")
def provider() -> HashingEmbedder:
    return HashingEmbedder(dim=256, seed=0)


@pytest.fixture(scope="session")
def tiny_world(provider) -> TinyWorld:
    return load_tiny_world(TINYWORLD, provider)


@pytest.fixture(scope="session")
def tiny_index(tiny_world, provider):
    return build_index(tiny_world.benchmark.library, provider)


@pytest.fixture(scope="session")
def tools_bench():
    return load_benchmark(
        TINYWORLD / "tools_tasks.json",
        DomainKind.TOOLS,
        name="tinytools",
        split="out_of_domain",
    )


@pytest.fixture(scope="session")
def tools_index(tools_bench, provider):
    return build_index(tools_bench.library, provider)


@pytest.fixture(scope="session")
def prompts():
    return default_catalog()
