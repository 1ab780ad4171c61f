"""Shared fixtures: embedding providers, stores, and scorer factories."""

from __future__ import annotations

import numpy as np
import pytest

from memcycle.core import MemoryStore, MemoryUnit
from memcycle.embeddings import MockEmbeddings
from memcycle.metrics import EmotionScorer, ImportanceScorer, MetricConfig


@pytest.fixture
def embedder():
    return MockEmbeddings(dim=32, seed=11)


@pytest.fixture
def metric_config(embedder):
    return MetricConfig(
        emotion=EmotionScorer.init(dim=embedder.dim, hidden=16, seed=3),
        importance=ImportanceScorer.init(dim=embedder.dim, proj=8, seed=4),
    )


@pytest.fixture
def make_store(embedder):
    """Factory building a store of simple text units at increasing steps."""

    def build(texts: list[str], steps: list[int] | None = None) -> MemoryStore:
        store = MemoryStore(dim=embedder.dim)
        for i, text in enumerate(texts):
            step = steps[i] if steps is not None else i + 1
            store.insert(MemoryUnit(text=text, embedding=embedder.embed(text), step=step))
        return store

    return build


@pytest.fixture
def random_unit_factory():
    """Units with random embeddings, for numeric tests that skip real text."""

    def build(gen: np.random.Generator, dim: int, step: int, text: str = "unit") -> MemoryUnit:
        vec = gen.standard_normal(dim)
        return MemoryUnit(text=text, embedding=vec / np.linalg.norm(vec), step=step)

    return build
