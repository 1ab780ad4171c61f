"""Per-pair metric functions that feed the retrieval gate.

Each metric maps a (query state, memory unit) pair to a scalar:
relevance and the learned emotion / importance similarities are cosines,
and recency is a decreasing power curve over step age. ``metric_vector``
stacks the enabled metrics in a fixed documented order so the gate's
mixture weights line up with named columns.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from memcycle.core import MemoryUnit

EMOTION_DIMS = (
    "joy",
    "acceptance",
    "fear",
    "surprise",
    "sadness",
    "disgust",
    "anger",
    "anticipation",
)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity; raises on zero-norm input."""
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine undefined for zero-norm vectors")
    return float(np.dot(a, b) / (na * nb))


def safe_cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity with zero-norm inputs mapped to 0.

    Keeps ranking total when a learned scorer collapses some input to the
    zero vector.
    """
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


@dataclass
class EmotionScorer:
    """Two-layer tanh network mapping an embedding to eight emotion scores.

    Output order follows :data:`EMOTION_DIMS`.
    """

    w1: np.ndarray  # (hidden, dim)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (8, hidden)
    b2: np.ndarray  # (8,)

    @classmethod
    def init(cls, dim: int, hidden: int = 64, seed: int = 0) -> EmotionScorer:
        gen = np.random.Generator(np.random.PCG64(seed))
        return cls(
            w1=gen.standard_normal((hidden, dim)) / np.sqrt(dim),
            b1=np.zeros(hidden),
            w2=gen.standard_normal((len(EMOTION_DIMS), hidden)) / np.sqrt(hidden),
            b2=np.zeros(len(EMOTION_DIMS)),
        )

    def score(self, embedding: np.ndarray) -> np.ndarray:
        hidden = np.tanh(self.w1 @ embedding + self.b1)
        return self.w2 @ hidden + self.b2

    def score_batch(self, embeddings: np.ndarray) -> np.ndarray:
        hidden = np.tanh(embeddings @ self.w1.T + self.b1)
        return hidden @ self.w2.T + self.b2

    def to_json(self) -> str:
        return json.dumps(
            {
                "w1": self.w1.tolist(),
                "b1": self.b1.tolist(),
                "w2": self.w2.tolist(),
                "b2": self.b2.tolist(),
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, payload: str) -> EmotionScorer:
        data = json.loads(payload)
        return cls(
            w1=np.asarray(data["w1"], dtype=np.float64),
            b1=np.asarray(data["b1"], dtype=np.float64),
            w2=np.asarray(data["w2"], dtype=np.float64),
            b2=np.asarray(data["b2"], dtype=np.float64),
        )


@dataclass
class ImportanceScorer:
    """Asymmetric linear projections scoring memory importance to a query.

    The query and memory sides use separate maps because importance is
    directional: what matters *to this state* is not what the memory is
    about in general.
    """

    w_query: np.ndarray  # (proj, dim)
    b_query: np.ndarray  # (proj,)
    w_memory: np.ndarray  # (proj, dim)
    b_memory: np.ndarray  # (proj,)

    @classmethod
    def init(cls, dim: int, proj: int = 64, seed: int = 0) -> ImportanceScorer:
        gen = np.random.Generator(np.random.PCG64(seed))
        return cls(
            w_query=gen.standard_normal((proj, dim)) / np.sqrt(dim),
            b_query=np.zeros(proj),
            w_memory=gen.standard_normal((proj, dim)) / np.sqrt(dim),
            b_memory=np.zeros(proj),
        )

    def project_query(self, embedding: np.ndarray) -> np.ndarray:
        return self.w_query @ embedding + self.b_query

    def project_memory(self, embedding: np.ndarray) -> np.ndarray:
        return self.w_memory @ embedding + self.b_memory

    def project_memory_batch(self, embeddings: np.ndarray) -> np.ndarray:
        return embeddings @ self.w_memory.T + self.b_memory

    def to_json(self) -> str:
        return json.dumps(
            {
                "w_query": self.w_query.tolist(),
                "b_query": self.b_query.tolist(),
                "w_memory": self.w_memory.tolist(),
                "b_memory": self.b_memory.tolist(),
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, payload: str) -> ImportanceScorer:
        data = json.loads(payload)
        return cls(
            w_query=np.asarray(data["w_query"], dtype=np.float64),
            b_query=np.asarray(data["b_query"], dtype=np.float64),
            w_memory=np.asarray(data["w_memory"], dtype=np.float64),
            b_memory=np.asarray(data["b_memory"], dtype=np.float64),
        )


def d_rel(s_emb: np.ndarray, m_emb: np.ndarray) -> float:
    """Semantic relevance: cosine of the two embeddings."""
    return cosine(s_emb, m_emb)


def d_emo(scorer: EmotionScorer, s_emb: np.ndarray, m_emb: np.ndarray) -> float:
    """Emotional similarity: cosine of the scored emotion vectors (zero -> 0)."""
    return safe_cosine(scorer.score(s_emb), scorer.score(m_emb))


def d_imp(scorer: ImportanceScorer, s_emb: np.ndarray, m_emb: np.ndarray) -> float:
    """Importance of the memory to the query, via the asymmetric projections."""
    return safe_cosine(scorer.project_query(s_emb), scorer.project_memory(m_emb))


def d_rec(t_now: int, step_mem: int, p: float) -> float:
    """Recency score (1 - age/t)^p: 1 for this step's memories, 0 at age t.

    Larger ``p`` makes the curve drop faster, so different powers give the
    gate several horizons to mix over.
    """
    if t_now < 1:
        raise ValueError(f"current step must be >= 1, got {t_now}")
    if p <= 0:
        raise ValueError(f"recency power must be positive, got {p}")
    if step_mem < 0 or step_mem > t_now:
        raise ValueError(f"memory step {step_mem} outside [0, {t_now}]")
    age = t_now - step_mem
    return float((1.0 - age / t_now) ** p)


@dataclass
class MetricConfig:
    """Which metrics are enabled and the scorers that back them."""

    emotion: EmotionScorer | None = None
    importance: ImportanceScorer | None = None
    use_relevance: bool = True
    recency_powers: tuple[float, ...] = (0.5, 1.0, 2.0)

    def names(self) -> list[str]:
        out = []
        if self.use_relevance:
            out.append("relevance")
        if self.emotion is not None:
            out.append("emotion")
        if self.importance is not None:
            out.append("importance")
        out.extend(f"recency_p{p:g}" for p in self.recency_powers)
        return out

    @property
    def size(self) -> int:
        return len(self.names())


@dataclass
class QueryFeatures:
    """Query-side features computed once per ranking call."""

    embedding: np.ndarray
    step: int
    emotion: np.ndarray | None = None
    importance_feat: np.ndarray | None = None


def query_features(cfg: MetricConfig, embedding: np.ndarray, step: int) -> QueryFeatures:
    return QueryFeatures(
        embedding=embedding,
        step=step,
        emotion=None if cfg.emotion is None else cfg.emotion.score(embedding),
        importance_feat=(
            None if cfg.importance is None else cfg.importance.project_query(embedding)
        ),
    )


def _unit_emotion(cfg: MetricConfig, unit: MemoryUnit) -> np.ndarray:
    if unit.emotion is None:
        unit.emotion = cfg.emotion.score(unit.embedding)
    return unit.emotion


def _unit_importance(cfg: MetricConfig, unit: MemoryUnit) -> np.ndarray:
    if unit.importance_feat is None:
        unit.importance_feat = cfg.importance.project_memory(unit.embedding)
    return unit.importance_feat


def metric_vector(cfg: MetricConfig, query: QueryFeatures, unit: MemoryUnit) -> np.ndarray:
    """Stack the enabled per-pair metrics in ``cfg.names()`` order.

    Scored features are cached on the unit so repeated rankings don't
    recompute them; cosines of zero vectors are defined as 0 here to keep
    the ranking total.
    """
    values: list[float] = []
    if cfg.use_relevance:
        values.append(safe_cosine(query.embedding, unit.embedding))
    if cfg.emotion is not None:
        values.append(safe_cosine(query.emotion, _unit_emotion(cfg, unit)))
    if cfg.importance is not None:
        values.append(safe_cosine(query.importance_feat, _unit_importance(cfg, unit)))
    for p in cfg.recency_powers:
        values.append(d_rec(query.step, unit.step, p))
    return np.asarray(values, dtype=np.float64)
