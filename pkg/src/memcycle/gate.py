"""Learned mixture gate over the per-pair metrics, plus its contrastive trainer.

For a (state, memory) pair the gate runs a small two-layer network on the
concatenated embeddings and softmaxes the output, producing one weight per
metric; the match score is the weighted sum of the metric vector. Training
reproduces rankings observed in successful episodes through a weighted
pairwise logistic loss whose gradients are derived by hand, optimized with
plain full-batch gradient descent.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from memcycle.core import MemoryStore, MemoryUnit
from memcycle.metrics import MetricConfig, QueryFeatures, metric_vector

DEFAULT_HIDDEN = 32


@dataclass
class GateParams:
    """Weights of the gating network. Input is [state_emb; memory_emb]."""

    w1: np.ndarray  # (hidden, 2 * dim)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (n_metrics, hidden)
    b2: np.ndarray  # (n_metrics,)

    @property
    def n_metrics(self) -> int:
        return self.w2.shape[0]

    @property
    def dim(self) -> int:
        return self.w1.shape[1] // 2

    @classmethod
    def init(
        cls,
        dim: int,
        n_metrics: int,
        hidden: int = DEFAULT_HIDDEN,
        seed: int = 0,
        scale: float = 0.1,
    ) -> GateParams:
        gen = np.random.Generator(np.random.PCG64(seed))
        return cls(
            w1=gen.standard_normal((hidden, 2 * dim)) * scale / np.sqrt(2 * dim),
            b1=np.zeros(hidden),
            w2=gen.standard_normal((n_metrics, hidden)) * scale / np.sqrt(hidden),
            b2=np.zeros(n_metrics),
        )

    @classmethod
    def zeros(cls, dim: int, n_metrics: int, hidden: int = DEFAULT_HIDDEN) -> GateParams:
        """All-zero weights: the gate starts as a uniform mixture."""
        return cls(
            w1=np.zeros((hidden, 2 * dim)),
            b1=np.zeros(hidden),
            w2=np.zeros((n_metrics, hidden)),
            b2=np.zeros(n_metrics),
        )

    def copy(self) -> GateParams:
        return GateParams(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy())

    def pack(self) -> np.ndarray:
        return np.concatenate(
            [self.w1.ravel(), self.b1.ravel(), self.w2.ravel(), self.b2.ravel()]
        )

    def with_flat(self, flat: np.ndarray) -> GateParams:
        """Rebuild params of this shape from a flat vector (for grad checks)."""
        sizes = [self.w1.size, self.b1.size, self.w2.size, self.b2.size]
        if flat.size != sum(sizes):
            raise ValueError(f"flat vector has {flat.size} entries, expected {sum(sizes)}")
        parts = np.split(flat, np.cumsum(sizes)[:-1])
        return GateParams(
            w1=parts[0].reshape(self.w1.shape),
            b1=parts[1].reshape(self.b1.shape),
            w2=parts[2].reshape(self.w2.shape),
            b2=parts[3].reshape(self.b2.shape),
        )

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
    def from_json(cls, payload: str) -> GateParams:
        data = json.loads(payload)
        return cls(
            w1=np.asarray(data["w1"], dtype=np.float64),
            b1=np.asarray(data["b1"], dtype=np.float64),
            w2=np.asarray(data["w2"], dtype=np.float64),
            b2=np.asarray(data["b2"], dtype=np.float64),
        )


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def gate_forward(params: GateParams, s_emb: np.ndarray, m_emb: np.ndarray) -> np.ndarray:
    """Metric mixture weights for one pair: a simplex vector of length n_metrics."""
    x = np.concatenate([s_emb, m_emb])
    hidden = expit(params.w1 @ x + params.b1)
    return _softmax(params.w2 @ hidden + params.b2)


def match_score(
    params: GateParams, cfg: MetricConfig, query: QueryFeatures, unit: MemoryUnit
) -> float:
    """Gated match score: mixture weights dotted with the metric vector."""
    weights = gate_forward(params, query.embedding, unit.embedding)
    return float(weights @ metric_vector(cfg, query, unit))


@dataclass
class RankedMemories:
    """A total ranking over a store: (unit id, score) pairs, best first."""

    entries: list[tuple[int, float]]
    query_step: int

    def ids(self) -> list[int]:
        return [i for i, _ in self.entries]

    def top(self, k: int) -> list[int]:
        return [i for i, _ in self.entries[:k]]


def rank(
    params: GateParams, cfg: MetricConfig, query: QueryFeatures, store: MemoryStore
) -> RankedMemories:
    """Total ranking of the store by match score.

    Ties break toward the higher step (more recent first), then the lower
    id, so the ordering is deterministic.
    """
    scored = [
        (match_score(params, cfg, query, unit), unit.step, unit.id) for unit in store
    ]
    order = sorted(range(len(scored)), key=lambda i: (-scored[i][0], -scored[i][1], scored[i][2]))
    return RankedMemories(
        entries=[(scored[i][2], scored[i][0]) for i in order],
        query_step=query.step,
    )


def pair_weights(t: int, gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """Normalized magnitudes and orientations for reverse-order rank pairs.

    Rank position j (1-based) is paired with position t-j+1. Magnitudes
    follow a geometric profile that is largest at the extremes and smallest
    at the middle, normalized to sum to 1 across positions; the orientation
    is +1 when j is the higher-ranked side, -1 when the lower, 0 for the
    middle self-pair of an odd-length list.
    """
    if t < 1:
        raise ValueError(f"ranking length must be >= 1, got {t}")
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"decay must lie in (0, 1), got {gamma}")
    j = np.arange(1, t + 1)
    exponents = t - 1 - np.abs(t - 2 * j + 1)
    raw = gamma**exponents.astype(np.float64)
    magnitudes = raw / raw.sum()
    orientations = np.sign(t - 2 * j + 1).astype(np.float64)
    return magnitudes, orientations


@dataclass
class RetrievalSample:
    """One observed ranking event compiled for training.

    ``memories`` and ``metrics`` rows follow the observed rank order
    (best first). Metric values are frozen at compile time — the trainable
    parameter is the gate, not the metric functions.
    """

    state: np.ndarray  # (dim,)
    memories: np.ndarray  # (t, dim)
    metrics: np.ndarray  # (t, n_metrics)

    def __post_init__(self):
        if self.memories.shape[0] < 2:
            raise ValueError("a retrieval sample needs at least 2 ranked memories")
        if self.memories.shape[0] != self.metrics.shape[0]:
            raise ValueError("memories and metrics must have matching lengths")


def compile_sample(
    cfg: MetricConfig, query: QueryFeatures, units: list[MemoryUnit]
) -> RetrievalSample:
    """Freeze the metric vectors of an observed ranking into a training sample."""
    return RetrievalSample(
        state=query.embedding,
        memories=np.stack([u.embedding for u in units]),
        metrics=np.stack([metric_vector(cfg, query, u) for u in units]),
    )


@dataclass
class _CompiledBatch:
    x: np.ndarray  # (total_units, 2*dim) gate inputs
    d: np.ndarray  # (total_units, n_metrics)
    pair_hi: np.ndarray  # (n_pairs,) indices into rows
    pair_lo: np.ndarray  # (n_pairs,)
    pair_coef: np.ndarray  # (n_pairs,) |w| / (t * batch)


def _compile_batch(batch: list[RetrievalSample], gamma: float) -> _CompiledBatch:
    if not batch:
        raise ValueError("retrieval batch is empty")
    xs, ds = [], []
    hi, lo, coef = [], [], []
    offset = 0
    for sample in batch:
        t = sample.memories.shape[0]
        xs.append(
            np.hstack([np.tile(sample.state, (t, 1)), sample.memories])
        )
        ds.append(sample.metrics)
        mags, orients = pair_weights(t, gamma)
        for j in range(t):
            if orients[j] == 0:
                continue
            partner = t - j - 1
            a, b = (j, partner) if orients[j] > 0 else (partner, j)
            hi.append(offset + a)
            lo.append(offset + b)
            coef.append(mags[j] / (t * len(batch)))
        offset += t
    return _CompiledBatch(
        x=np.vstack(xs),
        d=np.vstack(ds),
        pair_hi=np.asarray(hi, dtype=np.int64),
        pair_lo=np.asarray(lo, dtype=np.int64),
        pair_coef=np.asarray(coef, dtype=np.float64),
    )


def _loss_and_grad(
    params: GateParams, compiled: _CompiledBatch, want_grad: bool = True
) -> tuple[float, GateParams | None]:
    z1 = compiled.x @ params.w1.T + params.b1
    a = expit(z1)
    logits = a @ params.w2.T + params.b2
    g = _softmax(logits)
    f = np.sum(g * compiled.d, axis=1)

    margin = f[compiled.pair_hi] - f[compiled.pair_lo]
    # -log sigmoid(m) == log(1 + exp(-m)), computed stably
    loss = float(np.sum(compiled.pair_coef * np.logaddexp(0.0, -margin)))
    if not want_grad:
        return loss, None

    pair_pull = compiled.pair_coef * expit(-margin)  # d(loss)/d(margin) is -pull
    df = np.zeros_like(f)
    np.add.at(df, compiled.pair_hi, -pair_pull)
    np.add.at(df, compiled.pair_lo, pair_pull)

    dlogits = df[:, None] * g * (compiled.d - f[:, None])
    dw2 = dlogits.T @ a
    db2 = dlogits.sum(axis=0)
    da = dlogits @ params.w2
    dz1 = da * a * (1.0 - a)
    dw1 = dz1.T @ compiled.x
    db1 = dz1.sum(axis=0)
    return loss, GateParams(w1=dw1, b1=db1, w2=dw2, b2=db2)


def retrieval_loss(params: GateParams, batch: list[RetrievalSample], gamma: float) -> float:
    """Weighted pairwise logistic loss over a batch of observed rankings.

    Per sample the reverse-order pairs are averaged over the ranking length,
    and the batch mean is returned. Identical scores give log(2) per unit of
    pair weight.
    """
    loss, _ = _loss_and_grad(params, _compile_batch(batch, gamma), want_grad=False)
    return loss


def retrieval_grad(
    params: GateParams, batch: list[RetrievalSample], gamma: float
) -> tuple[float, GateParams]:
    """Loss and its analytic gradient with respect to every gate parameter."""
    loss, grad = _loss_and_grad(params, _compile_batch(batch, gamma), want_grad=True)
    return loss, grad


def train_gate(
    params: GateParams,
    batch: list[RetrievalSample],
    lr: float,
    steps: int,
    gamma: float,
) -> tuple[GateParams, list[float]]:
    """Full-batch gradient descent on the retrieval loss.

    Returns fresh parameters (the input object is untouched) and the loss
    recorded before each update.
    """
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    compiled = _compile_batch(batch, gamma)
    current = params.copy()
    history: list[float] = []
    for _ in range(steps):
        loss, grad = _loss_and_grad(current, compiled)
        history.append(loss)
        current = GateParams(
            w1=current.w1 - lr * grad.w1,
            b1=current.b1 - lr * grad.b1,
            w2=current.w2 - lr * grad.w2,
            b2=current.b2 - lr * grad.b2,
        )
    return current, history
