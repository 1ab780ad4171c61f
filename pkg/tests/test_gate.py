"""Gate forward pass, ranking discipline, pair weights, and the trainer."""

from __future__ import annotations

import numpy as np
import pytest
from scipy.special import expit

from memcycle.core import MemoryStore, MemoryUnit
from memcycle.gate import (
    GateParams,
    RetrievalSample,
    compile_sample,
    gate_forward,
    match_score,
    pair_weights,
    rank,
    retrieval_grad,
    retrieval_loss,
    train_gate,
)
from memcycle.metrics import MetricConfig, metric_vector, query_features


def random_sample(gen, dim=6, t=5, n_metrics=4):
    mem = gen.standard_normal((t, dim))
    return RetrievalSample(
        state=gen.standard_normal(dim),
        memories=mem / np.linalg.norm(mem, axis=1, keepdims=True),
        metrics=gen.standard_normal((t, n_metrics)),
    )


# -- forward pass ---------------------------------------------------------


def test_gate_forward_is_simplex():
    gen = np.random.Generator(np.random.PCG64(0))
    params = GateParams.init(dim=5, n_metrics=6, hidden=8, seed=1, scale=2.0)
    for _ in range(50):
        w = gate_forward(params, gen.standard_normal(5), gen.standard_normal(5))
        assert w.shape == (6,)
        assert np.all(w > 0)
        assert abs(w.sum() - 1.0) < 1e-12


def test_zero_gate_is_uniform():
    params = GateParams.zeros(dim=3, n_metrics=4, hidden=5)
    w = gate_forward(params, np.ones(3), np.ones(3))
    np.testing.assert_allclose(w, np.full(4, 0.25), atol=1e-15)


def test_gate_forward_matches_manual_computation():
    gen = np.random.Generator(np.random.PCG64(3))
    params = GateParams.init(dim=4, n_metrics=3, hidden=6, seed=5, scale=1.0)
    s, m = gen.standard_normal(4), gen.standard_normal(4)
    x = np.concatenate([s, m])
    hidden = expit(params.w1 @ x + params.b1)
    logits = params.w2 @ hidden + params.b2
    expected = np.exp(logits) / np.exp(logits).sum()
    np.testing.assert_allclose(gate_forward(params, s, m), expected, atol=1e-12)


def test_match_score_is_weighted_metric_sum(metric_config, embedder):
    params = GateParams.init(dim=embedder.dim, n_metrics=metric_config.size, seed=2)
    query = query_features(metric_config, embedder.embed("where is the fox"), step=3)
    unit = MemoryUnit(text="the fox is here", embedding=embedder.embed("the fox is here"), step=1)
    expected = float(
        gate_forward(params, query.embedding, unit.embedding)
        @ metric_vector(metric_config, query, unit)
    )
    assert match_score(params, metric_config, query, unit) == pytest.approx(expected, abs=1e-12)


# -- ranking --------------------------------------------------------------


def brute_force_rank(params, cfg, query, store):
    scored = [(match_score(params, cfg, query, u), u.step, u.id) for u in store]
    return [
        sid for _, _, sid in sorted(scored, key=lambda row: (-row[0], -row[1], row[2]))
    ]


def test_rank_matches_brute_force(metric_config, embedder, make_store):
    params = GateParams.init(dim=embedder.dim, n_metrics=metric_config.size, seed=7, scale=1.0)
    store = make_store(
        ["red fox", "blue whale", "red fox den", "green tree", "fox hunting"],
        steps=[1, 1, 2, 3, 3],
    )
    query = query_features(metric_config, embedder.embed("fox"), step=4)
    ranked = rank(params, metric_config, query, store)
    assert ranked.ids() == brute_force_rank(params, metric_config, query, store)
    scores = [s for _, s in ranked.entries]
    assert scores == sorted(scores, reverse=True)


def test_rank_tie_break_prefers_recent_then_low_id(embedder):
    """Duplicate units force exact ties; step then id must decide."""
    cfg = MetricConfig(emotion=None, importance=None, recency_powers=())
    params = GateParams.zeros(dim=embedder.dim, n_metrics=cfg.size)
    store = MemoryStore(dim=embedder.dim)
    emb = embedder.embed("same text")
    store.insert(MemoryUnit(text="same text", embedding=emb, step=1))  # id 0
    store.insert(MemoryUnit(text="same text", embedding=emb, step=3))  # id 1
    store.insert(MemoryUnit(text="same text", embedding=emb, step=3))  # id 2
    query = query_features(cfg, embedder.embed("query"), step=4)
    ranked = rank(params, cfg, query, store)
    assert ranked.ids() == [1, 2, 0]


def test_rank_empty_store(metric_config, embedder):
    params = GateParams.zeros(dim=embedder.dim, n_metrics=metric_config.size)
    query = query_features(metric_config, embedder.embed("q"), step=1)
    ranked = rank(params, metric_config, query, MemoryStore(dim=embedder.dim))
    assert ranked.entries == []
    assert ranked.top(5) == []


# -- pair weights ---------------------------------------------------------


def test_pair_weights_t5_frozen_table():
    mags, orients = pair_weights(5, 0.5)
    np.testing.assert_allclose(
        mags, [16 / 41, 4 / 41, 1 / 41, 4 / 41, 16 / 41], atol=1e-12
    )
    np.testing.assert_allclose(
        mags, [0.3902, 0.0976, 0.0244, 0.0976, 0.3902], atol=1e-4
    )
    np.testing.assert_array_equal(orients, [1, 1, 0, -1, -1])


def test_pair_weights_normalization_and_symmetry():
    for t in (1, 2, 3, 4, 7, 10, 25):
        for gamma in (0.1, 0.5, 0.9):
            mags, orients = pair_weights(t, gamma)
            assert mags.sum() == pytest.approx(1.0, abs=1e-12)
            assert np.all(mags > 0)
            np.testing.assert_allclose(mags, mags[::-1], atol=1e-15)
            np.testing.assert_array_equal(orients, -orients[::-1])
            assert np.abs(mags * orients).sum() <= 1.0 + 1e-9


def test_pair_weights_middle_of_odd_list_is_neutral():
    _, orients = pair_weights(7, 0.3)
    assert orients[3] == 0
    assert list(orients[:3]) == [1, 1, 1]
    assert list(orients[4:]) == [-1, -1, -1]


def test_pair_weights_rejects_bad_args():
    with pytest.raises(ValueError):
        pair_weights(0, 0.5)
    for gamma in (0.0, 1.0, -0.2, 1.5):
        with pytest.raises(ValueError):
            pair_weights(3, gamma)


# -- retrieval loss -------------------------------------------------------


def reference_loss(params, batch, gamma):
    """Independent recomputation from pair_weights + per-pair scores."""
    total = 0.0
    for sample in batch:
        t = sample.memories.shape[0]
        f = [
            float(
                gate_forward(params, sample.state, sample.memories[i])
                @ sample.metrics[i]
            )
            for i in range(t)
        ]
        mags, orients = pair_weights(t, gamma)
        sample_loss = 0.0
        for j in range(t):
            if orients[j] == 0:
                continue
            partner = t - j - 1
            hi, lo = (j, partner) if orients[j] > 0 else (partner, j)
            margin = f[hi] - f[lo]
            sample_loss += mags[j] * float(np.logaddexp(0.0, -margin))
        total += sample_loss / t
    return total / len(batch)


def test_retrieval_loss_matches_reference():
    gen = np.random.Generator(np.random.PCG64(21))
    params = GateParams.init(dim=6, n_metrics=4, hidden=8, seed=2, scale=1.0)
    batch = [random_sample(gen, t=t) for t in (2, 3, 5, 8)]
    assert retrieval_loss(params, batch, 0.5) == pytest.approx(
        reference_loss(params, batch, 0.5), abs=1e-9
    )


def test_retrieval_loss_identical_scores_gives_log2_times_weight():
    """All metric rows equal -> every margin is 0 -> log(2) per pair weight."""
    t = 5
    sample = RetrievalSample(
        state=np.ones(4) / 2.0,
        memories=np.tile(np.ones(4) / 2.0, (t, 1)),
        metrics=np.tile(np.array([0.5, 0.25, 0.1]), (t, 1)),
    )
    params = GateParams.init(dim=4, n_metrics=3, hidden=6, seed=3)
    mags, orients = pair_weights(t, 0.5)
    expected = np.log(2.0) * mags[orients != 0].sum() / t
    assert retrieval_loss(params, [sample], 0.5) == pytest.approx(expected, abs=1e-12)


def test_retrieval_sample_requires_two_memories():
    with pytest.raises(ValueError):
        RetrievalSample(
            state=np.ones(3), memories=np.ones((1, 3)), metrics=np.ones((1, 2))
        )


def test_compile_sample_freezes_metrics(metric_config, embedder, make_store):
    store = make_store(["fox den", "old tree"], steps=[1, 2])
    query = query_features(metric_config, embedder.embed("fox"), step=3)
    units = list(store)
    sample = compile_sample(metric_config, query, units)
    np.testing.assert_allclose(
        sample.metrics[0], metric_vector(metric_config, query, units[0])
    )
    assert sample.memories.shape == (2, embedder.dim)


# -- gradients ------------------------------------------------------------


def numeric_gradient(params, batch, gamma, eps=1e-5):
    flat = params.pack()
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] += eps
        hi = retrieval_loss(params.with_flat(bumped), batch, gamma)
        bumped[i] -= 2 * eps
        lo = retrieval_loss(params.with_flat(bumped), batch, gamma)
        grad[i] = (hi - lo) / (2 * eps)
    return grad


def max_rel_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = np.maximum(np.abs(a) + np.abs(b), 1e-6)
    return float(np.max(np.abs(a - b) / scale))


def test_analytic_gradient_matches_finite_differences():
    gen = np.random.Generator(np.random.PCG64(17))
    params = GateParams.init(dim=3, n_metrics=3, hidden=4, seed=11, scale=1.0)
    batch = [random_sample(gen, dim=3, t=4, n_metrics=3) for _ in range(3)]
    _, grad = retrieval_grad(params, batch, 0.6)
    numeric = numeric_gradient(params, batch, 0.6)
    assert max_rel_error(grad.pack(), numeric) < 1e-4


def test_train_gate_descends_and_keeps_input_untouched():
    gen = np.random.Generator(np.random.PCG64(8))
    params = GateParams.init(dim=4, n_metrics=3, hidden=6, seed=4, scale=0.5)
    before = params.pack().copy()
    batch = [random_sample(gen, dim=4, t=5, n_metrics=3) for _ in range(4)]
    trained, history = train_gate(params, batch, lr=0.5, steps=40, gamma=0.5)
    np.testing.assert_array_equal(params.pack(), before)
    assert len(history) == 40
    assert retrieval_loss(trained, batch, 0.5) < history[0]
    assert history[-1] < history[0]


def test_gate_params_json_roundtrip():
    params = GateParams.init(dim=3, n_metrics=5, hidden=4, seed=9, scale=1.0)
    loaded = GateParams.from_json(params.to_json())
    np.testing.assert_array_equal(params.pack(), loaded.pack())


def test_gate_params_flat_roundtrip():
    params = GateParams.init(dim=3, n_metrics=2, hidden=4, seed=1)
    flat = params.pack()
    rebuilt = params.with_flat(flat)
    np.testing.assert_array_equal(rebuilt.pack(), flat)
    with pytest.raises(ValueError):
        params.with_flat(flat[:-1])
