"""The rigged two-hop world, its scripted responder, and the data generators."""

from __future__ import annotations

import numpy as np
import pytest

from memcycle.environment import EnvAction, QaEnvironment
from memcycle.gate import GateParams
from memcycle.metrics import EMOTION_DIMS
from memcycle.storage import TaskPrompt
from memcycle.synthetic import (
    PARTNER_FACT,
    QUESTION_FORM,
    SPECIALTY_FACT,
    TwoHopResponder,
    emotion_keyword_samples,
    enrichment_chains,
    mean_tau,
    ranking_samples,
    sample_tau,
    two_hop_world,
    union_merge,
)
from memcycle.utilization import UtilizationPolicy
from memcycle.endpoints import ScriptedChat


# -- world construction -----------------------------------------------------------


def test_two_hop_world_links_subject_partner_specialty():
    corpus, tasks = two_hop_world(3, seed=1)
    assert len(corpus) == 6 and len(tasks) == 3
    for task in tasks:
        x = task.question.rsplit(" ", 1)[-1]
        partner_page = corpus.lookup(x)
        assert partner_page is not None
        y = partner_page.rsplit(" ", 1)[-1]
        specialty_page = corpus.lookup(y)
        assert specialty_page is not None
        assert specialty_page.rsplit(" ", 1)[-1] == task.gold_answer


def test_two_hop_world_is_solvable_by_direct_play():
    corpus, tasks = two_hop_world(1, seed=2)
    env = QaEnvironment(tasks[0], corpus)
    x = tasks[0].question.rsplit(" ", 1)[-1]
    page, _, _ = env.step(EnvAction.search(x))
    y = page.rsplit(" ", 1)[-1]
    page, _, _ = env.step(EnvAction.search(y))
    z = page.rsplit(" ", 1)[-1]
    _, reward, done = env.step(EnvAction.finish(z))
    assert reward == 1.0 and done


def test_two_hop_world_distinct_seeds_do_not_collide():
    corpus_a, _ = two_hop_world(2, seed=1)
    corpus_b, _ = two_hop_world(2, seed=2)
    assert not set(corpus_a.titles) & set(corpus_b.titles)


# -- the scripted responder ---------------------------------------------------


@pytest.fixture
def responder():
    return TwoHopResponder()


def test_union_merge_deduplicates_in_order():
    assert union_merge("a; b", "b; c") == "a; b; c"
    assert union_merge("", "x") == "x"
    assert union_merge("x; y", "") == "x; y"


def test_responder_merge_route(responder):
    policy = UtilizationPolicy(endpoint=ScriptedChat(responder))
    merged = policy.merge("f1; f2", "f2; f3", "some state")
    assert merged == "f1; f2; f3"


def test_responder_extraction_keeps_facts_verbatim(responder):
    fact = PARTNER_FACT.format(x="alpha9n0", y="bravo9n0")
    prompt = TaskPrompt().render(fact)
    assert responder(prompt, 0) == fact


def test_responder_extraction_neutralizes_chatter_but_echoes_entities(responder):
    prompt = TaskPrompt().render("I think alpha9n0 could matter here")
    noted = responder(prompt, 0)
    assert noted.startswith("noted item ")
    assert "alpha9n0" in noted
    assert "could matter" not in noted
    # determinism: the same text always gets the same tag
    assert responder(prompt, 1) == noted


def test_responder_act_chains_facts_from_memory_context(responder):
    question = QUESTION_FORM.format(x="alpha9n0")
    both = (
        PARTNER_FACT.format(x="alpha9n0", y="bravo9n0")
        + "; "
        + SPECIALTY_FACT.format(y="bravo9n0", z="copper9n0")
    )

    def act_prompt(memory):
        from memcycle.agent import ACT_TEMPLATE

        return ACT_TEMPLATE.format(
            question=question, thought="t", memory_context=memory
        )

    assert responder(act_prompt(both), 0) == "Finish[copper9n0]"
    partner_only = PARTNER_FACT.format(x="alpha9n0", y="bravo9n0")
    assert responder(act_prompt(partner_only), 0) == "Search[bravo9n0]"
    assert responder(act_prompt("noted item 12ab"), 0) == "Search[alpha9n0]"


def test_responder_think_and_reflect_routes(responder):
    from memcycle.agent import THINK_TEMPLATE
    from memcycle.storage import REFLECT_TEMPLATES

    thought = responder(
        THINK_TEMPLATE.format(
            question=QUESTION_FORM.format(x="kappa3n2"), memory_context=""
        ),
        0,
    )
    assert "kappa3n2" in thought
    positive = responder(REFLECT_TEMPLATES["positive"].format(digest="d", max_lines=2), 0)
    negative = responder(REFLECT_TEMPLATES["negative"].format(digest="d", max_lines=2), 0)
    assert positive != negative


def test_responder_rejects_unknown_prompts(responder):
    with pytest.raises(ValueError):
        responder("what is the meaning of life?", 0)


# -- metric-governed rankings ---------------------------------------------------


def test_ranking_samples_order_is_the_governing_column(metric_config):
    samples = ranking_samples(metric_config, "importance", 5, dim=32, t=8, seed=3)
    col = metric_config.names().index("importance")
    for sample in samples:
        governing = sample.metrics[:, col]
        assert list(governing) == sorted(governing, reverse=True)
        assert sample.memories.shape == (8, 32)


def test_ranking_samples_rejects_unknown_metric(metric_config):
    with pytest.raises(ValueError):
        ranking_samples(metric_config, "astrology", 2, dim=16)


def test_concentrated_gate_scores_perfect_tau(metric_config, embedder):
    """A gate locked onto the governing metric reproduces the true order."""
    col = metric_config.names().index("recency_p1")
    samples = ranking_samples(metric_config, "recency_p1", 4, dim=embedder.dim, t=6, seed=8)
    locked = GateParams.zeros(dim=embedder.dim, n_metrics=metric_config.size)
    locked.b2[col] = 50.0
    assert mean_tau(locked, samples) == pytest.approx(1.0)
    assert sample_tau(locked, samples[0]) == pytest.approx(1.0)


def test_uniform_gate_cannot_read_the_governing_order(metric_config, embedder):
    uniform = GateParams.zeros(dim=embedder.dim, n_metrics=metric_config.size)
    for governing in ("relevance", "recency_p1", "importance"):
        samples = ranking_samples(
            metric_config, governing, 20, dim=embedder.dim, t=10, seed=4
        )
        assert abs(mean_tau(uniform, samples)) < 0.35


# -- scorer pre-training data ----------------------------------------------------


def test_emotion_keyword_samples_are_separable():
    samples = emotion_keyword_samples(20, seed=5)
    for sample in samples:
        tokens = set(sample.text.split())
        for j, name in enumerate(EMOTION_DIMS):
            assert (name in tokens) == bool(sample.label[j])


def test_enrichment_chains_grow_one_detail_at_a_time():
    chains = enrichment_chains(4, length=5, seed=6)
    for chain in chains:
        assert len(chain.sentences) == 5
        assert chain.query == chain.sentences[-1]
        for earlier, later in zip(chain.sentences, chain.sentences[1:]):
            assert later.startswith(earlier)
            assert len(later.split()) == len(earlier.split()) + 1


def test_enrichment_chains_share_token_pools():
    train = enrichment_chains(8, length=5, seed=6)
    fresh = enrichment_chains(4, length=5, seed=99)
    train_tokens = {t for c in train for s in c.sentences for t in s.split()}
    fresh_tokens = {t for c in fresh for s in c.sentences for t in s.split()}
    assert fresh_tokens <= train_tokens


def test_enrichment_chains_length_bounded_by_pool():
    with pytest.raises(ValueError):
        enrichment_chains(2, length=20, seed=0)
