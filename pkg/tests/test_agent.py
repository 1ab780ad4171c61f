"""The reasoning loop, the trainable memory policy, and the frozen baselines."""

from __future__ import annotations

import numpy as np
import pytest

from memcycle.agent import (
    ACT_TEMPLATE,
    FixedWeightPolicy,
    FullMemoryPolicy,
    LongTermMemoryPolicy,
    MemoryCyclePolicy,
    ReactAgent,
    ShortTermMemoryPolicy,
    THINK_TEMPLATE,
    baseline_memory,
    react_step,
    run_trajectory,
)
from memcycle.core import record_to_dict, truncate_words
from memcycle.endpoints import FailingChat, ScriptedChat
from memcycle.environment import QaTask
from memcycle.gate import GateParams
from memcycle.metrics import safe_cosine
from memcycle.storage import TaskPrompt
from memcycle.synthetic import TwoHopResponder, two_hop_world
from memcycle.utilization import UtilizationPolicy


def make_cycle_policy(embedder, metric_config, top_k=2, gate=None):
    rig = ScriptedChat(TwoHopResponder())
    return MemoryCyclePolicy(
        gate=gate or GateParams.init(dim=embedder.dim, n_metrics=metric_config.size, seed=9),
        metric_config=metric_config,
        embedder=embedder,
        extraction_endpoint=rig,
        task_prompt=TaskPrompt(),
        utilization=UtilizationPolicy(endpoint=ScriptedChat(TwoHopResponder())),
        top_k=top_k,
    )


# -- prompt templates ------------------------------------------------------------


def test_templates_expose_the_expected_slots():
    assert "{question}" in THINK_TEMPLATE and "{memory_context}" in THINK_TEMPLATE
    for slot in ("{question}", "{thought}", "{memory_context}"):
        assert slot in ACT_TEMPLATE
    assert "Search[entity]" in ACT_TEMPLATE and "Finish[answer]" in ACT_TEMPLATE


def test_react_step_fills_both_prompts(embedder):
    chat = ScriptedChat(["my thought", "Search[Foo]"])
    agent = ReactAgent(chat=chat, policy=FullMemoryPolicy(embedder))
    agent.policy.begin_trajectory(seed=0)
    action, record = react_step(agent, "Who is Foo?", "Who is Foo?", step=1)

    assert chat.prompts[0] == THINK_TEMPLATE.format(
        question="Who is Foo?", memory_context="Who is Foo?"
    )
    assert chat.prompts[1] == ACT_TEMPLATE.format(
        question="Who is Foo?", thought="my thought", memory_context="Who is Foo?"
    )
    assert action.kind == "search" and action.value == "Foo"
    assert record.thought == "my thought"
    assert record.state_text == "Who is Foo?"
    assert record.ranked_ids == [0]


def test_react_step_notes_thought_and_action_when_policy_stores_them(
    embedder, metric_config
):
    policy = make_cycle_policy(embedder, metric_config)
    policy.begin_trajectory(seed=0)
    chat = ScriptedChat(["thinking...", "Search[alpha1n0]"])
    agent = ReactAgent(chat=chat, policy=policy)
    react_step(agent, "q", "first observation", step=1)
    # observation was extracted at recall; thought and action wait in the cache
    assert len(policy.store) == 1
    assert policy._cache.pending == ("thinking...", "Search[alpha1n0]")


# -- full episodes -----------------------------------------------------------


def test_run_trajectory_is_deterministic(embedder, metric_config):
    corpus, tasks = two_hop_world(2, seed=1)

    def play():
        policy = make_cycle_policy(embedder, metric_config)
        agent = ReactAgent(chat=ScriptedChat(TwoHopResponder()), policy=policy)
        return run_trajectory(agent, tasks[0], corpus, trajectory_id="t", seed=5)

    first, second = play(), play()
    assert record_to_dict(first) == record_to_dict(second)
    assert first.trajectory.steps, "episode recorded no steps"


def test_run_trajectory_respects_step_budget(embedder):
    corpus, tasks = two_hop_world(1, seed=2, max_steps=4)
    # a chat that thinks and then always searches a missing page
    chat = ScriptedChat(
        lambda prompt, i: "pondering" if i % 2 == 0 else "Search[nowhere]"
    )
    agent = ReactAgent(chat=chat, policy=FullMemoryPolicy(embedder))
    record = run_trajectory(agent, tasks[0], corpus, trajectory_id="cap", seed=0)
    assert len(record.trajectory.steps) == 4
    assert record.trajectory.reward == 0.0
    assert not record.trajectory.success


def test_run_trajectory_records_failure_on_endpoint_error(embedder):
    corpus, tasks = two_hop_world(1, seed=3)
    agent = ReactAgent(chat=FailingChat(), policy=FullMemoryPolicy(embedder))
    record = run_trajectory(agent, tasks[0], corpus, trajectory_id="dead", seed=0)
    assert record.trajectory.reward == 0.0
    assert record.trajectory.steps == []


def test_rig_solves_two_hops_with_perfect_retrieval(embedder, metric_config):
    """With full memory the rule-based actor chains both facts in 3 steps."""
    corpus, tasks = two_hop_world(1, seed=4)
    agent = ReactAgent(
        chat=ScriptedChat(TwoHopResponder()), policy=FullMemoryPolicy(embedder)
    )
    record = run_trajectory(agent, tasks[0], corpus, trajectory_id="easy", seed=0)
    assert record.trajectory.success
    assert len(record.trajectory.steps) == 3


# -- baselines ----------------------------------------------------------------


def test_full_memory_concatenates_in_arrival_order(embedder):
    policy = FullMemoryPolicy(embedder, word_cap=4)
    policy.begin_trajectory(seed=0)
    policy.observe("alpha beta", step=1)
    policy.observe("gamma delta epsilon", step=2)
    recall = policy.recall("anything", step=3)
    assert recall.ranked_ids == [0, 1]
    assert recall.context == truncate_words("alpha beta gamma delta epsilon", 4)


def test_baselines_ignore_notes(embedder):
    policy = ShortTermMemoryPolicy(embedder, window=2)
    policy.begin_trajectory(seed=0)
    policy.observe("one", step=1)
    policy.note("scratch work", step=1)
    policy.observe("two", step=2)
    policy.observe("three", step=3)
    recall = policy.recall("state", step=4)
    assert recall.ranked_ids == [1, 2]
    assert recall.context == "two three"


def test_long_term_ranking_matches_brute_force_cosine(embedder):
    texts = ["red apple", "green pear", "red pear", "blue sky", "apple pie"]
    policy = LongTermMemoryPolicy(embedder, top_k=2)
    policy.begin_trajectory(seed=0)
    for i, text in enumerate(texts):
        policy.observe(text, step=i + 1)
    state = "red apple pie"
    recall = policy.recall(state, step=9)

    s = embedder.embed(state)
    scored = [
        (-safe_cosine(s, u.embedding), -u.step, u.id) for u in policy.store
    ]
    expected = [sid for _, _, sid in sorted(scored)]
    assert recall.ranked_ids == expected
    top_texts = [policy.store.get(i).text for i in expected[:2]]
    assert recall.context == " ".join(top_texts)


def test_fixed_weight_pure_relevance_equals_long_term_ranking(embedder):
    texts = ["alpha beta", "beta gamma", "gamma delta", "alpha delta", "beta beta"]
    fixed = FixedWeightPolicy(embedder, alpha=(1.0, 0.0, 0.0))
    longterm = LongTermMemoryPolicy(embedder)
    for policy in (fixed, longterm):
        policy.begin_trajectory(seed=0)
        for i, text in enumerate(texts):
            policy.observe(text, step=i + 1)
    state = "beta gamma alpha"
    assert fixed.recall(state, 7).ranked_ids == longterm.recall(state, 7).ranked_ids


def test_fixed_weight_recency_only_prefers_new_memories(embedder):
    policy = FixedWeightPolicy(embedder, alpha=(0.0, 0.0, 1.0))
    policy.begin_trajectory(seed=0)
    for i, text in enumerate(["oldest", "middle", "newest"]):
        policy.observe(text, step=i + 1)
    assert policy.recall("state", step=4).ranked_ids == [2, 1, 0]


def test_fixed_weight_importance_needs_a_scorer(embedder):
    with pytest.raises(ValueError):
        FixedWeightPolicy(embedder, alpha=(0.5, 0.5, 0.0))


def test_baseline_factory(embedder):
    assert isinstance(baseline_memory("full", embedder), FullMemoryPolicy)
    assert isinstance(
        baseline_memory("short-term", embedder, window=2), ShortTermMemoryPolicy
    )
    with pytest.raises(ValueError):
        baseline_memory("telepathic", embedder)


# -- the trainable policy ---------------------------------------------------------


def test_cycle_policy_buffers_until_recall(embedder, metric_config):
    policy = make_cycle_policy(embedder, metric_config)
    policy.begin_trajectory(seed=0)
    policy.observe("alpha1n0 partner is bravo1n0", step=1)
    assert len(policy.store) == 0  # still cached
    recall = policy.recall("looking for alpha1n0", step=1)
    assert len(policy.store) == 1
    assert recall.ranked_ids == [0]
    assert "alpha1n0 partner is bravo1n0" in recall.context


def test_cycle_policy_cache_flushes_when_full(embedder, metric_config):
    policy = make_cycle_policy(embedder, metric_config)
    policy.cache_capacity = 2
    policy.begin_trajectory(seed=0)
    policy.observe("alpha1n0 partner is bravo1n0", step=1)
    policy.note("bravo1n0 specialty is copper1n0", step=1)
    assert len(policy.store) == 2  # capacity reached, extracted eagerly
    assert policy._cache.pending == ()


def test_cycle_policy_begin_trajectory_resets_state(embedder, metric_config):
    policy = make_cycle_policy(embedder, metric_config)
    policy.begin_trajectory(seed=0)
    policy.observe("alpha1n0 partner is bravo1n0", step=1)
    policy.recall("alpha1n0", step=1)
    policy.begin_trajectory(seed=0)
    assert len(policy.store) == 0
    assert policy._cache.pending == ()


def test_cycle_policy_ranks_whole_store_but_merges_top_k(embedder, metric_config):
    policy = make_cycle_policy(embedder, metric_config, top_k=2)
    policy.begin_trajectory(seed=0)
    facts = [
        "alpha1n0 partner is bravo1n0",
        "bravo1n0 specialty is copper1n0",
        "delta1n1 partner is corda1n1",
        "corda1n1 specialty is basalt1n1",
    ]
    for i, fact in enumerate(facts):
        policy.observe(fact, step=i + 1)
    recall = policy.recall("alpha1n0 and bravo1n0", step=5)
    assert sorted(recall.ranked_ids) == [0, 1, 2, 3]  # full ranking exposed
    assert len(recall.word_deltas) <= 2  # but only top_k units merged
