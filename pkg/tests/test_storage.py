"""Extraction with fallback, the observation cache, and reflection updates."""

from __future__ import annotations

import numpy as np
import pytest

from memcycle.core import MemoryStore, StepRecord, Trajectory, TrajectoryRecord, MemoryUnit
from memcycle.embeddings import MockEmbeddings
from memcycle.endpoints import FailingChat, ScriptedChat
from memcycle.storage import (
    EXTRACT_TEMPLATE,
    ObservationCache,
    TaskPrompt,
    extract,
    partition_records,
    reflect,
    update_task_prompt,
)


@pytest.fixture
def small_embedder():
    return MockEmbeddings(dim=16, seed=2)


def test_task_prompt_render_with_hints():
    prompt = TaskPrompt(hints=["keep names", "keep dates"])
    rendered = prompt.render("saw a red fox")
    assert "saw a red fox" in rendered
    assert "keep names\nkeep dates" in rendered


def test_task_prompt_render_without_hints_is_base_plus_observation():
    prompt = TaskPrompt()
    rendered = prompt.render("obs text")
    assert rendered == EXTRACT_TEMPLATE.format(observation="obs text", hint="")


def test_task_prompt_json_roundtrip():
    prompt = TaskPrompt(hints=["a", "b"], max_hints=7)
    loaded = TaskPrompt.from_json(prompt.to_json())
    assert loaded == prompt


def test_extract_uses_endpoint_reply(small_embedder):
    endpoint = ScriptedChat(["the key fact"])
    unit = extract(endpoint, TaskPrompt(), "long rambling observation", small_embedder, step=3)
    assert unit.text == "the key fact"
    assert unit.step == 3
    assert not unit.fallback
    np.testing.assert_allclose(unit.embedding, small_embedder.embed("the key fact"))


def test_extract_falls_back_on_endpoint_failure(small_embedder):
    unit = extract(FailingChat(), TaskPrompt(), "raw observation", small_embedder, step=1)
    assert unit.text == "raw observation"
    assert unit.fallback


def test_extract_falls_back_on_blank_reply(small_embedder):
    unit = extract(ScriptedChat(["   "]), TaskPrompt(), "raw observation", small_embedder, step=1)
    assert unit.text == "raw observation"
    assert unit.fallback


def test_extract_renders_hints_into_prompt(small_embedder):
    endpoint = ScriptedChat(["out"])
    extract(endpoint, TaskPrompt(hints=["watch for colors"]), "obs", small_embedder, step=1)
    assert "watch for colors" in endpoint.prompts[0]


# -- cache -------------------------------------------------------------


def test_cache_flushes_at_capacity():
    cache = ObservationCache(capacity=3)
    assert cache.put("a") == []
    assert cache.put("b") == []
    assert cache.put("c") == ["a", "b", "c"]
    assert cache.pending == ()


def test_cache_drain_on_recall():
    cache = ObservationCache(capacity=5)
    cache.put("a")
    cache.put("b")
    assert cache.drain() == ["a", "b"]
    assert cache.drain() == []


def test_cache_rejects_zero_capacity():
    with pytest.raises(ValueError):
        ObservationCache(capacity=0)


# -- partition / reflect -------------------------------------------------


def record_with_reward(reward, question="q", state="s", memory="m"):
    store = MemoryStore(dim=4)
    store.insert(MemoryUnit(text=memory, embedding=np.ones(4), step=1))
    steps = [
        StepRecord(step=1, state_text=state, ranked_ids=[0], context="c",
                   thought="t", action="a")
    ]
    trajectory = Trajectory(
        id=f"r{reward}", question=question, steps=steps, reward=reward,
        success=reward >= 0.5,
    )
    return TrajectoryRecord(trajectory, store)


def test_partition_boundary_is_positive():
    records = [record_with_reward(r) for r in (0.0, 0.5, 1.0, 0.49)]
    pos, neg = partition_records(records, threshold=0.5)
    assert [r.trajectory.reward for r in pos] == [0.5, 1.0]
    assert [r.trajectory.reward for r in neg] == [0.0, 0.49]


def test_reflect_empty_group_makes_no_call():
    endpoint = ScriptedChat([])
    assert reflect(endpoint, [], "positive") == []
    assert endpoint.calls == 0


def test_reflect_parses_and_caps_lines():
    endpoint = ScriptedChat(["hint one\n\nhint two\nhint three"])
    hints = reflect(endpoint, [record_with_reward(1.0)], "positive", max_lines=2)
    assert hints == ["hint one", "hint two"]


def test_reflect_digest_contains_states_and_memories():
    endpoint = ScriptedChat(["h"])
    reflect(
        endpoint,
        [record_with_reward(1.0, question="who?", state="at the door", memory="a key fact")],
        "negative",
    )
    prompt = endpoint.prompts[0]
    assert "who?" in prompt
    assert "at the door" in prompt
    assert "a key fact" in prompt


def test_reflect_rejects_unknown_polarity():
    with pytest.raises(ValueError):
        reflect(ScriptedChat(["x"]), [record_with_reward(1.0)], "sideways")


def test_reflect_respects_sample_size():
    endpoint = ScriptedChat(["h"])
    records = [record_with_reward(1.0, question=f"q{i}") for i in range(5)]
    reflect(endpoint, records, "positive", sample_size=2)
    prompt = endpoint.prompts[0]
    assert "q0" in prompt and "q1" in prompt
    assert "q4" not in prompt


# -- task prompt updates --------------------------------------------------


def test_update_appends_positive_first_and_dedups():
    prompt = TaskPrompt(hints=["old"])
    updated = update_task_prompt(prompt, ["pos hint", "old"], ["neg hint", "pos hint"])
    assert updated.hints == ["old", "pos hint", "neg hint"]
    assert prompt.hints == ["old"]  # input untouched


def test_update_is_idempotent():
    prompt = TaskPrompt()
    once = update_task_prompt(prompt, ["a"], ["b"])
    twice = update_task_prompt(once, ["a"], ["b"])
    assert once.hints == twice.hints == ["a", "b"]


def test_update_evicts_oldest_beyond_cap():
    prompt = TaskPrompt(hints=[f"h{i}" for i in range(20)], max_hints=20)
    updated = update_task_prompt(prompt, ["new one"], [])
    assert len(updated.hints) == 20
    assert updated.hints[0] == "h1"
    assert updated.hints[-1] == "new one"


def test_update_ignores_blank_hints():
    updated = update_task_prompt(TaskPrompt(), ["  ", ""], ["real"])
    assert updated.hints == ["real"]
