"""ReAct agent loop wired to pluggable memory policies.

Each reasoning step runs the same cycle: store what just arrived, recall
a memory context, think, act. The learnable policy is the full pipeline
(cache -> extraction -> gated ranking -> iterative merge); the baselines
swap in simpler context builders behind the same interface so they are
drop-in comparable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    MemoryStore,
    MemoryUnit,
    StepRecord,
    Trajectory,
    TrajectoryRecord,
    truncate_words,
)
from .endpoints import EndpointError
from .environment import Corpus, EnvAction, QaEnvironment, QaTask, parse_action
from .gate import GateParams, rank
from .metrics import MetricConfig, d_rec, query_features, safe_cosine
from .storage import DEFAULT_CACHE_CAPACITY, ObservationCache, TaskPrompt, extract
from .utilization import DEFAULT_WORD_CAP, UtilizationPolicy, aggregate

THINK_TEMPLATE = (
    "You are a knowledgeable expert, and you are answering a question. "
    "You are allowed to search in Wikipedia to get information.\n"
    "The question is: {question}.\n"
    "Now, you can choose to answer the question or search an entity on Wikipedia.\n"
    "Please think step by step to analyze how to choose the next action, "
    "and output it into one paragraph in concise.\n"
    "In previous steps, you have already accumulated some knowledge in your "
    "memory as follows:\n{memory_context}."
)

ACT_TEMPLATE = (
    "You are a knowledgeable expert, and you are answering a question. "
    "You are allowed to search in Wikipedia to get information.\n"
    "The question is: {question}.\n"
    "You have thought step by step to analyze how to choose the next action "
    "as follows:\n{thought}.\n"
    "Now, you can choose to answer the question or search an entry on Wikipedia:\n"
    "(1) Search[entity], which searches the entity on Wikipedia and returns "
    "the paragraphs if they exist.\n"
    "(2) Finish[answer], which returns the answer and finishes the task. "
    "Your answer should be in concise with several words, NOT a sentence.\n"
    "Please generate the next action accordingly.\n"
    "Your output must follow one of the following two formats:\n"
    "Search[entity]\n"
    "Finish[answer]\n"
    "Here are some examples:\n"
    "Search[Alan Turing]\n"
    "Finish[no]\n"
    "Finish[Shanghai]\n"
    "In previous steps, you have already accumulated some knowledge in your "
    "memory as follows:\n{memory_context}"
)

DEFAULT_TOP_K = 10


@dataclass
class RecallResult:
    """What the memory side hands the reasoning side each step."""

    ranked_ids: list[int]
    context: str
    word_deltas: list[int] = field(default_factory=list)


class MemoryCyclePolicy:
    """The learnable policy: cached storage, gated retrieval, merged context.

    Incoming texts wait in a bounded cache and are extracted into the store
    right before the next recall (or earlier if the cache fills). Recall
    ranks the whole store with the gate and merges the top ``top_k`` units
    into one context via the utilization endpoint.
    """

    def __init__(
        self,
        gate: GateParams,
        metric_config: MetricConfig,
        embedder,
        extraction_endpoint,
        task_prompt: TaskPrompt,
        utilization: UtilizationPolicy,
        top_k: int = DEFAULT_TOP_K,
        cache_capacity: int = DEFAULT_CACHE_CAPACITY,
    ):
        if top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {top_k}")
        self.gate = gate
        self.metric_config = metric_config
        self.embedder = embedder
        self.extraction_endpoint = extraction_endpoint
        self.task_prompt = task_prompt
        self.utilization = utilization
        self.top_k = top_k
        self.cache_capacity = cache_capacity
        self.store: MemoryStore | None = None
        self._cache: ObservationCache | None = None
        self._rng: np.random.Generator | None = None
        self._step = 0

    def begin_trajectory(self, seed: int) -> None:
        self.store = MemoryStore(dim=self.embedder.dim)
        self._cache = ObservationCache(capacity=self.cache_capacity)
        self._rng = np.random.Generator(np.random.PCG64(seed))
        self._step = 0

    def _insert_all(self, texts: list[str]) -> None:
        for text in texts:
            unit = extract(
                self.extraction_endpoint,
                self.task_prompt,
                text,
                self.embedder,
                step=self._step,
            )
            self.store.insert(unit)

    def observe(self, text: str, step: int) -> None:
        self._step = step
        self._insert_all(self._cache.put(text))

    def note(self, text: str, step: int) -> None:
        self._step = step
        self._insert_all(self._cache.put(text))

    def recall(self, state_text: str, step: int) -> RecallResult:
        self._step = step
        self._insert_all(self._cache.drain())
        if len(self.store) == 0:
            return RecallResult(ranked_ids=[], context="")
        query = query_features(
            self.metric_config, self.embedder.embed(state_text), step
        )
        ranked = rank(self.gate, self.metric_config, query, self.store)
        top_units = self.store.subset(ranked.top(self.top_k))
        context, trace = aggregate(self.utilization, top_units, state_text, self._rng)
        return RecallResult(
            ranked_ids=ranked.ids(), context=context, word_deltas=trace.word_deltas
        )


class _RawStorePolicy:
    """Shared plumbing for the non-learnable baselines: raw units, no cache."""

    stores_notes = False

    def __init__(self, embedder, word_cap: int = DEFAULT_WORD_CAP):
        self.embedder = embedder
        self.word_cap = word_cap
        self.store: MemoryStore | None = None

    def begin_trajectory(self, seed: int) -> None:
        self.store = MemoryStore(dim=self.embedder.dim)

    def observe(self, text: str, step: int) -> None:
        unit = MemoryUnit(text=text, embedding=self.embedder.embed(text), step=step)
        self.store.insert(unit)

    def note(self, text: str, step: int) -> None:
        if self.stores_notes:
            self.observe(text, step)

    def _context(self, ids: list[int]) -> str:
        texts = [u.text for u in self.store.subset(ids)]
        return truncate_words(" ".join(texts), self.word_cap)


class FullMemoryPolicy(_RawStorePolicy):
    """Concatenate every stored observation, oldest first, capped by words."""

    def recall(self, state_text: str, step: int) -> RecallResult:
        ids = [u.id for u in self.store]
        return RecallResult(ranked_ids=ids, context=self._context(ids))


class ShortTermMemoryPolicy(_RawStorePolicy):
    """Keep only the last ``window`` observations, in arrival order."""

    def __init__(self, embedder, window: int = 3, word_cap: int = DEFAULT_WORD_CAP):
        super().__init__(embedder, word_cap)
        if window < 1:
            raise ValueError(f"window must be >= 1, got {window}")
        self.window = window

    def recall(self, state_text: str, step: int) -> RecallResult:
        ids = [u.id for u in self.store][-self.window :]
        return RecallResult(ranked_ids=ids, context=self._context(ids))


class LongTermMemoryPolicy(_RawStorePolicy):
    """Rank stored observations by embedding similarity, keep the top k."""

    def __init__(
        self, embedder, top_k: int = DEFAULT_TOP_K, word_cap: int = DEFAULT_WORD_CAP
    ):
        super().__init__(embedder, word_cap)
        self.top_k = top_k

    def recall(self, state_text: str, step: int) -> RecallResult:
        if len(self.store) == 0:
            return RecallResult(ranked_ids=[], context="")
        state = self.embedder.embed(state_text)
        scored = [
            (safe_cosine(state, u.embedding), u.step, u.id) for u in self.store
        ]
        order = sorted(
            range(len(scored)),
            key=lambda i: (-scored[i][0], -scored[i][1], scored[i][2]),
        )
        ids = [scored[i][2] for i in order]
        return RecallResult(ranked_ids=ids, context=self._context(ids[: self.top_k]))


class FixedWeightPolicy(_RawStorePolicy):
    """Score by a fixed mix of relevance, importance, and recency.

    ``alpha`` weights the three aspects in that order; the importance term
    needs a configured scorer, recency uses the linear decay profile.
    """

    def __init__(
        self,
        embedder,
        alpha: tuple[float, float, float] = (1.0, 0.0, 0.0),
        metric_config: MetricConfig | None = None,
        top_k: int = DEFAULT_TOP_K,
        word_cap: int = DEFAULT_WORD_CAP,
    ):
        super().__init__(embedder, word_cap)
        if len(alpha) != 3:
            raise ValueError("alpha must weight (relevance, importance, recency)")
        if alpha[1] != 0.0 and (metric_config is None or metric_config.importance is None):
            raise ValueError("a nonzero importance weight needs an importance scorer")
        self.alpha = tuple(float(a) for a in alpha)
        self.metric_config = metric_config
        self.top_k = top_k

    def _score(self, state, state_imp, unit: MemoryUnit, step: int) -> float:
        a_rel, a_imp, a_rec = self.alpha
        score = 0.0
        if a_rel:
            score += a_rel * safe_cosine(state, unit.embedding)
        if a_imp:
            if unit.importance_feat is None:
                unit.importance_feat = self.metric_config.importance.project_memory(
                    unit.embedding
                )
            score += a_imp * safe_cosine(state_imp, unit.importance_feat)
        if a_rec:
            score += a_rec * d_rec(step, unit.step, p=1.0)
        return score

    def recall(self, state_text: str, step: int) -> RecallResult:
        if len(self.store) == 0:
            return RecallResult(ranked_ids=[], context="")
        state = self.embedder.embed(state_text)
        state_imp = (
            None
            if self.metric_config is None or self.metric_config.importance is None
            else self.metric_config.importance.project_query(state)
        )
        scored = [
            (self._score(state, state_imp, u, step), u.step, u.id) for u in self.store
        ]
        order = sorted(
            range(len(scored)),
            key=lambda i: (-scored[i][0], -scored[i][1], scored[i][2]),
        )
        ids = [scored[i][2] for i in order]
        return RecallResult(ranked_ids=ids, context=self._context(ids[: self.top_k]))


BASELINE_KINDS = ("full", "long-term", "short-term", "fixed-weight")


def baseline_memory(kind: str, embedder, **kwargs):
    """Build one of the non-learnable memory policies by name."""
    if kind == "full":
        return FullMemoryPolicy(embedder, **kwargs)
    if kind == "long-term":
        return LongTermMemoryPolicy(embedder, **kwargs)
    if kind == "short-term":
        return ShortTermMemoryPolicy(embedder, **kwargs)
    if kind == "fixed-weight":
        return FixedWeightPolicy(embedder, **kwargs)
    raise ValueError(f"unknown baseline kind {kind!r}; expected one of {BASELINE_KINDS}")


# -- the reasoning loop --------------------------------------------------------


@dataclass
class ReactAgent:
    """A chat endpoint plus a memory policy, sharing the think/act prompts."""

    chat: object  # anything with .chat(messages) -> ChatResult
    policy: object  # a memory policy (cycle or baseline)
    think_template: str = THINK_TEMPLATE
    act_template: str = ACT_TEMPLATE


def _complete(endpoint, prompt: str) -> str:
    return endpoint.chat([{"role": "user", "content": prompt}]).text


def react_step(
    agent: ReactAgent, question: str, observation: str, step: int
) -> tuple[EnvAction, StepRecord]:
    """One think/act cycle: store, recall, think, act, remember the exchange."""
    agent.policy.observe(observation, step)
    recall = agent.policy.recall(observation, step)
    thought = _complete(
        agent.chat,
        agent.think_template.format(question=question, memory_context=recall.context),
    )
    action_text = _complete(
        agent.chat,
        agent.act_template.format(
            question=question, thought=thought, memory_context=recall.context
        ),
    )
    agent.policy.note(thought, step)
    agent.policy.note(action_text, step)
    record = StepRecord(
        step=step,
        state_text=observation,
        ranked_ids=recall.ranked_ids,
        context=recall.context,
        thought=thought,
        action=action_text,
        word_deltas=recall.word_deltas,
    )
    return parse_action(action_text), record


def run_trajectory(
    agent: ReactAgent,
    task: QaTask,
    corpus: Corpus,
    trajectory_id: str,
    seed: int,
) -> TrajectoryRecord:
    """Play one full episode; the policy gets a fresh store and rng.

    The question itself is the first observation. An endpoint failure
    aborts the episode, which is then recorded as a failure rather than
    raised — infrastructure noise must not crash a training run.
    """
    env = QaEnvironment(task, corpus)
    agent.policy.begin_trajectory(seed)
    observation = task.question
    steps: list[StepRecord] = []
    reward = 0.0
    step = 1
    while True:
        try:
            action, record = react_step(agent, task.question, observation, step)
        except EndpointError:
            reward = 0.0
            break
        steps.append(record)
        observation, reward, done = env.step(action)
        if done:
            break
        step += 1
    trajectory = Trajectory(
        id=trajectory_id,
        question=task.question,
        steps=steps,
        reward=reward,
        success=reward >= 1.0,
    )
    return TrajectoryRecord(trajectory=trajectory, store=agent.policy.store)
