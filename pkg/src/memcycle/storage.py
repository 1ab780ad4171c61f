"""Memory storage: observation caching, LLM extraction, and prompt reflection.

Observations are buffered in a small cache and flushed — either when the
cache fills or right before a recall — through an extraction prompt that
condenses each one into a memory unit. The extraction prompt carries a
fixed instruction plus learned hint lines; reflection over grouped episodes
proposes new hints, which is how the storage stage is optimized.
"""

from __future__ import annotations

import json
from collections.abc import Sequence
from dataclasses import dataclass, field

from memcycle.core import MemoryUnit, TrajectoryRecord
from memcycle.endpoints import EndpointError

EXTRACT_TEMPLATE = (
    "Observation: {observation}\n"
    "Hint: {hint}\n"
    "From the above observation and according to the hint, please extract critical"
    " informative points and summarize them into a concise paragraph. You should just"
    " output the result of summarization, without any other messages."
)

REFLECT_TEMPLATES = {
    "positive": (
        "The following episodes succeeded. Review each state and the memory"
        " extracted from it, and derive advice on what to preserve when storing"
        " observations.\n{digest}\n"
        "Reply with at most {max_lines} short hint lines, one per line, without"
        " numbering or any other text."
    ),
    "negative": (
        "The following episodes failed. Review each state and the memory"
        " extracted from it, and derive advice on what to store differently.\n"
        "{digest}\n"
        "Reply with at most {max_lines} short hint lines, one per line, without"
        " numbering or any other text."
    ),
}

DEFAULT_MAX_HINTS = 20
DEFAULT_CACHE_CAPACITY = 5


@dataclass
class TaskPrompt:
    """Extraction prompt: a fixed base template plus learned hint lines."""

    base: str = EXTRACT_TEMPLATE
    hints: list[str] = field(default_factory=list)
    max_hints: int = DEFAULT_MAX_HINTS

    def render(self, observation: str) -> str:
        return self.base.format(observation=observation, hint="\n".join(self.hints))

    def copy(self) -> TaskPrompt:
        return TaskPrompt(base=self.base, hints=list(self.hints), max_hints=self.max_hints)

    def to_json(self) -> str:
        return json.dumps(
            {"base": self.base, "hints": self.hints, "max_hints": self.max_hints},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, payload: str) -> TaskPrompt:
        data = json.loads(payload)
        return cls(
            base=data["base"],
            hints=list(data["hints"]),
            max_hints=int(data.get("max_hints", DEFAULT_MAX_HINTS)),
        )


def extract(
    endpoint,
    task_prompt: TaskPrompt,
    observation: str,
    embedder,
    step: int,
) -> MemoryUnit:
    """Condense one observation into a memory unit via the extraction prompt.

    A memory is never lost to infrastructure: if the endpoint fails or
    returns nothing usable, the unit keeps the raw observation text and is
    flagged as a fallback.
    """
    prompt = task_prompt.render(observation)
    text = ""
    fallback = False
    try:
        text = endpoint.chat([{"role": "user", "content": prompt}]).text.strip()
    except EndpointError:
        fallback = True
    if not text.split():
        text = observation
        fallback = True
    return MemoryUnit(
        text=text, embedding=embedder.embed(text), step=step, fallback=fallback
    )


class ObservationCache:
    """Bounded FIFO buffer of raw observations awaiting extraction."""

    def __init__(self, capacity: int = DEFAULT_CACHE_CAPACITY):
        if capacity < 1:
            raise ValueError(f"cache capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._pending: list[str] = []

    @property
    def pending(self) -> tuple[str, ...]:
        return tuple(self._pending)

    def put(self, observation: str) -> list[str]:
        """Buffer one observation; returns the flushed batch when full."""
        self._pending.append(observation)
        if len(self._pending) >= self.capacity:
            return self.drain()
        return []

    def drain(self) -> list[str]:
        """Flush everything pending — called before any recall."""
        flushed = self._pending
        self._pending = []
        return flushed


def partition_records(
    records: Sequence[TrajectoryRecord], threshold: float
) -> tuple[list[TrajectoryRecord], list[TrajectoryRecord]]:
    """Split episodes into (positive, negative) groups by reward.

    The boundary is positive: reward equal to the threshold succeeds.
    """
    positive = [r for r in records if r.trajectory.reward >= threshold]
    negative = [r for r in records if r.trajectory.reward < threshold]
    return positive, negative


def _digest(records: Sequence[TrajectoryRecord], sample_size: int | None) -> str:
    """Flatten grouped episodes into (state, stored memory) pairs for reflection."""
    rows: list[str] = []
    chosen = records if sample_size is None else records[:sample_size]
    for record in chosen:
        trajectory = record.trajectory
        rows.append(f"question: {trajectory.question} | reward: {trajectory.reward:g}")
        units_by_step: dict[int, list[str]] = {}
        for unit in record.store:
            units_by_step.setdefault(unit.step, []).append(unit.text)
        for step in trajectory.steps:
            stored = units_by_step.get(step.step, [])
            if stored:
                rows.append(f"  state: {step.state_text} -> stored: {' / '.join(stored)}")
    return "\n".join(rows)


def reflect(
    endpoint,
    records: Sequence[TrajectoryRecord],
    polarity: str,
    max_lines: int = 2,
    sample_size: int | None = None,
) -> list[str]:
    """Ask the reflection endpoint for hint lines learned from one group.

    An empty group yields no hints without an endpoint call. The reply is
    parsed as one hint per line, capped at ``max_lines``.
    """
    if polarity not in REFLECT_TEMPLATES:
        raise ValueError(f"polarity must be 'positive' or 'negative', got {polarity!r}")
    if not records:
        return []
    prompt = REFLECT_TEMPLATES[polarity].format(
        digest=_digest(records, sample_size), max_lines=max_lines
    )
    reply = endpoint.chat([{"role": "user", "content": prompt}]).text
    lines = [line.strip() for line in reply.splitlines() if line.strip()]
    return lines[:max_lines]


def update_task_prompt(
    prompt: TaskPrompt, positive_hints: Sequence[str], negative_hints: Sequence[str]
) -> TaskPrompt:
    """Append new hint lines, positives first, deduplicated, oldest evicted.

    Returns a fresh prompt; the input is untouched. Re-applying the same
    hints is a no-op, so repeated reflection rounds cannot bloat the prompt.
    """
    updated = prompt.copy()
    for hint in list(positive_hints) + list(negative_hints):
        hint = hint.strip()
        if hint and hint not in updated.hints:
            updated.hints.append(hint)
    if len(updated.hints) > updated.max_hints:
        updated.hints = updated.hints[-updated.max_hints :]
    return updated
