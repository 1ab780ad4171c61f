"""Interactive question-answering environment with a searchable corpus.

The protocol is a small tool-use loop: the agent emits bracketed actions
(``Search[entity]`` / ``Finish[answer]``), the environment answers with
document text or terminates with an exact-match reward. The corpus is an
in-memory title -> body map so every episode is deterministic and offline.
"""

from __future__ import annotations

import json
import re
import string
from dataclasses import dataclass

NOT_FOUND_MESSAGE = "Could not find a page titled {entity!r}."
INVALID_MESSAGE = (
    "The action is invalid. Reply with Search[entity] or Finish[answer]."
)
FINISHED_MESSAGE = "Episode finished."
DEFAULT_MAX_STEPS = 5


# -- answer normalization ----------------------------------------------------

_PUNCT = set(string.punctuation)
_ARTICLE_RE = re.compile(r"\b(a|an|the)\b")


def normalize_answer(text: str) -> str:
    """Canonical answer form: lowercase, no punctuation, no articles."""
    text = text.lower()
    text = "".join(ch for ch in text if ch not in _PUNCT)
    text = _ARTICLE_RE.sub(" ", text)
    return " ".join(text.split())


def exact_match(predicted: str, gold: str) -> int:
    return int(normalize_answer(predicted) == normalize_answer(gold))


# -- actions -----------------------------------------------------------------

SEARCH = "search"
FINISH = "finish"
INVALID = "invalid"

_ACTION_RE = re.compile(r"(Search|Finish)\[([^\[\]]*)\]")


@dataclass(frozen=True)
class EnvAction:
    """A parsed agent action: a search, an answer, or neither."""

    kind: str  # one of SEARCH, FINISH, INVALID
    value: str

    @classmethod
    def search(cls, entity: str) -> EnvAction:
        return cls(SEARCH, entity)

    @classmethod
    def finish(cls, answer: str) -> EnvAction:
        return cls(FINISH, answer)

    @classmethod
    def invalid(cls, raw: str) -> EnvAction:
        return cls(INVALID, raw)


def parse_action(text: str) -> EnvAction:
    """First well-formed ``Search[...]`` or ``Finish[...]`` in the text wins.

    Empty brackets don't count as well-formed; with no usable match the
    whole reply is preserved as an invalid action.
    """
    for match in _ACTION_RE.finditer(text):
        value = match.group(2).strip()
        if value:
            return EnvAction(kind=match.group(1).lower(), value=value)
    return EnvAction.invalid(text)


# -- corpus ------------------------------------------------------------------


def _normalize_title(title: str) -> str:
    return " ".join(title.lower().split())


class Corpus:
    """Unique-titled documents with case-insensitive lookup."""

    def __init__(self, documents: dict[str, str] | None = None):
        self._bodies: dict[str, str] = {}
        self._by_normalized: dict[str, str] = {}
        for title, body in (documents or {}).items():
            self.add(title, body)

    def __len__(self) -> int:
        return len(self._bodies)

    @property
    def titles(self) -> tuple[str, ...]:
        return tuple(self._bodies)

    def add(self, title: str, body: str) -> None:
        key = _normalize_title(title)
        if not key:
            raise ValueError("document title must be non-empty")
        if key in self._by_normalized:
            raise ValueError(f"duplicate title (after normalization): {title!r}")
        self._by_normalized[key] = title
        self._bodies[title] = body

    def lookup(self, entity: str) -> str | None:
        title = self._by_normalized.get(_normalize_title(entity))
        return None if title is None else self._bodies[title]

    def to_jsonl(self) -> bytes:
        lines = [
            json.dumps({"title": t, "text": self._bodies[t]}, sort_keys=True)
            for t in self._bodies
        ]
        return ("\n".join(lines) + "\n").encode("utf-8") if lines else b""

    @classmethod
    def from_jsonl(cls, payload: bytes) -> Corpus:
        corpus = cls()
        for line in payload.decode("utf-8").splitlines():
            if not line.strip():
                continue
            row = json.loads(line)
            corpus.add(row["title"], row["text"])
        return corpus


# -- tasks and the episode loop ----------------------------------------------


@dataclass(frozen=True)
class QaTask:
    question: str
    gold_answer: str
    max_steps: int = DEFAULT_MAX_STEPS

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError(f"max_steps must be >= 1, got {self.max_steps}")


def tasks_to_jsonl(tasks: list[QaTask]) -> bytes:
    lines = [
        json.dumps({"question": t.question, "answer": t.gold_answer}, sort_keys=True)
        for t in tasks
    ]
    return ("\n".join(lines) + "\n").encode("utf-8") if lines else b""


def tasks_from_jsonl(payload: bytes, max_steps: int = DEFAULT_MAX_STEPS) -> list[QaTask]:
    tasks = []
    for line in payload.decode("utf-8").splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        tasks.append(QaTask(row["question"], row["answer"], max_steps=max_steps))
    return tasks


class QaEnvironment:
    """One episode: search the corpus or answer, within a step budget.

    Reward is binary exact match, granted only by a Finish action; running
    out of steps ends the episode with reward 0.
    """

    def __init__(self, task: QaTask, corpus: Corpus):
        self.task = task
        self.corpus = corpus
        self.steps_taken = 0
        self.done = False
        self.reward = 0.0

    def step(self, action: EnvAction) -> tuple[str, float, bool]:
        if self.done:
            raise RuntimeError("environment episode is already done")
        self.steps_taken += 1
        reward = 0.0
        if action.kind == FINISH:
            reward = float(exact_match(action.value, self.task.gold_answer))
            self.done = True
            observation = FINISHED_MESSAGE
        elif action.kind == SEARCH:
            body = self.corpus.lookup(action.value)
            if body is None:
                observation = NOT_FOUND_MESSAGE.format(entity=action.value)
            else:
                observation = body
        else:
            observation = INVALID_MESSAGE
        if self.steps_taken >= self.task.max_steps:
            self.done = True
        self.reward = reward
        return observation, reward, self.done


def mean_steps(trajectories) -> float:
    """Average reasoning steps per episode (empty input is an error)."""
    counts = [len(t.steps) for t in trajectories]
    if not counts:
        raise ValueError("mean_steps needs at least one trajectory")
    return sum(counts) / len(counts)
