"""Core data model: memory units, append-only stores, and trajectories.

Everything downstream (ranking, aggregation, training) reads and writes
these types, so they stay free of any model or endpoint dependencies.
Persistence is line-delimited JSON: a header line with a record count,
then one unit / one step per line, so a truncated payload is detectable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class ParseError(ValueError):
    """Raised when a serialized payload is malformed or truncated."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


def _require(cond: bool, message: str, line: int | None = None) -> None:
    if not cond:
        raise ParseError(message, line)


@dataclass(eq=False)
class MemoryUnit:
    """One stored memory: extracted text plus cached scoring features.

    ``emotion`` and ``importance_feat`` start unset and are filled in
    lazily the first time a scorer touches the unit; ``fallback`` marks
    units whose text is the raw observation because extraction failed.
    """

    text: str
    embedding: np.ndarray
    step: int
    id: int | None = None
    emotion: np.ndarray | None = None
    importance_feat: np.ndarray | None = None
    fallback: bool = False

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MemoryUnit):
            return NotImplemented
        return (
            self.text == other.text
            and self.step == other.step
            and self.id == other.id
            and self.fallback == other.fallback
            and np.array_equal(self.embedding, other.embedding)
            and _optional_equal(self.emotion, other.emotion)
            and _optional_equal(self.importance_feat, other.importance_feat)
        )

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "text": self.text,
            "embedding": [float(x) for x in self.embedding],
            "step": self.step,
            "emotion": None if self.emotion is None else [float(x) for x in self.emotion],
            "importance_feat": (
                None if self.importance_feat is None else [float(x) for x in self.importance_feat]
            ),
            "fallback": self.fallback,
        }

    @classmethod
    def from_dict(cls, data: dict, line: int | None = None) -> MemoryUnit:
        _require(isinstance(data.get("text"), str), "unit text must be a string", line)
        _require(isinstance(data.get("embedding"), list), "unit embedding must be a list", line)
        _require(isinstance(data.get("step"), int), "unit step must be an integer", line)
        emotion = data.get("emotion")
        imp = data.get("importance_feat")
        return cls(
            text=data["text"],
            embedding=np.asarray(data["embedding"], dtype=np.float64),
            step=data["step"],
            id=data.get("id"),
            emotion=None if emotion is None else np.asarray(emotion, dtype=np.float64),
            importance_feat=None if imp is None else np.asarray(imp, dtype=np.float64),
            fallback=bool(data.get("fallback", False)),
        )


def _optional_equal(a: np.ndarray | None, b: np.ndarray | None) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return np.array_equal(a, b)


class MemoryStore:
    """Append-only collection of memory units with monotonically increasing ids.

    The store owns its embedding dimensionality: every inserted unit must
    match ``dim``. Units are never removed or reordered.
    """

    def __init__(self, dim: int):
        if dim <= 0:
            raise ValueError(f"store dim must be positive, got {dim}")
        self.dim = dim
        self._units: list[MemoryUnit] = []

    def __len__(self) -> int:
        return len(self._units)

    def __iter__(self):
        return iter(self._units)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MemoryStore):
            return NotImplemented
        return self.dim == other.dim and self._units == other._units

    @property
    def units(self) -> tuple[MemoryUnit, ...]:
        return tuple(self._units)

    def insert(self, unit: MemoryUnit) -> MemoryUnit:
        """Append ``unit``, assigning the next id when the unit has none.

        Explicit ids (e.g. from deserialization) must keep the store's
        ids strictly increasing.
        """
        if unit.embedding.shape != (self.dim,):
            raise ValueError(
                f"unit embedding has shape {unit.embedding.shape}, store dim is {self.dim}"
            )
        next_id = self._units[-1].id + 1 if self._units else 0
        if unit.id is None:
            unit.id = next_id
        elif unit.id < next_id:
            raise ValueError(f"unit id {unit.id} breaks monotonic id order (next is {next_id})")
        self._units.append(unit)
        return unit

    def get(self, unit_id: int) -> MemoryUnit:
        for unit in self._units:
            if unit.id == unit_id:
                return unit
        raise KeyError(f"no unit with id {unit_id}")

    def subset(self, ids: list[int]) -> list[MemoryUnit]:
        by_id = {u.id: u for u in self._units}
        return [by_id[i] for i in ids]


@dataclass
class StepRecord:
    """Everything observed and produced during one reasoning step."""

    step: int
    state_text: str
    ranked_ids: list[int]
    context: str
    thought: str
    action: str
    word_deltas: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "state_text": self.state_text,
            "ranked_ids": list(self.ranked_ids),
            "context": self.context,
            "thought": self.thought,
            "action": self.action,
            "word_deltas": list(self.word_deltas),
        }

    @classmethod
    def from_dict(cls, data: dict, line: int | None = None) -> StepRecord:
        for key in ("step", "state_text", "ranked_ids", "context", "thought", "action"):
            _require(key in data, f"step record missing field {key!r}", line)
        return cls(
            step=data["step"],
            state_text=data["state_text"],
            ranked_ids=list(data["ranked_ids"]),
            context=data["context"],
            thought=data["thought"],
            action=data["action"],
            word_deltas=list(data.get("word_deltas", [])),
        )


@dataclass
class Trajectory:
    """An episode: ordered step records plus the terminal reward."""

    id: str
    question: str
    steps: list[StepRecord]
    reward: float
    success: bool

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "question": self.question,
            "steps": [s.to_dict() for s in self.steps],
            "reward": self.reward,
            "success": self.success,
        }

    @classmethod
    def from_dict(cls, data: dict, line: int | None = None) -> Trajectory:
        for key in ("id", "question", "steps", "reward", "success"):
            _require(key in data, f"trajectory missing field {key!r}", line)
        return cls(
            id=data["id"],
            question=data["question"],
            steps=[StepRecord.from_dict(s, line) for s in data["steps"]],
            reward=float(data["reward"]),
            success=bool(data["success"]),
        )


@dataclass
class TrajectoryRecord:
    """A trajectory paired with the store its agent accumulated.

    Training consumers need both halves: ranked id lists in the steps
    refer to units that only the store can resolve back to text.
    """

    trajectory: Trajectory
    store: MemoryStore


# --- line-delimited JSON persistence -----------------------------------

_STORE_KIND = "memory-store"
_TRAJ_KIND = "trajectory"
_RECORD_KIND = "trajectory-record"


def _dump_lines(header: dict, rows: list[dict]) -> bytes:
    lines = [json.dumps(header, sort_keys=True)]
    lines.extend(json.dumps(row, sort_keys=True) for row in rows)
    return ("\n".join(lines) + "\n").encode("utf-8")


def _load_lines(payload: bytes, kind: str) -> tuple[dict, list[dict]]:
    try:
        text = payload.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"payload is not UTF-8: {exc}") from None
    lines = text.splitlines()
    _require(len(lines) >= 1, "payload is empty")
    rows: list[dict] = []
    header: dict = {}
    for i, line in enumerate(lines):
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON ({exc.msg})", i + 1) from None
        _require(isinstance(row, dict), "each line must be a JSON object", i + 1)
        if i == 0:
            header = row
        else:
            rows.append(row)
    _require(header.get("kind") == kind, f"expected kind {kind!r}, got {header.get('kind')!r}", 1)
    count = header.get("count")
    _require(isinstance(count, int), "header missing record count", 1)
    _require(
        len(rows) == count,
        f"header promises {count} records but payload has {len(rows)} (truncated?)",
    )
    return header, rows


def serialize_store(store: MemoryStore) -> bytes:
    header = {"kind": _STORE_KIND, "dim": store.dim, "count": len(store)}
    return _dump_lines(header, [u.to_dict() for u in store])


def deserialize_store(payload: bytes) -> MemoryStore:
    header, rows = _load_lines(payload, _STORE_KIND)
    _require(isinstance(header.get("dim"), int), "store header missing dim", 1)
    store = MemoryStore(dim=header["dim"])
    for i, row in enumerate(rows):
        unit = MemoryUnit.from_dict(row, line=i + 2)
        if unit.embedding.shape != (store.dim,):
            raise ParseError(
                f"unit embedding dim {unit.embedding.shape[0]} != store dim {store.dim}",
                line=i + 2,
            )
        store.insert(unit)
    return store


def serialize_trajectory(trajectory: Trajectory) -> bytes:
    header = {
        "kind": _TRAJ_KIND,
        "count": len(trajectory.steps),
        "id": trajectory.id,
        "question": trajectory.question,
        "reward": trajectory.reward,
        "success": trajectory.success,
    }
    return _dump_lines(header, [s.to_dict() for s in trajectory.steps])


def deserialize_trajectory(payload: bytes) -> Trajectory:
    header, rows = _load_lines(payload, _TRAJ_KIND)
    for key in ("id", "question", "reward", "success"):
        _require(key in header, f"trajectory header missing {key!r}", 1)
    return Trajectory(
        id=header["id"],
        question=header["question"],
        steps=[StepRecord.from_dict(row, line=i + 2) for i, row in enumerate(rows)],
        reward=float(header["reward"]),
        success=bool(header["success"]),
    )


def record_to_dict(record: TrajectoryRecord) -> dict:
    return {
        "kind": _RECORD_KIND,
        "trajectory": record.trajectory.to_dict(),
        "store": {
            "dim": record.store.dim,
            "units": [u.to_dict() for u in record.store],
        },
    }


def record_from_dict(data: dict, line: int | None = None) -> TrajectoryRecord:
    _require(data.get("kind") == _RECORD_KIND, "not a trajectory record", line)
    _require(isinstance(data.get("store"), dict), "record missing store", line)
    store_data = data["store"]
    store = MemoryStore(dim=store_data["dim"])
    for unit_row in store_data["units"]:
        store.insert(MemoryUnit.from_dict(unit_row, line))
    return TrajectoryRecord(
        trajectory=Trajectory.from_dict(data["trajectory"], line),
        store=store,
    )


def write_records(records: list[TrajectoryRecord]) -> bytes:
    """Serialize a trajectory log, one record per line."""
    lines = [json.dumps(record_to_dict(r), sort_keys=True) for r in records]
    return ("\n".join(lines) + "\n").encode("utf-8") if lines else b""


def read_records(payload: bytes) -> list[TrajectoryRecord]:
    records = []
    for i, line in enumerate(payload.decode("utf-8").splitlines()):
        if not line.strip():
            continue
        try:
            data = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON ({exc.msg})", i + 1) from None
        records.append(record_from_dict(data, line=i + 1))
    return records


def word_count(text: str) -> int:
    """Whitespace token count — the word measure used everywhere."""
    return len(text.split())


def truncate_words(text: str, cap: int, marker: str = "...") -> str:
    """Cap ``text`` at ``cap`` whitespace tokens, marker included in the budget."""
    tokens = text.split()
    if len(tokens) <= cap:
        return text
    kept = tokens[: max(cap - 1, 0)]
    return " ".join(kept + [marker]) if kept else marker
