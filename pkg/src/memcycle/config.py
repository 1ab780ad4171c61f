"""Run configuration: a JSON document in, fully wired runtime objects out.

A :class:`RunConfig` captures everything a run needs — seeds, endpoint
specs, the environment, the memory policy, scorer/gate initialization, and
optimization hyperparameters — so any pipeline is reproducible from the
config file alone. Validation errors carry the dotted path of the offending
key. Builders construct fresh objects every call; two configs never share
mutable state.

Secrets never appear here: remote endpoints read their tokens from an
environment variable (``auth_env``), never from config files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .agent import DEFAULT_TOP_K, MemoryCyclePolicy, baseline_memory
from .embeddings import MockEmbeddings, RemoteEmbeddings
from .endpoints import RetryPolicy, RemoteChat, ScriptedChat
from .environment import DEFAULT_MAX_STEPS, Corpus, QaTask, tasks_from_jsonl
from .gate import DEFAULT_HIDDEN, GateParams
from .metrics import EmotionScorer, ImportanceScorer, MetricConfig
from .optimize import AgentRuntime, OptimizationConfig, PolicyBundle
from .storage import DEFAULT_CACHE_CAPACITY, TaskPrompt
from .synthetic import TwoHopResponder, two_hop_world
from .utilization import DEFAULT_WORD_CAP, UtilizationPolicy


class ConfigError(ValueError):
    """A run configuration is invalid; ``path`` names the offending key."""

    def __init__(self, path: str, message: str):
        super().__init__(f"config error at {path}: {message}")
        self.path = path


def _expect(data: Any, path: str, kind: type, kind_name: str) -> Any:
    if not isinstance(data, kind) or isinstance(data, bool) and kind is not bool:
        raise ConfigError(path, f"expected {kind_name}, got {type(data).__name__}")
    return data


def _section(data: dict, key: str, path: str, default: dict | None = None) -> dict:
    value = data.get(key, default if default is not None else {})
    return _expect(value, f"{path}{key}", dict, "an object")


def _int(data: dict, key: str, path: str, default: int) -> int:
    value = data.get(key, default)
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{path}{key}", f"expected an integer, got {value!r}")
    return value


def _num(data: dict, key: str, path: str, default: float) -> float:
    value = data.get(key, default)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path}{key}", f"expected a number, got {value!r}")
    return float(value)


def _str(data: dict, key: str, path: str, default: str | None = None) -> str:
    value = data.get(key, default)
    if value is None:
        raise ConfigError(f"{path}{key}", "required key is missing")
    return _expect(value, f"{path}{key}", str, "a string")


NAMED_SCRIPTS = ("two-hop-rig",)

_TOP_LEVEL_KEYS = {
    "seed",
    "outdir",
    "embedding",
    "endpoints",
    "environment",
    "memory_policy",
    "metrics",
    "gate",
    "task_prompt",
    "utilization",
    "optimization",
    "pretrain",
}

_ENDPOINT_ROLES = ("chat", "extraction", "utilization", "reflection", "expert")

POLICY_KINDS = ("cycle", "full", "long-term", "short-term", "fixed-weight")


@dataclass
class RunConfig:
    """Validated run description. ``base_dir`` anchors relative paths."""

    seed: int = 0
    outdir: str = "out"
    embedding: dict = field(default_factory=dict)
    endpoints: dict = field(default_factory=dict)
    environment: dict = field(default_factory=dict)
    memory_policy: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    gate: dict = field(default_factory=dict)
    task_prompt: dict = field(default_factory=dict)
    utilization: dict = field(default_factory=dict)
    optimization: OptimizationConfig = field(default_factory=OptimizationConfig)
    pretrain: dict = field(default_factory=dict)
    base_dir: Path = field(default_factory=Path)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "outdir": self.outdir,
            "embedding": dict(self.embedding),
            "endpoints": {k: dict(v) for k, v in self.endpoints.items()},
            "environment": dict(self.environment),
            "memory_policy": dict(self.memory_policy),
            "metrics": {k: dict(v) for k, v in self.metrics.items()},
            "gate": dict(self.gate),
            "task_prompt": dict(self.task_prompt),
            "utilization": dict(self.utilization),
            "optimization": self.optimization.to_dict(),
            "pretrain": dict(self.pretrain),
        }

    @classmethod
    def from_dict(cls, data: dict, base_dir: str | Path = ".") -> RunConfig:
        _expect(data, "<root>", dict, "an object")
        unknown = sorted(set(data) - _TOP_LEVEL_KEYS)
        if unknown:
            raise ConfigError(unknown[0], "unknown top-level key")

        endpoints = _section(data, "endpoints", "")
        for role in endpoints:
            if role not in _ENDPOINT_ROLES:
                raise ConfigError(f"endpoints.{role}", "unknown endpoint role")
            _validate_endpoint(endpoints[role], f"endpoints.{role}")

        try:
            optimization = OptimizationConfig.from_dict(
                _section(data, "optimization", "")
            )
        except TypeError as exc:
            raise ConfigError("optimization", str(exc)) from None
        except ValueError as exc:
            raise ConfigError("optimization", str(exc)) from None

        cfg = cls(
            seed=_int(data, "seed", "", 0),
            outdir=_str(data, "outdir", "", "out"),
            embedding=_section(data, "embedding", ""),
            endpoints=endpoints,
            environment=_section(data, "environment", ""),
            memory_policy=_section(data, "memory_policy", ""),
            metrics=_section(data, "metrics", ""),
            gate=_section(data, "gate", ""),
            task_prompt=_section(data, "task_prompt", ""),
            utilization=_section(data, "utilization", ""),
            optimization=optimization,
            pretrain=_section(data, "pretrain", ""),
            base_dir=Path(base_dir),
        )
        _validate_embedding(cfg.embedding)
        _validate_environment(cfg.environment)
        _validate_policy(cfg.memory_policy)
        return cfg


def _validate_endpoint(spec: Any, path: str) -> None:
    _expect(spec, path, dict, "an object")
    backend = spec.get("backend", "scripted")
    if backend == "scripted":
        sources = [k for k in ("script", "replies", "replies_path") if k in spec]
        if len(sources) > 1:
            raise ConfigError(path, f"give only one of script/replies/replies_path, got {sources}")
        if "script" in spec and spec["script"] not in NAMED_SCRIPTS:
            raise ConfigError(
                f"{path}.script",
                f"unknown named script {spec['script']!r}; available: {list(NAMED_SCRIPTS)}",
            )
        if "replies" in spec:
            replies = _expect(spec["replies"], f"{path}.replies", list, "a list")
            for i, reply in enumerate(replies):
                _expect(reply, f"{path}.replies[{i}]", str, "a string")
    elif backend == "remote":
        _str(spec, "base_url", f"{path}.")
        _str(spec, "model", f"{path}.")
    else:
        raise ConfigError(f"{path}.backend", f"expected 'scripted' or 'remote', got {backend!r}")


def _validate_embedding(spec: dict) -> None:
    backend = spec.get("backend", "mock")
    if backend == "mock":
        if _int(spec, "dim", "embedding.", 64) <= 0:
            raise ConfigError("embedding.dim", "must be positive")
    elif backend == "remote":
        _str(spec, "base_url", "embedding.")
        _str(spec, "model", "embedding.")
    else:
        raise ConfigError("embedding.backend", f"expected 'mock' or 'remote', got {backend!r}")


def _validate_environment(spec: dict) -> None:
    if "synthetic" in spec and ("corpus_path" in spec or "tasks_path" in spec):
        raise ConfigError("environment", "give either synthetic or corpus/tasks paths, not both")
    if "corpus_path" in spec or "tasks_path" in spec:
        _str(spec, "corpus_path", "environment.")
        _str(spec, "tasks_path", "environment.")
    else:
        _section(spec, "synthetic", "environment.")


def _validate_policy(spec: dict) -> None:
    kind = spec.get("kind", "cycle")
    if kind not in POLICY_KINDS:
        raise ConfigError("memory_policy.kind", f"expected one of {list(POLICY_KINDS)}, got {kind!r}")
    if kind == "fixed-weight":
        alpha = spec.get("alpha", [1.0, 0.0, 0.0])
        if not isinstance(alpha, list) or len(alpha) != 3:
            raise ConfigError("memory_policy.alpha", "expected a 3-element list")


def load_config(path: str | Path) -> RunConfig:
    """Parse and validate a config file; relative paths anchor at its parent."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError("<file>", f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"config file is not valid JSON: {exc}") from None
    return RunConfig.from_dict(data, base_dir=path.parent)


def apply_overrides(data: dict, assignments: list[str]) -> dict:
    """Apply ``dotted.key=json-value`` overrides on top of raw config data.

    Values parse as JSON when possible and fall back to plain strings, so
    ``--set seed=3`` and ``--set outdir=run2`` both do the obvious thing.
    """
    result = json.loads(json.dumps(data))  # deep copy, JSON types only
    for assignment in assignments:
        key, sep, raw = assignment.partition("=")
        if not sep or not key:
            raise ConfigError(key or "<override>", "overrides take the form key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = result
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(key, "override path crosses a non-object value")
        node[parts[-1]] = value
    return result


# -- builders -------------------------------------------------------------------


def build_embedder(cfg: RunConfig):
    spec = cfg.embedding
    if spec.get("backend", "mock") == "remote":
        return RemoteEmbeddings(
            base_url=spec["base_url"],
            model=spec["model"],
            dim=_int(spec, "dim", "embedding.", 768),
            policy=RetryPolicy(
                retries=_int(spec, "retries", "embedding.", 2),
                timeout=_num(spec, "timeout", "embedding.", 30.0),
            ),
        )
    return MockEmbeddings(
        dim=_int(spec, "dim", "embedding.", 64),
        seed=_int(spec, "seed", "embedding.", 0),
    )


def build_endpoint(cfg: RunConfig, role: str):
    """Construct the endpoint for a role, falling back to the chat spec.

    The ``expert`` role has no fallback: absent a spec it returns None and
    the optimizer uses the bundle's own merge endpoint.
    """
    spec = cfg.endpoints.get(role)
    if spec is None:
        if role == "expert":
            return None
        spec = cfg.endpoints.get("chat", {})
    if spec.get("backend", "scripted") == "remote":
        return RemoteChat(
            base_url=spec["base_url"],
            model=spec["model"],
            policy=RetryPolicy(
                retries=_int(spec, "retries", f"endpoints.{role}.", 2),
                timeout=_num(spec, "timeout", f"endpoints.{role}.", 30.0),
            ),
            want_logprobs=bool(spec.get("want_logprobs", False)),
        )
    if "replies" in spec:
        return ScriptedChat(list(spec["replies"]), name=role)
    if "replies_path" in spec:
        payload = (cfg.base_dir / spec["replies_path"]).read_text()
        replies = json.loads(payload)
        if not isinstance(replies, list):
            raise ConfigError(
                f"endpoints.{role}.replies_path", "file must hold a JSON list of replies"
            )
        return ScriptedChat([str(r) for r in replies], name=role)
    name = spec.get("script", "two-hop-rig")
    return ScriptedChat(TwoHopResponder(), name=name)


def build_world(cfg: RunConfig) -> tuple[Corpus, list[QaTask]]:
    spec = cfg.environment
    max_steps = _int(spec, "max_steps", "environment.", DEFAULT_MAX_STEPS)
    if "corpus_path" in spec:
        corpus = Corpus.from_jsonl((cfg.base_dir / spec["corpus_path"]).read_bytes())
        tasks = tasks_from_jsonl(
            (cfg.base_dir / spec["tasks_path"]).read_bytes(), max_steps=max_steps
        )
        return corpus, tasks
    synth = spec.get("synthetic", {})
    return two_hop_world(
        n_tasks=_int(synth, "n_tasks", "environment.synthetic.", 30),
        seed=_int(synth, "seed", "environment.synthetic.", 5),
        max_steps=_int(synth, "max_steps", "environment.synthetic.", max_steps),
    )


def _embedding_dim(cfg: RunConfig) -> int:
    default = 768 if cfg.embedding.get("backend", "mock") == "remote" else 64
    return _int(cfg.embedding, "dim", "embedding.", default)


def build_metric_config(cfg: RunConfig) -> MetricConfig:
    dim = _embedding_dim(cfg)
    emotion_spec = _section(cfg.metrics, "emotion", "metrics.")
    importance_spec = _section(cfg.metrics, "importance", "metrics.")
    if "path" in emotion_spec:
        emotion = EmotionScorer.from_json((cfg.base_dir / emotion_spec["path"]).read_text())
    else:
        emotion = EmotionScorer.init(
            dim=dim,
            hidden=_int(emotion_spec, "hidden", "metrics.emotion.", 16),
            seed=_int(emotion_spec, "seed", "metrics.emotion.", 3),
        )
    if "path" in importance_spec:
        importance = ImportanceScorer.from_json(
            (cfg.base_dir / importance_spec["path"]).read_text()
        )
    else:
        importance = ImportanceScorer.init(
            dim=dim,
            proj=_int(importance_spec, "proj", "metrics.importance.", 8),
            seed=_int(importance_spec, "seed", "metrics.importance.", 4),
        )
    return MetricConfig(emotion=emotion, importance=importance)


def build_gate(cfg: RunConfig, n_metrics: int) -> GateParams:
    spec = cfg.gate
    if "path" in spec:
        return GateParams.from_json((cfg.base_dir / spec["path"]).read_text())
    return GateParams.init(
        dim=_embedding_dim(cfg),
        n_metrics=n_metrics,
        hidden=_int(spec, "hidden", "gate.", DEFAULT_HIDDEN),
        seed=_int(spec, "seed", "gate.", 9),
        scale=_num(spec, "scale", "gate.", 0.1),
    )


def build_task_prompt(cfg: RunConfig) -> TaskPrompt:
    spec = cfg.task_prompt
    if "path" in spec:
        return TaskPrompt.from_json((cfg.base_dir / spec["path"]).read_text())
    prompt = TaskPrompt()
    if "base" in spec:
        prompt.base = _str(spec, "base", "task_prompt.")
    prompt.hints = [str(h) for h in spec.get("hints", [])]
    prompt.max_hints = _int(spec, "max_hints", "task_prompt.", prompt.max_hints)
    return prompt


def build_bundle(cfg: RunConfig, metric_config: MetricConfig) -> PolicyBundle:
    spec = cfg.utilization
    utilization = UtilizationPolicy(
        endpoint=build_endpoint(cfg, "utilization"),
        model_ref=_str(spec, "model_ref", "utilization.", "base"),
        beta=_num(spec, "beta", "utilization.", 0.5),
        word_cap=_int(spec, "word_cap", "utilization.", DEFAULT_WORD_CAP),
    )
    return PolicyBundle(
        gate=build_gate(cfg, metric_config.size),
        task_prompt=build_task_prompt(cfg),
        utilization=utilization,
    )


def build_policy(cfg: RunConfig, bundle: PolicyBundle, metric_config: MetricConfig, embedder):
    """The configured memory policy: the trainable cycle or a baseline."""
    spec = cfg.memory_policy
    kind = spec.get("kind", "cycle")
    if kind == "cycle":
        return MemoryCyclePolicy(
            gate=bundle.gate,
            metric_config=metric_config,
            embedder=embedder,
            extraction_endpoint=build_endpoint(cfg, "extraction"),
            task_prompt=bundle.task_prompt,
            utilization=bundle.utilization,
            top_k=_int(spec, "top_k", "memory_policy.", DEFAULT_TOP_K),
            cache_capacity=_int(spec, "cache_capacity", "memory_policy.", DEFAULT_CACHE_CAPACITY),
        )
    kwargs: dict[str, Any] = {
        "word_cap": _int(spec, "word_cap", "memory_policy.", DEFAULT_WORD_CAP)
    }
    if kind == "short-term":
        kwargs["window"] = _int(spec, "window", "memory_policy.", 3)
    if kind == "long-term":
        kwargs["top_k"] = _int(spec, "top_k", "memory_policy.", DEFAULT_TOP_K)
    if kind == "fixed-weight":
        kwargs["top_k"] = _int(spec, "top_k", "memory_policy.", DEFAULT_TOP_K)
        alpha = spec.get("alpha", [1.0, 0.0, 0.0])
        kwargs["alpha"] = tuple(float(a) for a in alpha)
        if float(alpha[1]) != 0.0:
            kwargs["metric_config"] = metric_config
    return baseline_memory(kind, embedder, **kwargs)


def build_runtime(cfg: RunConfig) -> tuple[AgentRuntime, PolicyBundle]:
    """Wire the full training runtime described by the config."""
    embedder = build_embedder(cfg)
    metric_config = build_metric_config(cfg)
    corpus, tasks = build_world(cfg)
    bundle = build_bundle(cfg, metric_config)
    spec = cfg.memory_policy
    runtime = AgentRuntime(
        chat_endpoint=build_endpoint(cfg, "chat"),
        extraction_endpoint=build_endpoint(cfg, "extraction"),
        embedder=embedder,
        metric_config=metric_config,
        corpus=corpus,
        tasks=tasks,
        top_k=_int(spec, "top_k", "memory_policy.", DEFAULT_TOP_K),
        cache_capacity=_int(spec, "cache_capacity", "memory_policy.", DEFAULT_CACHE_CAPACITY),
        reflection_endpoint=build_endpoint(cfg, "reflection"),
        expert_endpoint=build_endpoint(cfg, "expert"),
    )
    return runtime, bundle
