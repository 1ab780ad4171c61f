"""Optimization drivers: the off-policy pipeline and the on-policy loop.

Both drivers update the same three policy pieces — the retrieval gate, the
merge model reference (through an external fine-tune hook), and the task
prompt's hint list — but differ in where trajectories come from: a fixed
log versus fresh sampling with the current policy each epoch.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, replace
from pathlib import Path

from .agent import MemoryCyclePolicy, ReactAgent, run_trajectory
from .core import TrajectoryRecord, write_records
from .environment import Corpus, QaTask, mean_steps
from .gate import GateParams, RetrievalSample, compile_sample, train_gate
from .metrics import MetricConfig, query_features
from .storage import TaskPrompt, partition_records, reflect, update_task_prompt
from .utilization import (
    FineTuneHook,
    UtilizationPolicy,
    build_dpo_dataset,
    build_sft_dataset,
    dpo_to_jsonl,
    sft_to_jsonl,
)


@dataclass
class OptimizationConfig:
    """Hyperparameters shared by the two drivers.

    ``gate_steps`` is how many gradient steps each gate update takes; the
    single-update-per-round shape of the loop is unchanged by taking more
    than one inner step.
    """

    success_threshold: float = 0.5
    partition_threshold: float = 0.5
    pair_decay: float = 0.5
    gate_lr: float = 0.5
    gate_steps: int = 1
    sft_lr: float = 1e-4
    sft_batch: int = 16
    dpo_lr: float = 1e-4
    dpo_batch: int = 16
    reflection_size: int = 40
    sample_batch: int = 30
    epochs: int = 5
    retrieval_depth: int | None = None  # cap on ranked list length per sample
    seed: int = 0

    def __post_init__(self):
        for name in ("success_threshold", "partition_threshold"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")
        if not 0.0 < self.pair_decay < 1.0:
            raise ValueError(f"pair_decay must be in (0, 1), got {self.pair_decay}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.sample_batch < 1:
            raise ValueError(f"sample_batch must be >= 1, got {self.sample_batch}")
        if self.gate_steps < 1:
            raise ValueError(f"gate_steps must be >= 1, got {self.gate_steps}")

    @classmethod
    def on_policy_defaults(cls, **overrides) -> OptimizationConfig:
        base = dict(sft_lr=5e-4, reflection_size=15)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return {
            "success_threshold": self.success_threshold,
            "partition_threshold": self.partition_threshold,
            "pair_decay": self.pair_decay,
            "gate_lr": self.gate_lr,
            "gate_steps": self.gate_steps,
            "sft_lr": self.sft_lr,
            "sft_batch": self.sft_batch,
            "dpo_lr": self.dpo_lr,
            "dpo_batch": self.dpo_batch,
            "reflection_size": self.reflection_size,
            "sample_batch": self.sample_batch,
            "epochs": self.epochs,
            "retrieval_depth": self.retrieval_depth,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> OptimizationConfig:
        return cls(**data)


@dataclass
class PolicyBundle:
    """The trainable policy state: gate, task prompt, merge model."""

    gate: GateParams
    task_prompt: TaskPrompt
    utilization: UtilizationPolicy
    version: int = 0

    def copy(self) -> PolicyBundle:
        return PolicyBundle(
            gate=self.gate.copy(),
            task_prompt=self.task_prompt.copy(),
            utilization=replace(self.utilization),
            version=self.version,
        )

    def save(self, directory: str | Path, stage: str = "complete") -> None:
        """Persist the bundle as one JSON file per piece plus a manifest."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "gate.json").write_text(self.gate.to_json())
        (directory / "task_prompt.json").write_text(self.task_prompt.to_json())
        (directory / "utilization.json").write_text(
            json.dumps(
                {
                    "model_ref": self.utilization.model_ref,
                    "beta": self.utilization.beta,
                    "template": self.utilization.template,
                    "word_cap": self.utilization.word_cap,
                },
                sort_keys=True,
            )
        )
        (directory / "manifest.json").write_text(
            json.dumps(
                {
                    "version": self.version,
                    "stage": stage,
                    "files": ["gate.json", "task_prompt.json", "utilization.json"],
                },
                sort_keys=True,
            )
        )

    @classmethod
    def load(cls, directory: str | Path, endpoint) -> PolicyBundle:
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        util = json.loads((directory / "utilization.json").read_text())
        return cls(
            gate=GateParams.from_json((directory / "gate.json").read_text()),
            task_prompt=TaskPrompt.from_json((directory / "task_prompt.json").read_text()),
            utilization=UtilizationPolicy(
                endpoint=endpoint,
                model_ref=util["model_ref"],
                beta=util["beta"],
                template=util["template"],
                word_cap=util["word_cap"],
            ),
            version=manifest["version"],
        )


class StageError(RuntimeError):
    """A pipeline stage failed; the partial bundle was already persisted."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"pipeline halted at stage {stage!r}: {cause}")
        self.stage = stage
        self.cause = cause


def filter_successful(
    records: list[TrajectoryRecord], threshold: float
) -> list[TrajectoryRecord]:
    """Keep episodes whose reward meets the threshold (boundary inclusive)."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    return [r for r in records if r.trajectory.reward >= threshold]


def build_retrieval_batch(
    records: list[TrajectoryRecord],
    cfg: MetricConfig,
    embedder,
    max_rank: int | None = None,
) -> list[RetrievalSample]:
    """Turn recorded rankings into contrastive training samples.

    Every step that ranked at least two memories contributes one sample
    whose memory order is the order the policy actually used. ``max_rank``
    optionally truncates long rankings to bound the pair count.
    """
    samples = []
    for record in records:
        for step in record.trajectory.steps:
            ids = step.ranked_ids if max_rank is None else step.ranked_ids[:max_rank]
            if len(ids) < 2:
                continue
            units = record.store.subset(ids)
            query = query_features(cfg, embedder.embed(step.state_text), step.step)
            samples.append(compile_sample(cfg, query, units))
    return samples


@dataclass
class AgentRuntime:
    """Everything needed to instantiate a fresh agent around a bundle."""

    chat_endpoint: object
    extraction_endpoint: object
    embedder: object
    metric_config: MetricConfig
    corpus: Corpus
    tasks: list[QaTask]
    top_k: int = 10
    cache_capacity: int = 5
    reflection_endpoint: object | None = None
    expert_endpoint: object | None = None

    def reflection(self):
        return self.reflection_endpoint or self.chat_endpoint

    def expert(self, bundle: PolicyBundle):
        return self.expert_endpoint or bundle.utilization.endpoint


def _write(path: Path | None, payload: bytes) -> None:
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(payload)


def _update_bundle(
    bundle: PolicyBundle,
    records: list[TrajectoryRecord],
    config: OptimizationConfig,
    runtime: AgentRuntime,
    sft_hook: FineTuneHook,
    dpo_hook: FineTuneHook,
    outdir: Path | None,
    tag: str,
    report: dict,
) -> PolicyBundle:
    """One full parameter update from a batch of episodes; inputs untouched.

    Stage order: gate, SFT, DPO, reflection. A stage failure persists the
    partial result and raises :class:`StageError` naming the stage.
    """
    updated = bundle.copy()
    stage = "retrieval"
    try:
        successes = filter_successful(records, config.success_threshold)
        report["successes"] = len(successes)
        batch = build_retrieval_batch(
            successes,
            runtime.metric_config,
            runtime.embedder,
            max_rank=config.retrieval_depth,
        )
        if batch:
            updated.gate, history = train_gate(
                updated.gate,
                batch,
                lr=config.gate_lr,
                steps=config.gate_steps,
                gamma=config.pair_decay,
            )
            report["gate_loss"] = [history[0], history[-1]]
        else:
            report["gate_loss"] = []
            report["warning"] = "no successful episodes; gate unchanged"

        stage = "sft"
        sft_records, sft_skipped = build_sft_dataset(
            successes, runtime.expert(updated), updated.utilization
        )
        report["sft_records"] = len(sft_records)
        report["sft_skipped"] = sft_skipped
        sft_path = None if outdir is None else outdir / f"sft_{tag}.jsonl"
        _write(sft_path, sft_to_jsonl(sft_records))
        if sft_path is not None:
            updated.utilization.model_ref = sft_hook.run(
                str(sft_path), updated.utilization.model_ref
            )

        stage = "dpo"
        dpo_records, dpo_dropped = build_dpo_dataset(
            successes, runtime.expert(updated), updated.utilization
        )
        report["dpo_records"] = len(dpo_records)
        report["dpo_dropped"] = dpo_dropped
        dpo_path = None if outdir is None else outdir / f"dpo_{tag}.jsonl"
        _write(dpo_path, dpo_to_jsonl(dpo_records))
        if dpo_path is not None and dpo_records:
            updated.utilization.model_ref = dpo_hook.run(
                str(dpo_path), updated.utilization.model_ref
            )

        stage = "reflection"
        positive, negative = partition_records(records, config.partition_threshold)
        pos_hints = reflect(
            runtime.reflection(), positive, "positive", sample_size=config.reflection_size
        )
        neg_hints = reflect(
            runtime.reflection(), negative, "negative", sample_size=config.reflection_size
        )
        updated.task_prompt = update_task_prompt(updated.task_prompt, pos_hints, neg_hints)
        report["new_hints"] = [
            h for h in updated.task_prompt.hints if h not in bundle.task_prompt.hints
        ]
    except Exception as exc:
        if outdir is not None:
            updated.version = bundle.version
            updated.save(outdir / f"bundle_{tag}", stage=f"failed:{stage}")
        raise StageError(stage, exc) from exc

    updated.version = bundle.version + 1
    if outdir is not None:
        updated.save(outdir / f"bundle_{tag}")
    return updated


def off_policy_optimize(
    records: list[TrajectoryRecord],
    bundle: PolicyBundle,
    config: OptimizationConfig,
    runtime: AgentRuntime,
    sft_hook: FineTuneHook | None = None,
    dpo_hook: FineTuneHook | None = None,
    outdir: str | Path | None = None,
) -> tuple[PolicyBundle, dict]:
    """One pass of every trainer over a fixed trajectory log."""
    if not records:
        raise ValueError("off-policy optimization needs a non-empty trajectory log")
    outdir = None if outdir is None else Path(outdir)
    report: dict = {"stage": "complete"}
    updated = _update_bundle(
        bundle,
        records,
        config,
        runtime,
        sft_hook or FineTuneHook(),
        dpo_hook or FineTuneHook(),
        outdir,
        tag="off",
        report=report,
    )
    return updated, report


def _epoch_seed(base: int, epoch: int, index: int) -> int:
    return (base * 1_000_003 + epoch * 10_007 + index) % (2**63)


def sample_epoch(
    bundle: PolicyBundle,
    runtime: AgentRuntime,
    config: OptimizationConfig,
    epoch: int,
) -> list[TrajectoryRecord]:
    """Run ``sample_batch`` episodes under the bundle, cycling the task set.

    The task list is fixed across epochs so per-epoch metrics are
    comparable; seeds derive from (config seed, epoch, index).
    """
    records = []
    for i in range(config.sample_batch):
        task = runtime.tasks[i % len(runtime.tasks)]
        policy = MemoryCyclePolicy(
            gate=bundle.gate,
            metric_config=runtime.metric_config,
            embedder=runtime.embedder,
            extraction_endpoint=runtime.extraction_endpoint,
            task_prompt=bundle.task_prompt,
            utilization=bundle.utilization,
            top_k=runtime.top_k,
            cache_capacity=runtime.cache_capacity,
        )
        agent = ReactAgent(chat=runtime.chat_endpoint, policy=policy)
        records.append(
            run_trajectory(
                agent,
                task,
                runtime.corpus,
                trajectory_id=f"epoch{epoch}-{i}",
                seed=_epoch_seed(config.seed, epoch, i),
            )
        )
    return records


def _metrics_row(epoch: int, version: int, records: list[TrajectoryRecord]) -> dict:
    trajectories = [r.trajectory for r in records]
    return {
        "epoch": epoch,
        "bundle_version": version,
        "n": len(records),
        "mean_reward": sum(t.reward for t in trajectories) / len(trajectories),
        "mean_steps": mean_steps(trajectories),
    }


def on_policy_optimize(
    bundle: PolicyBundle,
    config: OptimizationConfig,
    runtime: AgentRuntime,
    sft_hook: FineTuneHook | None = None,
    dpo_hook: FineTuneHook | None = None,
    outdir: str | Path | None = None,
) -> tuple[PolicyBundle, list[dict]]:
    """Alternate sampling and updating for ``config.epochs`` rounds.

    Row ``e`` of the returned metrics evaluates the bundle of version ``e``
    on the fixed task set: rows 0..L-1 come from each epoch's sampling pass
    (the sampling policy IS the newest policy — the on-policy property) and
    row L from a final evaluation pass. A failed epoch is discarded: its
    records are dropped and the previous bundle stays current.
    """
    outdir = None if outdir is None else Path(outdir)
    sft_hook = sft_hook or FineTuneHook()
    dpo_hook = dpo_hook or FineTuneHook()
    current = bundle.copy()
    rows: list[dict] = []
    for epoch in range(1, config.epochs + 1):
        try:
            records = sample_epoch(current, runtime, config, epoch)
            row = _metrics_row(epoch - 1, current.version, records)
            report: dict = {}
            updated = _update_bundle(
                current,
                records,
                config,
                runtime,
                sft_hook,
                dpo_hook,
                outdir,
                tag=f"epoch{epoch}",
                report=report,
            )
        except (StageError, RuntimeError, ValueError) as exc:
            rows.append(
                {"epoch": epoch - 1, "bundle_version": current.version, "discarded": str(exc)}
            )
            continue
        if outdir is not None:
            _write(outdir / f"trajectories_epoch{epoch}.jsonl", write_records(records))
        rows.append(row)
        current = updated
    final_records = sample_epoch(current, runtime, config, config.epochs + 1)
    if outdir is not None:
        _write(outdir / "trajectories_final.jsonl", write_records(final_records))
    rows.append(_metrics_row(config.epochs, current.version, final_records))
    if outdir is not None:
        _write(outdir / "metrics.csv", metrics_to_csv(rows))
    return current, rows


_CSV_FIELDS = ["epoch", "bundle_version", "n", "mean_reward", "mean_steps", "discarded"]


def metrics_to_csv(rows: list[dict]) -> bytes:
    """Stable CSV rendering of per-epoch metrics (floats at 6 places)."""
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=_CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        rendered = dict(row)
        for key in ("mean_reward", "mean_steps"):
            if key in rendered:
                rendered[key] = f"{rendered[key]:.6f}"
        writer.writerow({k: rendered.get(k, "") for k in _CSV_FIELDS})
    return buffer.getvalue().encode("utf-8")
