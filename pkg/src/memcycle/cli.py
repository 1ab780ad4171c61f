"""Command-line interface: every pipeline behind one ``memcycle`` entry point.

Subcommands read a JSON run config, execute one pipeline, and write their
artifacts under the configured output directory. Artifacts contain no
timestamps or machine identifiers, so identical configs and seeds give
byte-identical outputs; wall-clock timings are opt-in and land in a
separate file.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from .agent import ReactAgent, run_trajectory
from .config import (
    ConfigError,
    RunConfig,
    apply_overrides,
    build_embedder,
    build_metric_config,
    build_policy,
    build_runtime,
)
from .core import read_records, write_records
from .endpoints import EndpointError, ScriptError
from .environment import mean_steps
from .metrics import MetricConfig, EmotionScorer, ImportanceScorer
from .optimize import (
    StageError,
    _epoch_seed,
    _metrics_row,
    filter_successful,
    metrics_to_csv,
    off_policy_optimize,
    on_policy_optimize,
)
from .pretrain import (
    build_importance_triples,
    emotion_loss,
    eval_emotion_methods,
    eval_importance_methods,
    mse,
    pair_accuracy,
    train_emotion_scorer,
    train_importance_scorer,
)
from .synthetic import emotion_keyword_samples, enrichment_chains
from .utilization import build_dpo_dataset, build_sft_dataset, dpo_to_jsonl, sft_to_jsonl

import numpy as np


def _json_bytes(data: dict) -> bytes:
    return (json.dumps(data, sort_keys=True, indent=2) + "\n").encode("utf-8")


def _load_config(args: argparse.Namespace) -> RunConfig:
    path = Path(args.config)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError("<file>", f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"config file is not valid JSON: {exc}") from None
    data = apply_overrides(data, args.set or [])
    if args.seed is not None:
        data["seed"] = args.seed
    if args.outdir is not None:
        data["outdir"] = args.outdir
    return RunConfig.from_dict(data, base_dir=path.parent)


def _outdir(cfg: RunConfig) -> Path:
    out = Path(cfg.outdir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_trajectories(path: str) -> list:
    return read_records(Path(path).read_bytes())


def _cmd_run(cfg: RunConfig, args: argparse.Namespace) -> int:
    started = time.monotonic()
    runtime, bundle = build_runtime(cfg)
    policy = build_policy(cfg, bundle, runtime.metric_config, runtime.embedder)
    agent = ReactAgent(chat=runtime.chat_endpoint, policy=policy)
    episodes = args.episodes or cfg.optimization.sample_batch
    records = []
    for i in range(episodes):
        task = runtime.tasks[i % len(runtime.tasks)]
        records.append(
            run_trajectory(
                agent,
                task,
                runtime.corpus,
                trajectory_id=f"run-{i}",
                seed=_epoch_seed(cfg.seed, 0, i),
            )
        )
    out = _outdir(cfg)
    (out / "trajectories.jsonl").write_bytes(write_records(records))
    row = _metrics_row(0, bundle.version, records)
    (out / "run_metrics.csv").write_bytes(metrics_to_csv([row]))
    if args.timings:
        (out / "timings.json").write_bytes(
            _json_bytes({"command": "run", "seconds": time.monotonic() - started})
        )
    print(
        f"run: {len(records)} episodes, exact match {row['mean_reward']:.3f}, "
        f"mean steps {row['mean_steps']:.2f} -> {out / 'trajectories.jsonl'}"
    )
    return 0


def _cmd_train_off(cfg: RunConfig, args: argparse.Namespace) -> int:
    records = _read_trajectories(args.trajectories)
    runtime, bundle = build_runtime(cfg)
    out = _outdir(cfg)
    updated, report = off_policy_optimize(
        records, bundle, cfg.optimization, runtime, outdir=out
    )
    (out / "train_off_report.json").write_bytes(_json_bytes(report))
    print(
        f"train-off: bundle v{bundle.version} -> v{updated.version}, "
        f"{report['successes']} successful episodes -> {out / 'bundle_off'}"
    )
    return 0


def _cmd_train_on(cfg: RunConfig, args: argparse.Namespace) -> int:
    runtime, bundle = build_runtime(cfg)
    out = _outdir(cfg)
    final_bundle, rows = on_policy_optimize(
        bundle, cfg.optimization, runtime, outdir=out
    )
    final_bundle.save(out / "bundle_final")
    first, last = rows[0], rows[-1]
    print(
        f"train-on: {cfg.optimization.epochs} epochs, exact match "
        f"{first.get('mean_reward', float('nan')):.3f} -> {last['mean_reward']:.3f}, "
        f"mean steps {first.get('mean_steps', float('nan')):.2f} -> "
        f"{last['mean_steps']:.2f} -> {out / 'metrics.csv'}"
    )
    return 0


def _pretrain_params(cfg: RunConfig) -> dict:
    spec = cfg.pretrain
    return {
        "emotion_samples": spec.get("emotion_samples", 64),
        "emotion_lr": spec.get("emotion_lr", 0.1),
        "emotion_epochs": spec.get("emotion_epochs", 200),
        "chains": spec.get("chains", 10),
        "chain_length": spec.get("chain_length", 5),
        "importance_lr": spec.get("importance_lr", 0.3),
        "importance_epochs": spec.get("importance_epochs", 300),
        "seed": spec.get("seed", 6),
        "eval_chains": spec.get("eval_chains", 6),
        "eval_samples": spec.get("eval_samples", 32),
        "eval_seed": spec.get("eval_seed", 99),
    }


def _cmd_pretrain(cfg: RunConfig, args: argparse.Namespace) -> int:
    params = _pretrain_params(cfg)
    embedder = build_embedder(cfg)
    metric_config = build_metric_config(cfg)
    out = _outdir(cfg)

    samples = emotion_keyword_samples(params["emotion_samples"], seed=params["seed"])
    x = np.stack([embedder.embed(s.text) for s in samples])
    labels = np.stack([s.label for s in samples])
    untrained_mse = emotion_loss(metric_config.emotion, x, labels)
    emotion, _ = train_emotion_scorer(
        metric_config.emotion,
        samples,
        embedder,
        lr=params["emotion_lr"],
        epochs=params["emotion_epochs"],
    )
    trained_mse = emotion_loss(emotion, x, labels)

    chains = enrichment_chains(
        params["chains"], length=params["chain_length"], seed=params["seed"]
    )
    triples = build_importance_triples(chains)
    importance, _ = train_importance_scorer(
        metric_config.importance,
        triples,
        embedder,
        lr=params["importance_lr"],
        epochs=params["importance_epochs"],
    )
    held_out = enrichment_chains(
        params["eval_chains"], length=params["chain_length"], seed=params["eval_seed"]
    )
    held_accuracy = pair_accuracy(importance, build_importance_triples(held_out), embedder)

    (out / "emotion_scorer.json").write_text(emotion.to_json())
    (out / "importance_scorer.json").write_text(importance.to_json())
    report = {
        "emotion_mse_untrained": untrained_mse,
        "emotion_mse_trained": trained_mse,
        "importance_pair_accuracy_train": pair_accuracy(importance, triples, embedder),
        "importance_pair_accuracy_held_out": held_accuracy,
        "params": params,
    }
    (out / "pretrain_report.json").write_bytes(_json_bytes(report))
    print(
        f"pretrain-scorers: emotion error {untrained_mse:.3f} -> {trained_mse:.3f}, "
        f"held-out importance pair accuracy {held_accuracy:.3f} -> {out}"
    )
    return 0


def _cmd_eval_scorers(cfg: RunConfig, args: argparse.Namespace) -> int:
    params = _pretrain_params(cfg)
    embedder = build_embedder(cfg)
    if args.scorers:
        scorer_dir = Path(args.scorers)
        metric_config = MetricConfig(
            emotion=EmotionScorer.from_json((scorer_dir / "emotion_scorer.json").read_text()),
            importance=ImportanceScorer.from_json(
                (scorer_dir / "importance_scorer.json").read_text()
            ),
        )
    else:
        metric_config = build_metric_config(cfg)
    samples = emotion_keyword_samples(params["eval_samples"], seed=params["eval_seed"])
    chains = enrichment_chains(
        params["eval_chains"], length=params["chain_length"], seed=params["eval_seed"]
    )
    emotion_rows = eval_emotion_methods(
        samples, metric_config.emotion, {}, embedder, seed=cfg.seed
    )
    importance_rows = eval_importance_methods(
        chains, metric_config.importance, {}, embedder, seed=cfg.seed
    )
    lines = ["scorer,method,mse,ndcg,ifr"]
    for row in emotion_rows:
        lines.append(f"emotion,{row['method']},{row['mse']:.6f},,{row['ifr']:.6f}")
    for row in importance_rows:
        lines.append(f"importance,{row['method']},,{row['ndcg']:.6f},{row['ifr']:.6f}")
    out = _outdir(cfg)
    (out / "scorer_eval.csv").write_bytes(("\n".join(lines) + "\n").encode("utf-8"))
    print(f"eval-scorers: {len(emotion_rows) + len(importance_rows)} rows -> "
          f"{out / 'scorer_eval.csv'}")
    return 0


def _cmd_export(cfg: RunConfig, args: argparse.Namespace) -> int:
    records = _read_trajectories(args.trajectories)
    runtime, bundle = build_runtime(cfg)
    successes = filter_successful(records, cfg.optimization.success_threshold)
    expert = runtime.expert(bundle)
    sft_records, sft_skipped = build_sft_dataset(successes, expert, bundle.utilization)
    dpo_records, dpo_dropped = build_dpo_dataset(successes, expert, bundle.utilization)
    out = _outdir(cfg)
    (out / "sft.jsonl").write_bytes(sft_to_jsonl(sft_records))
    (out / "dpo.jsonl").write_bytes(dpo_to_jsonl(dpo_records))
    report = {
        "episodes": len(records),
        "successes": len(successes),
        "sft_records": len(sft_records),
        "sft_skipped": sft_skipped,
        "dpo_records": len(dpo_records),
        "dpo_dropped": dpo_dropped,
    }
    (out / "export_report.json").write_bytes(_json_bytes(report))
    print(
        f"export-datasets: {len(sft_records)} SFT / {len(dpo_records)} DPO records -> {out}"
    )
    return 0


def _cmd_report(cfg: RunConfig, args: argparse.Namespace) -> int:
    source = args.trajectories or str(Path(cfg.outdir) / "trajectories.jsonl")
    records = _read_trajectories(source)
    if not records:
        raise ValueError(f"no trajectories in {source}")
    trajectories = [r.trajectory for r in records]
    steps = sorted(len(t.steps) for t in trajectories)
    stats = {
        "n_trajectories": float(len(trajectories)),
        "exact_match": sum(t.reward for t in trajectories) / len(trajectories),
        "mean_steps": mean_steps(trajectories),
        "min_steps": float(steps[0]),
        "median_steps": float(steps[len(steps) // 2]),
        "max_steps": float(steps[-1]),
    }
    lines = ["metric,value"]
    lines.extend(f"{key},{value:.6f}" for key, value in stats.items())
    out = _outdir(cfg)
    (out / "report.csv").write_bytes(("\n".join(lines) + "\n").encode("utf-8"))
    print(
        f"report: exact match {stats['exact_match']:.3f}, mean steps "
        f"{stats['mean_steps']:.2f} over {len(trajectories)} episodes -> "
        f"{out / 'report.csv'}"
    )
    return 0


_COMMANDS = {
    "run": (_cmd_run, "Sample trajectories with the configured memory policy"),
    "train-off": (_cmd_train_off, "One optimization pass over a fixed trajectory log"),
    "train-on": (_cmd_train_on, "Alternate sampling and optimization for several epochs"),
    "pretrain-scorers": (_cmd_pretrain, "Train the emotion and importance scorers"),
    "eval-scorers": (_cmd_eval_scorers, "Score the configured scorers against baselines"),
    "export-datasets": (_cmd_export, "Build SFT and DPO datasets from a trajectory log"),
    "report": (_cmd_report, "Summarize a trajectory log as CSV"),
}


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="memcycle", description="Trainable agent-memory engine"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in _COMMANDS.items():
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", required=True, help="path to a JSON run config")
        cmd.add_argument(
            "--set",
            action="append",
            metavar="KEY=VALUE",
            help="override a config key (dotted path, JSON value); repeatable",
        )
        cmd.add_argument("--seed", type=int, default=None, help="override the run seed")
        cmd.add_argument("--outdir", default=None, help="override the output directory")
        if name == "run":
            cmd.add_argument(
                "--episodes",
                type=_positive_int,
                default=None,
                help="episode count (default: sample_batch)",
            )
            cmd.add_argument(
                "--timings", action="store_true", help="also write wall-clock timings"
            )
        if name in ("train-off", "export-datasets"):
            cmd.add_argument(
                "--trajectories", required=True, help="path to a trajectory JSONL log"
            )
        if name == "report":
            cmd.add_argument(
                "--trajectories",
                default=None,
                help="trajectory log to summarize (default: <outdir>/trajectories.jsonl)",
            )
        if name == "eval-scorers":
            cmd.add_argument(
                "--scorers",
                default=None,
                help="directory holding emotion_scorer.json / importance_scorer.json",
            )
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    handler, _ = _COMMANDS[args.command]
    try:
        cfg = _load_config(args)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    try:
        return handler(cfg, args)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        return 1
    except (EndpointError, ScriptError, OSError, ValueError) as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
