"""Memory utilization: iterative LLM merging with an adaptive stop signal.

Ranked memories are merged into a single context one at a time. After each
merge the word-count growth is compared with the previous growth to estimate
how much information the merge added; the loop stops early, with one
exemption, once gains die out. The module also builds the supervised and
preference datasets used to tune the merge model, and the loss functions
evaluated over externally produced logprob traces.
"""

from __future__ import annotations

import json
import shlex
import subprocess
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from memcycle.core import MemoryUnit, TrajectoryRecord, truncate_words, word_count
from memcycle.endpoints import EndpointError

MERGE_TEMPLATE = (
    "Observation: {observation}\n"
    "Existing Memory: {memory_context}\n"
    "New Memory: {new_memory}\n"
    "Please merge the above new memory into the existing memory, which is useful to"
    " response the observation.\n"
    "You should remove the duplicated information to make it concise, but do not lose"
    " any information.\n"
    "You should just output the final memory after merge, without any other information."
)

DEFAULT_WORD_CAP = 8096


@dataclass
class UtilizationPolicy:
    """The merge model: an endpoint, its identity, and the prompt template.

    ``model_ref`` names the weights the endpoint serves; fine-tuning swaps
    it for the tuned reference while the wiring stays the same. ``beta``
    is the preference-loss temperature attached to exported datasets.
    """

    endpoint: object  # anything with .chat(messages) -> ChatResult
    model_ref: str = "base"
    beta: float = 0.1
    template: str = MERGE_TEMPLATE
    word_cap: int = DEFAULT_WORD_CAP

    def render(self, existing: str, new_memory: str, observation: str) -> str:
        return self.template.format(
            observation=observation, memory_context=existing, new_memory=new_memory
        )

    def merge(self, existing: str, new_memory: str, observation: str) -> str:
        prompt = self.render(existing, new_memory, observation)
        return self.endpoint.chat([{"role": "user", "content": prompt}]).text


def info_gain(delta_now: int, delta_prev: int) -> float:
    """Relative information gain of the latest merge, clipped to [0, 1].

    Growth ratios: no growth after no growth is 0 (nothing new twice),
    any growth after none counts as full gain.
    """
    if delta_now < 0 or delta_prev < 0:
        raise ValueError("word deltas must be non-negative")
    if delta_prev == 0:
        return 0.0 if delta_now == 0 else 1.0
    return float(min(max(delta_now / delta_prev, 0.0), 1.0))


def stop_prob(gain_now: float, gain_prev: float) -> float:
    """Probability of halting: high only when the last *two* gains are low.

    Taking the max over the two most recent gains grants one exemption —
    a single unproductive merge never forces a stop by itself.
    """
    for g in (gain_now, gain_prev):
        if not 0.0 <= g <= 1.0:
            raise ValueError(f"gains must lie in [0, 1], got {g}")
    return 1.0 - max(gain_now, gain_prev)


@dataclass
class AggregationTrace:
    """Everything observed while building one memory context."""

    contexts: list[str]  # intermediate contexts, initial empty string first
    word_deltas: list[int]  # growth per merge
    gains: list[float]  # info gain per merge (first merge counts as full)
    stop_probs: list[float]  # halting probability drawn at each merge after the first
    stop_step: int  # merges performed


def aggregate(
    policy: UtilizationPolicy,
    units: Sequence[MemoryUnit],
    state_text: str,
    rng: np.random.Generator,
    max_iters: int | None = None,
) -> tuple[str, AggregationTrace]:
    """Merge ranked memories into one context until the stop signal fires.

    ``units`` must be non-empty and in rank order (best first). The first
    merge always happens; from the second on, a stop decision is drawn
    after each merge. The returned context is capped at the policy's word
    limit; the trace keeps the uncapped intermediates.
    """
    if not units:
        raise ValueError("aggregate needs at least one ranked memory")
    limit = len(units) if max_iters is None else min(max_iters, len(units))
    context = ""
    contexts = [context]
    deltas: list[int] = []
    gains: list[float] = []
    probs: list[float] = []
    for i in range(1, limit + 1):
        merged = policy.merge(context, units[i - 1].text, state_text)
        delta = max(word_count(merged) - word_count(context), 0)
        deltas.append(delta)
        context = merged
        contexts.append(context)
        if i == 1:
            # the opening merge always proceeds and counts as a full gain
            # when it grew the context at all
            gains.append(1.0 if delta > 0 else 0.0)
            continue
        gain = info_gain(delta, deltas[i - 2])
        gains.append(gain)
        prob = stop_prob(gain, gains[i - 2])
        probs.append(prob)
        if rng.random() < prob:
            break
    final = truncate_words(context, policy.word_cap)
    return final, AggregationTrace(
        contexts=contexts,
        word_deltas=deltas,
        gains=gains,
        stop_probs=probs,
        stop_step=len(deltas),
    )


# -- dataset construction --------------------------------------------------


@dataclass
class SftRecord:
    prompt: str
    target: str
    existing: str
    new_memory: str
    observation: str


@dataclass
class DpoRecord:
    prompt: str
    chosen: str
    rejected: str


def _final_interaction(
    record: TrajectoryRecord, policy: UtilizationPolicy
) -> tuple[str, str, str] | None:
    """Rebuild (existing context, last merged memory, state) for the last step.

    Merges are deterministic given the endpoint, so folding the recorded
    rank prefix reproduces the intermediate contexts without having stored
    them.
    """
    trajectory = record.trajectory
    if not trajectory.steps:
        return None
    final = trajectory.steps[-1]
    merges = len(final.word_deltas)
    if merges == 0:
        return None
    units = record.store.subset(final.ranked_ids[:merges])
    existing = ""
    for unit in units[:-1]:
        existing = policy.merge(existing, unit.text, final.state_text)
    return existing, units[-1].text, final.state_text


def build_sft_dataset(
    records: Sequence[TrajectoryRecord],
    expert_endpoint,
    policy: UtilizationPolicy,
) -> tuple[list[SftRecord], int]:
    """One record per final-step merge, with the expert's output as target.

    Returns the dataset and the number of interactions skipped because the
    expert endpoint failed.
    """
    out: list[SftRecord] = []
    skipped = 0
    for record in records:
        parts = _final_interaction(record, policy)
        if parts is None:
            continue
        existing, new_memory, observation = parts
        prompt = policy.render(existing, new_memory, observation)
        try:
            target = expert_endpoint.chat([{"role": "user", "content": prompt}]).text
        except EndpointError:
            skipped += 1
            continue
        out.append(
            SftRecord(
                prompt=prompt,
                target=target,
                existing=existing,
                new_memory=new_memory,
                observation=observation,
            )
        )
    return out, skipped


def build_dpo_dataset(
    records: Sequence[TrajectoryRecord],
    sft_endpoint,
    policy: UtilizationPolicy,
) -> tuple[list[DpoRecord], int]:
    """Preference pairs: tuned regeneration (chosen) vs the original merge.

    Pairs whose two sides are identical carry no signal and are dropped;
    the second return value counts drops from both identity and endpoint
    failure.
    """
    out: list[DpoRecord] = []
    dropped = 0
    for record in records:
        parts = _final_interaction(record, policy)
        if parts is None:
            continue
        existing, new_memory, observation = parts
        prompt = policy.render(existing, new_memory, observation)
        rejected = policy.merge(existing, new_memory, observation)
        try:
            chosen = sft_endpoint.chat([{"role": "user", "content": prompt}]).text
        except EndpointError:
            dropped += 1
            continue
        if chosen == rejected:
            dropped += 1
            continue
        out.append(DpoRecord(prompt=prompt, chosen=chosen, rejected=rejected))
    return out, dropped


def sft_to_jsonl(records: Sequence[SftRecord]) -> bytes:
    lines = [
        json.dumps({"prompt": r.prompt, "target": r.target}, sort_keys=True)
        for r in records
    ]
    return ("\n".join(lines) + "\n").encode("utf-8") if lines else b""


def dpo_to_jsonl(records: Sequence[DpoRecord]) -> bytes:
    lines = [
        json.dumps(
            {"prompt": r.prompt, "chosen": r.chosen, "rejected": r.rejected},
            sort_keys=True,
        )
        for r in records
    ]
    return ("\n".join(lines) + "\n").encode("utf-8") if lines else b""


# -- losses over externally produced logprob traces ------------------------


def sft_loss(token_logprob_traces: Sequence[Sequence[float]]) -> float:
    """Mean negative token logprob, averaged per record then over records."""
    if not token_logprob_traces:
        raise ValueError("sft_loss needs at least one trace")
    per_record = []
    for trace in token_logprob_traces:
        if len(trace) == 0:
            raise ValueError("sft_loss traces must be non-empty")
        per_record.append(-float(np.mean(trace)))
    return float(np.mean(per_record))


@dataclass
class DpoLogprobs:
    """Summed sequence logprobs from the policy and reference models."""

    chosen_policy: float
    chosen_reference: float
    rejected_policy: float
    rejected_reference: float


def dpo_loss(traces: Sequence[DpoLogprobs], beta: float) -> float:
    """Preference loss over logprob traces.

    Per pair: -log sigmoid(beta * ((chosen policy - chosen reference) -
    (rejected policy - rejected reference))), averaged over pairs.
    """
    if not traces:
        raise ValueError("dpo_loss needs at least one trace")
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    margins = np.array(
        [
            beta
            * (
                (t.chosen_policy - t.chosen_reference)
                - (t.rejected_policy - t.rejected_reference)
            )
            for t in traces
        ]
    )
    return float(np.mean(np.logaddexp(0.0, -margins)))


# -- external fine-tune hook ------------------------------------------------


@dataclass
class FineTuneHook:
    """Optional shell command that fine-tunes the merge model out of process.

    The command receives the dataset path and current model ref through
    ``{dataset}`` / ``{model}`` placeholders and must print the new model
    ref on its last stdout line. Without a command the hook is a no-op
    that returns the current ref, which keeps offline runs self-contained.
    """

    command: str | None = None
    timeout: float = 600.0
    runs: list[str] = field(default_factory=list)

    def run(self, dataset_path: str, model_ref: str) -> str:
        if self.command is None:
            return model_ref
        rendered = self.command.format(dataset=dataset_path, model=model_ref)
        self.runs.append(rendered)
        result = subprocess.run(
            shlex.split(rendered),
            capture_output=True,
            text=True,
            timeout=self.timeout,
            check=True,
        )
        lines = [line for line in result.stdout.splitlines() if line.strip()]
        return lines[-1].strip() if lines else model_ref
