"""Deterministic synthetic worlds and datasets for offline training runs.

Three families live here:

* a two-hop QA world plus a rule-based chat responder, built so the quality
  of memory ranking causally decides success (useful facts must reach the
  top of the retrieved context or the responder cannot chain the hops);
* generators of ranking problems whose true order is governed by a single
  chosen metric, for measuring how well a trained gate recovers it;
* small separable datasets for pre-training the emotion and importance
  scorers without any model in the loop.

Everything is a pure function of its seed.
"""

from __future__ import annotations

import hashlib
import re

import numpy as np

from .core import MemoryUnit
from .environment import Corpus, QaTask
from .gate import RetrievalSample, compile_sample, gate_forward
from .metrics import EMOTION_DIMS, MetricConfig, query_features
from .pretrain import EmotionSample, ImportanceChain, kendall_tau

# -- the two-hop world --------------------------------------------------------

_SUBJECT_STEMS = ("alpha", "delta", "omega", "sigma", "kappa", "lambda")
_PARTNER_STEMS = ("bravo", "corda", "ferro", "lunar", "mirza", "tavor")
_ANSWER_STEMS = ("copper", "basalt", "cobalt", "garnet", "indigo", "saffron")

QUESTION_FORM = "Find the specialty of the partner of {x}"
PARTNER_FACT = "{x} partner is {y}"
SPECIALTY_FACT = "{y} specialty is {z}"


def two_hop_world(n_tasks: int, seed: int = 0, max_steps: int = 5) -> tuple[Corpus, list[QaTask]]:
    """A corpus of linked entity pairs and the questions that chain them.

    Each task needs two searches: the subject's page names a partner, the
    partner's page names the specialty that answers the question. Entity
    names are single tokens so surface overlap drives embedding relevance.
    """
    if n_tasks < 1:
        raise ValueError(f"n_tasks must be >= 1, got {n_tasks}")
    corpus = Corpus()
    tasks = []
    for i in range(n_tasks):
        x = f"{_SUBJECT_STEMS[i % len(_SUBJECT_STEMS)]}{seed}n{i}"
        y = f"{_PARTNER_STEMS[i % len(_PARTNER_STEMS)]}{seed}n{i}"
        z = f"{_ANSWER_STEMS[i % len(_ANSWER_STEMS)]}{seed}n{i}"
        corpus.add(x, PARTNER_FACT.format(x=x, y=y))
        corpus.add(y, SPECIALTY_FACT.format(y=y, z=z))
        tasks.append(
            QaTask(QUESTION_FORM.format(x=x), gold_answer=z, max_steps=max_steps)
        )
    return corpus, tasks


# -- the rule-based responder ---------------------------------------------------

_MERGE_MARKER = "Please merge the above new memory into the existing memory"
_EXTRACT_MARKER = "please extract critical informative points"
_THINK_MARKER = "Please think step by step to analyze how to choose the next action"
_ACT_MARKER = "Your output must follow one of the following two formats"
_REFLECT_MARKERS = ("episodes succeeded", "episodes failed")

_QUESTION_RE = re.compile(r"the partner of (\w+)")
_PARTNER_RE = re.compile(r"(\w+) partner is (\w+)")
_SPECIALTY_RE = re.compile(r"(\w+) specialty is (\w+)")
_OBSERVATION_RE = re.compile(r"^Observation: (.*)$", re.MULTILINE)
_EXISTING_RE = re.compile(r"^Existing Memory: (.*)$", re.MULTILINE)
_NEW_RE = re.compile(r"^New Memory: (.*)$", re.MULTILINE)

_ITEM_SEP = "; "
THINK_TEXT = "I will review the knowledge{subject} in my memory and pick the next action."
POSITIVE_HINT = "keep statements that link an entity to its partner or specialty"
NEGATIVE_HINT = "drop chatter that names no entity relationship"


_ENTITY_RE = re.compile(r"[a-z]+\d+n\d+")


def _is_fact(text: str) -> bool:
    return bool(_PARTNER_RE.fullmatch(text) or _SPECIALTY_RE.fullmatch(text))


def _junk(text: str) -> str:
    """Neutralized note: unique tag plus whatever entities the text named.

    Echoing the entities keeps junk embedding-similar to the states that
    mention the same entities, so plain relevance alone does not hand the
    facts a free win — the gate has to learn to rely on it sharply.
    """
    tag = hashlib.blake2b(text.encode("utf-8"), digest_size=4).hexdigest()
    entities = " ".join(dict.fromkeys(_ENTITY_RE.findall(text)))
    return f"noted item {tag} {entities}".rstrip()


def union_merge(existing: str, new: str) -> str:
    """Order-preserving union of ``"; "``-separated items."""
    merged: list[str] = []
    for part in existing.split(_ITEM_SEP) + new.split(_ITEM_SEP):
        part = part.strip()
        if part and part not in merged:
            merged.append(part)
    return _ITEM_SEP.join(merged)


class TwoHopResponder:
    """Scripted stand-in for every model call in the two-hop world.

    The reply is a pure function of the prompt: merges take set unions,
    extraction canonicalizes facts and neutralizes everything else, the
    act rule chains whatever facts made it into the memory context, and
    reflection returns fixed hints. Because the act rule sees only the
    memory context, retrieval quality is the single lever on success.
    """

    def __call__(self, prompt: str, index: int) -> str:
        if _MERGE_MARKER in prompt:
            return self._merge(prompt)
        if _EXTRACT_MARKER in prompt:
            return self._extract(prompt)
        if _ACT_MARKER in prompt:
            return self._act(prompt)
        if _THINK_MARKER in prompt:
            question = _QUESTION_RE.search(prompt)
            subject = "" if question is None else f" about {question.group(1)}"
            return THINK_TEXT.format(subject=subject)
        if _REFLECT_MARKERS[0] in prompt:
            return POSITIVE_HINT
        if _REFLECT_MARKERS[1] in prompt:
            return NEGATIVE_HINT
        raise ValueError("unrecognized prompt shape for the two-hop responder")

    @staticmethod
    def _merge(prompt: str) -> str:
        existing = _EXISTING_RE.search(prompt).group(1)
        new = _NEW_RE.search(prompt).group(1)
        return union_merge(existing, new)

    @staticmethod
    def _extract(prompt: str) -> str:
        observation = _OBSERVATION_RE.search(prompt).group(1)
        return observation if _is_fact(observation) else _junk(observation)

    @staticmethod
    def _act(prompt: str) -> str:
        question = _QUESTION_RE.search(prompt)
        if question is None:
            return "Finish[unknown]"
        x = question.group(1)
        context = prompt.rsplit("memory as follows:\n", 1)[-1]
        partners = {a: b for a, b in _PARTNER_RE.findall(context)}
        specialties = {a: b for a, b in _SPECIALTY_RE.findall(context)}
        partner = partners.get(x)
        if partner is not None and partner in specialties:
            return f"Finish[{specialties[partner]}]"
        if partner is not None:
            return f"Search[{partner}]"
        return f"Search[{x}]"


# -- metric-governed ranking problems -------------------------------------------


def ranking_samples(
    cfg: MetricConfig,
    governing: str,
    n_samples: int,
    *,
    dim: int,
    t: int = 10,
    seed: int = 0,
) -> list[RetrievalSample]:
    """Retrieval samples whose memory order is the governing metric's order.

    The governing metric gets a small but strictly ordered spread within each
    sample while the other metric families vary at full scale, so a uniform
    mixture cannot read the order off the combined score, yet a gate that
    concentrates its weight on the governing metric recovers it exactly.
    Training on these samples should therefore pull the gate toward the
    single metric that explains every ranking.
    """
    names = cfg.names()
    if governing not in names:
        raise ValueError(f"governing metric {governing!r} not in {names}")
    column = names.index(governing)
    rng = np.random.Generator(np.random.PCG64(seed))
    samples = []
    for _ in range(n_samples):
        step_now = int(rng.integers(200, 261))
        qvec = rng.standard_normal(dim)
        qvec /= np.linalg.norm(qvec)
        if governing.startswith("recency"):
            # Distinct ages inside a narrow middle band: tiny recency spread.
            lo, hi = int(0.35 * step_now), int(0.50 * step_now)
            steps = rng.choice(np.arange(lo, hi), size=t, replace=False)
        else:
            steps = rng.integers(0, step_now + 1, size=t)
        if governing == "relevance":
            # Tightly banded cosines against the query: tiny relevance spread.
            cosines = 0.2 + 0.2 * rng.permutation(t) / max(t - 1, 1)
        else:
            cosines = None
        units = []
        for i in range(t):
            v = rng.standard_normal(dim)
            v /= np.linalg.norm(v)
            if cosines is not None:
                v = v - (v @ qvec) * qvec
                v /= np.linalg.norm(v)
                v = cosines[i] * qvec + np.sqrt(1.0 - cosines[i] ** 2) * v
            units.append(
                MemoryUnit(text=f"unit {i}", embedding=v, step=int(steps[i]), id=i)
            )
        query = query_features(cfg, qvec, step_now)
        probe = compile_sample(cfg, query, units)
        order = np.argsort(-probe.metrics[:, column], kind="stable")
        samples.append(compile_sample(cfg, query, [units[j] for j in order]))
    return samples


def sample_tau(params, sample: RetrievalSample) -> float:
    """Rank agreement between the gate's scores and the sample's true order."""
    scores = [
        float(gate_forward(params, sample.state, emb) @ d)
        for emb, d in zip(sample.memories, sample.metrics)
    ]
    true_order = list(range(len(scores)))[::-1]  # best first in the sample
    return kendall_tau(scores, true_order)


def mean_tau(params, samples: list[RetrievalSample]) -> float:
    return float(np.mean([sample_tau(params, s) for s in samples]))


# -- separable scorer pre-training data ------------------------------------------


def emotion_keyword_samples(n: int, seed: int = 0) -> list[EmotionSample]:
    """Labels are decodable from the text: active emotion names appear as tokens."""
    rng = np.random.Generator(np.random.PCG64(seed))
    samples = []
    for _ in range(n):
        count = int(rng.integers(1, 4))
        chosen = rng.choice(len(EMOTION_DIMS), size=count, replace=False)
        label = np.zeros(len(EMOTION_DIMS))
        label[chosen] = 1.0
        words = [EMOTION_DIMS[j] for j in sorted(chosen)]
        filler = [f"filler{int(rng.integers(0, 5))}"]
        samples.append(EmotionSample(text=" ".join(words + filler), label=label))
    return samples


def enrichment_chains(n_chains: int, length: int = 5, seed: int = 0) -> list[ImportanceChain]:
    """Chains over a shared token pool, so fresh chains recombine known tokens.

    Each sentence extends the previous with one more detail token; the
    query is the fully enriched sentence, making later sentences strictly
    better matches.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    topics = [f"topic{i}" for i in range(6)]
    details = [f"detail{i}" for i in range(12)]
    if length - 1 > len(details):
        raise ValueError(f"chain length {length} exceeds the detail pool")
    chains = []
    for _ in range(n_chains):
        topic = topics[int(rng.integers(0, len(topics)))]
        picks = rng.choice(len(details), size=length - 1, replace=False)
        sentences = [f"{topic} base"]
        for j in picks:
            sentences.append(sentences[-1] + " " + details[int(j)])
        chains.append(ImportanceChain(query=sentences[-1], sentences=sentences))
    return chains
