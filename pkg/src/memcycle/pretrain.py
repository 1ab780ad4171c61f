"""Pre-training for the emotion and importance scorers, plus evaluation metrics.

Datasets come from an LLM endpoint: emotion samples are rewrites of base
sentences toward sampled emotion combinations; importance data are chains of
increasingly enriched statements with a query, from which contrastive
triples are drawn within each chain. Both trainers use hand-derived
gradients and plain full-batch gradient descent.
"""

from __future__ import annotations

import json
import re
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from scipy.special import expit
from scipy.stats import kendalltau

from memcycle.endpoints import EndpointError
from memcycle.metrics import EMOTION_DIMS, EmotionScorer, ImportanceScorer

EMOTION_REWRITE_TEMPLATE = (
    "Rewrite the following sentence so that it clearly expresses these emotions:"
    " {emotions}.\nSentence: {base}\n"
    "Reply with the rewritten sentence only, without any other messages."
)

ENRICH_TEMPLATE = (
    "Add one concrete informative detail to the following statement, keeping all"
    " existing information.\nStatement: {statement}\n"
    "Reply with the full enriched statement only."
)

CHAIN_QUERY_TEMPLATE = (
    "Write a short question that the following statement answers.\n"
    "Statement: {statement}\nReply with the question only."
)


@dataclass
class EmotionSample:
    text: str
    label: np.ndarray  # (8,) target scores in [0, 1]


@dataclass
class ImportanceChain:
    query: str
    sentences: list[str]  # least enriched first


@dataclass
class ImportanceTriple:
    query: str
    positive: str  # the more enriched statement
    negative: str


def gen_emotion_dataset(
    endpoint,
    base_sentences: Sequence[str],
    n_samples: int,
    rng: np.random.Generator,
) -> tuple[list[EmotionSample], int]:
    """Sample emotion combinations and ask the endpoint for matching rewrites.

    Each label activates one to three of the eight emotions. Endpoint
    failures skip the sample; the failure count is returned for rate
    reporting.
    """
    if not base_sentences:
        raise ValueError("need at least one base sentence")
    samples: list[EmotionSample] = []
    failures = 0
    for i in range(n_samples):
        count = int(rng.integers(1, 4))
        chosen = rng.choice(len(EMOTION_DIMS), size=count, replace=False)
        label = np.zeros(len(EMOTION_DIMS))
        label[chosen] = 1.0
        names = ", ".join(EMOTION_DIMS[j] for j in sorted(chosen))
        base = base_sentences[i % len(base_sentences)]
        prompt = EMOTION_REWRITE_TEMPLATE.format(emotions=names, base=base)
        try:
            text = endpoint.chat([{"role": "user", "content": prompt}]).text.strip()
        except EndpointError:
            failures += 1
            continue
        if not text:
            failures += 1
            continue
        samples.append(EmotionSample(text=text, label=label))
    return samples, failures


def gen_importance_dataset(
    endpoint,
    seed_statements: Sequence[str],
    chain_length: int,
) -> tuple[list[ImportanceChain], int]:
    """Build enrichment chains by repeatedly adding detail to each seed.

    A chain that fails mid-way is dropped entirely so every kept chain has
    the full length and a query.
    """
    if chain_length < 2:
        raise ValueError("chains need at least two elements to form pairs")
    chains: list[ImportanceChain] = []
    failures = 0
    for seed in seed_statements:
        sentences = [seed]
        try:
            for _ in range(chain_length - 1):
                prompt = ENRICH_TEMPLATE.format(statement=sentences[-1])
                reply = endpoint.chat([{"role": "user", "content": prompt}]).text.strip()
                if not reply:
                    raise EndpointError("empty enrichment")
                sentences.append(reply)
            query_prompt = CHAIN_QUERY_TEMPLATE.format(statement=sentences[-1])
            query = endpoint.chat([{"role": "user", "content": query_prompt}]).text.strip()
            if not query:
                raise EndpointError("empty query")
        except EndpointError:
            failures += 1
            continue
        chains.append(ImportanceChain(query=query, sentences=sentences))
    return chains, failures


def build_importance_triples(chains: Sequence[ImportanceChain]) -> list[ImportanceTriple]:
    """All within-chain ordered pairs: later (more enriched) beats earlier."""
    triples = []
    for chain in chains:
        for j in range(1, len(chain.sentences)):
            for i in range(j):
                triples.append(
                    ImportanceTriple(
                        query=chain.query,
                        positive=chain.sentences[j],
                        negative=chain.sentences[i],
                    )
                )
    return triples


# -- emotion trainer ---------------------------------------------------


def emotion_loss(scorer: EmotionScorer, x: np.ndarray, labels: np.ndarray) -> float:
    """Mean squared Euclidean distance between scored and target vectors."""
    pred = scorer.score_batch(x)
    return float(np.mean(np.sum((pred - labels) ** 2, axis=1)))


def emotion_grad(
    scorer: EmotionScorer, x: np.ndarray, labels: np.ndarray
) -> tuple[float, EmotionScorer]:
    n = x.shape[0]
    u = x @ scorer.w1.T + scorer.b1
    a = np.tanh(u)
    pred = a @ scorer.w2.T + scorer.b2
    diff = pred - labels
    loss = float(np.mean(np.sum(diff**2, axis=1)))
    dpred = 2.0 * diff / n
    dw2 = dpred.T @ a
    db2 = dpred.sum(axis=0)
    da = dpred @ scorer.w2
    du = da * (1.0 - a**2)
    dw1 = du.T @ x
    db1 = du.sum(axis=0)
    return loss, EmotionScorer(w1=dw1, b1=db1, w2=dw2, b2=db2)


def train_emotion_scorer(
    scorer: EmotionScorer,
    samples: Sequence[EmotionSample],
    embedder,
    lr: float,
    epochs: int,
) -> tuple[EmotionScorer, list[float]]:
    """Full-batch gradient descent on the squared-error objective."""
    if not samples:
        raise ValueError("no emotion samples to train on")
    x = np.stack([embedder.embed(s.text) for s in samples])
    labels = np.stack([s.label for s in samples])
    current = EmotionScorer(
        w1=scorer.w1.copy(), b1=scorer.b1.copy(), w2=scorer.w2.copy(), b2=scorer.b2.copy()
    )
    history = []
    for _ in range(epochs):
        loss, grad = emotion_grad(current, x, labels)
        history.append(loss)
        current = EmotionScorer(
            w1=current.w1 - lr * grad.w1,
            b1=current.b1 - lr * grad.b1,
            w2=current.w2 - lr * grad.w2,
            b2=current.b2 - lr * grad.b2,
        )
    return current, history


# -- importance trainer ------------------------------------------------


def _row_cosines(u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    nu = np.linalg.norm(u, axis=1)
    nv = np.linalg.norm(v, axis=1)
    denom = np.maximum(nu * nv, 1e-12)
    return np.sum(u * v, axis=1) / denom, nu, nv


def importance_loss(
    scorer: ImportanceScorer, q: np.ndarray, pos: np.ndarray, neg: np.ndarray
) -> float:
    """Pairwise logistic loss on the positive-minus-negative score margins."""
    u = q @ scorer.w_query.T + scorer.b_query
    vp = pos @ scorer.w_memory.T + scorer.b_memory
    vn = neg @ scorer.w_memory.T + scorer.b_memory
    dp, _, _ = _row_cosines(u, vp)
    dn, _, _ = _row_cosines(u, vn)
    return float(np.mean(np.logaddexp(0.0, -(dp - dn))))


def importance_grad(
    scorer: ImportanceScorer, q: np.ndarray, pos: np.ndarray, neg: np.ndarray
) -> tuple[float, ImportanceScorer]:
    t = q.shape[0]
    u = q @ scorer.w_query.T + scorer.b_query
    vp = pos @ scorer.w_memory.T + scorer.b_memory
    vn = neg @ scorer.w_memory.T + scorer.b_memory
    dp, nu, npos = _row_cosines(u, vp)
    dn, _, nneg = _row_cosines(u, vn)
    margin = dp - dn
    loss = float(np.mean(np.logaddexp(0.0, -margin)))
    pull = expit(-margin) / t  # d(loss)/d(margin) = -pull

    def cos_grads(a, b, cos_ab, na, nb):
        # returns (d cos / d a, d cos / d b), rowwise
        inv = 1.0 / np.maximum(na * nb, 1e-12)
        da = b * inv[:, None] - (cos_ab / np.maximum(na**2, 1e-12))[:, None] * a
        db = a * inv[:, None] - (cos_ab / np.maximum(nb**2, 1e-12))[:, None] * b
        return da, db

    du_p, dvp = cos_grads(u, vp, dp, nu, npos)
    du_n, dvn = cos_grads(u, vn, dn, nu, nneg)
    du = -pull[:, None] * du_p + pull[:, None] * du_n
    dvp = -pull[:, None] * dvp
    dvn = pull[:, None] * dvn
    return loss, ImportanceScorer(
        w_query=du.T @ q,
        b_query=du.sum(axis=0),
        w_memory=dvp.T @ pos + dvn.T @ neg,
        b_memory=dvp.sum(axis=0) + dvn.sum(axis=0),
    )


def train_importance_scorer(
    scorer: ImportanceScorer,
    triples: Sequence[ImportanceTriple],
    embedder,
    lr: float,
    epochs: int,
) -> tuple[ImportanceScorer, list[float]]:
    if not triples:
        raise ValueError("no importance triples to train on")
    cache: dict[str, np.ndarray] = {}

    def emb(text: str) -> np.ndarray:
        if text not in cache:
            cache[text] = embedder.embed(text)
        return cache[text]

    q = np.stack([emb(t.query) for t in triples])
    pos = np.stack([emb(t.positive) for t in triples])
    neg = np.stack([emb(t.negative) for t in triples])
    current = ImportanceScorer(
        w_query=scorer.w_query.copy(),
        b_query=scorer.b_query.copy(),
        w_memory=scorer.w_memory.copy(),
        b_memory=scorer.b_memory.copy(),
    )
    history = []
    for _ in range(epochs):
        loss, grad = importance_grad(current, q, pos, neg)
        history.append(loss)
        current = ImportanceScorer(
            w_query=current.w_query - lr * grad.w_query,
            b_query=current.b_query - lr * grad.b_query,
            w_memory=current.w_memory - lr * grad.w_memory,
            b_memory=current.b_memory - lr * grad.b_memory,
        )
    return current, history


def pair_accuracy(
    scorer: ImportanceScorer, triples: Sequence[ImportanceTriple], embedder
) -> float:
    """Fraction of triples where the enriched statement outscores the plain one."""
    from memcycle.metrics import d_imp

    if not triples:
        raise ValueError("no triples to evaluate")
    hits = 0
    for t in triples:
        q = embedder.embed(t.query)
        if d_imp(scorer, q, embedder.embed(t.positive)) > d_imp(
            scorer, q, embedder.embed(t.negative)
        ):
            hits += 1
    return hits / len(triples)


# -- evaluation metrics --------------------------------------------------


def ndcg_at_k(relevances: Sequence[float], k: int) -> float:
    """Normalized discounted cumulative gain of a ranked relevance list.

    ``relevances`` are in predicted rank order, best first. A list with no
    relevance mass anywhere scores 0.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    rels = np.asarray(relevances, dtype=np.float64)
    if rels.size == 0:
        return 0.0
    discounts = 1.0 / np.log2(np.arange(2, min(k, rels.size) + 2))
    dcg = float(np.sum(rels[:k] * discounts))
    ideal = np.sort(rels)[::-1]
    idcg = float(np.sum(ideal[:k] * discounts[: min(k, ideal.size)]))
    if idcg == 0.0:
        return 0.0
    return dcg / idcg


def mse(predictions: np.ndarray, labels: np.ndarray) -> float:
    """Mean (over samples) squared Euclidean distance between rows."""
    predictions = np.asarray(predictions, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if predictions.shape != labels.shape:
        raise ValueError(f"shape mismatch: {predictions.shape} vs {labels.shape}")
    if predictions.ndim == 1:
        predictions = predictions[:, None]
        labels = labels[:, None]
    return float(np.mean(np.sum((predictions - labels) ** 2, axis=1)))


def ifr(n_invalid: int, n_total: int) -> float:
    """Invalid format rate of an endpoint-backed scoring run."""
    if n_total <= 0:
        raise ValueError("total count must be positive")
    if not 0 <= n_invalid <= n_total:
        raise ValueError("invalid count outside [0, total]")
    return n_invalid / n_total


def kendall_tau(a: Sequence[float], b: Sequence[float]) -> float:
    """Kendall rank correlation; 0 when either side is constant."""
    tau = kendalltau(a, b).statistic
    return 0.0 if np.isnan(tau) else float(tau)


# -- method-comparison harness -------------------------------------------

EMOTION_PROMPT = (
    "Score the following text on each emotion from 0 to 1.\nText: {text}\n"
    "Reply with exactly eight comma-separated numbers in this order: "
    + ", ".join(EMOTION_DIMS)
    + "."
)

EMOTION_FEWSHOT_PREFIX = (
    "Example:\nText: What a wonderful surprise, I love it!\n"
    "Scores: 1, 0, 0, 1, 0, 0, 0, 0\n\n"
)

IMPORTANCE_PROMPT = (
    "Rate from 0 to 1 how important the statement is for answering the query.\n"
    "Query: {query}\nStatement: {statement}\n"
    "Reply with a single number only."
)

IMPORTANCE_FEWSHOT_PREFIX = (
    "Example:\nQuery: Where was the treaty signed?\n"
    "Statement: The treaty was signed in Vienna in 1815 after lengthy talks.\n"
    "Rating: 0.9\n\n"
)

_NUMBER = re.compile(r"-?\d+(?:\.\d+)?")


def parse_emotion_scores(reply: str) -> np.ndarray | None:
    numbers = _NUMBER.findall(reply)
    if len(numbers) != len(EMOTION_DIMS):
        return None
    vec = np.array([float(x) for x in numbers])
    if np.any(vec < 0) or np.any(vec > 1):
        return None
    return vec


def parse_importance_score(reply: str) -> float | None:
    numbers = _NUMBER.findall(reply)
    if len(numbers) != 1:
        return None
    value = float(numbers[0])
    return value if 0.0 <= value <= 1.0 else None


def eval_emotion_methods(
    samples: Sequence[EmotionSample],
    scorer: EmotionScorer,
    endpoints: dict[str, object],
    embedder,
    seed: int = 0,
) -> list[dict]:
    """Compare emotion scoring methods: squared error plus format-failure rate.

    ``endpoints`` maps prompting method names ('zero-shot', 'few-shot') to
    chat endpoints; 'random' and 'trained' are always included.
    """
    if not samples:
        raise ValueError("no samples to evaluate")
    labels = np.stack([s.label for s in samples])
    rows = []
    gen = np.random.Generator(np.random.PCG64(seed))
    rows.append(
        {
            "method": "random",
            "mse": mse(gen.random(labels.shape), labels),
            "ifr": 0.0,
        }
    )
    for method, endpoint in endpoints.items():
        prefix = EMOTION_FEWSHOT_PREFIX if method == "few-shot" else ""
        preds, kept, invalid = [], [], 0
        for i, sample in enumerate(samples):
            prompt = prefix + EMOTION_PROMPT.format(text=sample.text)
            try:
                reply = endpoint.chat([{"role": "user", "content": prompt}]).text
            except EndpointError:
                invalid += 1
                continue
            vec = parse_emotion_scores(reply)
            if vec is None:
                invalid += 1
                continue
            preds.append(vec)
            kept.append(i)
        rows.append(
            {
                "method": method,
                "mse": mse(np.stack(preds), labels[kept]) if preds else float("nan"),
                "ifr": ifr(invalid, len(samples)),
            }
        )
    trained = scorer.score_batch(np.stack([embedder.embed(s.text) for s in samples]))
    rows.append({"method": "trained", "mse": mse(trained, labels), "ifr": 0.0})
    return rows


def eval_importance_methods(
    chains: Sequence[ImportanceChain],
    scorer: ImportanceScorer,
    endpoints: dict[str, object],
    embedder,
    k: int = 5,
    seed: int = 0,
) -> list[dict]:
    """Compare importance ranking methods by mean NDCG@k over chains.

    Within a chain the enrichment position is the graded relevance, so the
    ideal ranking is most-enriched first.
    """
    if not chains:
        raise ValueError("no chains to evaluate")
    gen = np.random.Generator(np.random.PCG64(seed))
    rows = []

    def chain_ndcg(score_fn) -> tuple[float, int]:
        total, invalid = 0.0, 0
        for chain in chains:
            rels = np.arange(len(chain.sentences), dtype=np.float64)
            scores = []
            for sentence, rel in zip(chain.sentences, rels):
                value = score_fn(chain.query, sentence)
                if value is None:
                    invalid += 1
                    value = 0.0
                scores.append((value, rel))
            scores.sort(key=lambda pair: -pair[0])
            total += ndcg_at_k([rel for _, rel in scores], k)
        return total / len(chains), invalid

    score, _ = chain_ndcg(lambda q, s: float(gen.random()))
    rows.append({"method": "random", "ndcg": score, "ifr": 0.0})

    n_calls = sum(len(c.sentences) for c in chains)
    for method, endpoint in endpoints.items():
        prefix = IMPORTANCE_FEWSHOT_PREFIX if method == "few-shot" else ""

        def llm_score(query, statement, _endpoint=endpoint, _prefix=prefix):
            prompt = _prefix + IMPORTANCE_PROMPT.format(query=query, statement=statement)
            try:
                reply = _endpoint.chat([{"role": "user", "content": prompt}]).text
            except EndpointError:
                return None
            return parse_importance_score(reply)

        score, invalid = chain_ndcg(llm_score)
        rows.append({"method": method, "ndcg": score, "ifr": ifr(invalid, n_calls)})

    from memcycle.metrics import d_imp

    score, _ = chain_ndcg(
        lambda q, s: d_imp(scorer, embedder.embed(q), embedder.embed(s))
    )
    rows.append({"method": "trained", "ndcg": score, "ifr": 0.0})
    return rows
