"""Editing metrics: efficacy, generalization, specificity, score, fluency, consistency.

The three indicator metrics compare next-token probabilities of two
single-token objects and count ties as failures. Fluency is the weighted
bigram/trigram entropy (bits) of greedy continuations; consistency is the
unigram TF-IDF cosine between continuations and reference texts about the
new object. Both are small-vocabulary versions of the usual generation checks.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import ToyTransformer, greedy_generate, last_token_logprobs

log = logging.getLogger(__name__)


class MetricError(ValueError):
    pass


def _compare(model, prompts, winners, losers):
    """Per-prompt indicator ``P(winner) > P(loser)``."""
    v = model.vocab
    lp = last_token_logprobs(model, [v.encode(p) for p in prompts])
    w = np.array([v.id(x) for x in winners])
    l = np.array([v.id(x) for x in losers])
    idx = np.arange(len(prompts))
    return lp[idx, w] > lp[idx, l]


def _require_edit_fields(records):
    for r in records:
        if r.target_new is None or r.original_object is None:
            raise MetricError(f"record {getattr(r, 'case_id', '?')} lacks target_new/original_object")


def efficacy_indicators(model, records) -> np.ndarray:
    _require_edit_fields(records)
    return _compare(model, [r.src for r in records], [r.target_new for r in records],
                    [r.original_object for r in records])


def generalization_indicators(model, records):
    """Indicators over every paraphrase prompt; returns ``(flags, owner_index, skipped)``."""
    _require_edit_fields(records)
    prompts, win, lose, owner = [], [], [], []
    skipped = 0
    for i, r in enumerate(records):
        if not r.rephrase:
            skipped += 1
        for p in r.rephrase:
            prompts.append(p)
            win.append(r.target_new)
            lose.append(r.original_object)
            owner.append(i)
    if not prompts:
        raise MetricError("no paraphrase prompts")
    return _compare(model, prompts, win, lose), np.array(owner), skipped


def specificity_indicators(model, records):
    """Original neighbor object must beat the edit target on neighborhood prompts."""
    _require_edit_fields(records)
    prompts, win, lose, owner = [], [], [], []
    skipped = 0
    for i, r in enumerate(records):
        if not r.loc:
            skipped += 1
        for p, ans in r.loc:
            prompts.append(p)
            win.append(ans)
            lose.append(r.target_new)
            owner.append(i)
    if not prompts:
        raise MetricError("no neighborhood prompts")
    return _compare(model, prompts, win, lose), np.array(owner), skipped


def efficacy(model, records) -> float:
    return 100.0 * float(np.mean(efficacy_indicators(model, records)))


def generalization(model, records) -> float:
    flags, _, _ = generalization_indicators(model, records)
    return 100.0 * float(np.mean(flags))


def specificity(model, records) -> float:
    flags, _, _ = specificity_indicators(model, records)
    return 100.0 * float(np.mean(flags))


def score(e: float, g: float, s: float) -> float:
    """Harmonic mean of three percentages; 0 if any is 0."""
    vals = (e, g, s)
    if any(v < 0 or v > 100 for v in vals):
        raise MetricError(f"percentages must lie in [0, 100]: {vals}")
    if any(v == 0 for v in vals):
        log.warning("score: a component is 0, harmonic mean defined as 0")
        return 0.0
    return 3.0 / sum(1.0 / v for v in vals)


# ---------------------------------------------------------------------------
# generation metrics


def ngram_entropy(tokens, n: int) -> float:
    grams = [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]
    if not grams:
        return 0.0
    counts = np.array(list(Counter(grams).values()), dtype=float)
    p = counts / counts.sum()
    return float(-(p * np.log2(p)).sum())


def fluency_of(tokens) -> float:
    return (2.0 / 3.0) * ngram_entropy(tokens, 2) + (4.0 / 3.0) * ngram_entropy(tokens, 3)


def continuation(model, prompt: str, n_new: int) -> list[int]:
    ids = model.vocab.encode(prompt)
    return greedy_generate(model, ids, n_new)[len(ids):]


def fluency(model, generation_prompts, n_new: int = 20) -> float:
    if n_new < 3:
        raise MetricError("fluency needs n_new >= 3")
    if not generation_prompts:
        raise MetricError("no generation prompts")
    return float(np.mean([fluency_of(continuation(model, p, n_new)) for p in generation_prompts]))


class TfIdf:
    """Unigram TF-IDF over a fixed document collection (smoothed idf)."""

    def __init__(self, documents):
        docs = [d.split() for d in documents]
        self.n_docs = len(docs)
        df = Counter()
        for d in docs:
            df.update(set(d))
        self.df = df

    def idf(self, word: str) -> float:
        return math.log((1 + self.n_docs) / (1 + self.df.get(word, 0))) + 1.0

    def vector(self, text: str) -> dict[str, float]:
        tf = Counter(text.split())
        return {w: c * self.idf(w) for w, c in tf.items()}

    def cosine(self, a: str, b: str) -> float:
        va, vb = self.vector(a), self.vector(b)
        dot = sum(x * vb.get(w, 0.0) for w, x in va.items())
        na = math.sqrt(sum(x * x for x in va.values()))
        nb = math.sqrt(sum(x * x for x in vb.values()))
        if na == 0.0 or nb == 0.0:
            return 0.0
        return dot / (na * nb)


def consistency(model, records, n_new: int = 20, tfidf: TfIdf | None = None) -> float:
    """Mean TF-IDF cosine between continuations and each record's reference texts."""
    docs = []
    for r in records:
        if not r.reference_texts:
            raise MetricError(f"record {r.case_id} has no reference texts")
        docs.extend(r.reference_texts)
    tfidf = tfidf or TfIdf(docs)
    sims = []
    for r in records:
        ref = " ".join(r.reference_texts)
        for p in r.generation_prompts:
            gen = model.vocab.decode(continuation(model, p, n_new))
            sims.append(tfidf.cosine(gen, ref))
    if not sims:
        raise MetricError("no generation prompts")
    return float(np.mean(sims))


# ---------------------------------------------------------------------------
# aggregate


@dataclass
class EvalConfig:
    n_new: int = 20
    generation: bool = True


@dataclass
class MetricsResult:
    efficacy: float
    generalization: float
    specificity: float
    score: float
    fluency: float | None
    consistency: float | None
    counts: dict = field(default_factory=dict)
    per_record: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def csv_row(self, n_edits: int) -> list:
        return [n_edits, self.efficacy, self.generalization, self.specificity, self.score,
                self.fluency, self.consistency]


CSV_HEADER = ["n_edits", "efficacy", "generalization", "specificity", "score", "fluency", "consistency"]


def metrics_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for row in rows:
        w.writerow(["" if x is None else (repr(float(x)) if isinstance(x, float) else x) for x in row])
    return buf.getvalue()


def evaluate_all(model: ToyTransformer, records, config: EvalConfig | None = None) -> MetricsResult:
    config = config or EvalConfig()
    records = list(records)
    eff = efficacy_indicators(model, records)
    gen, gen_owner, gen_skipped = generalization_indicators(model, records)
    spec, spec_owner, spec_skipped = specificity_indicators(model, records)
    e = 100.0 * float(eff.mean())
    g = 100.0 * float(gen.mean())
    s = 100.0 * float(spec.mean())
    flu = con = None
    if config.generation:
        prompts = [p for r in records for p in r.generation_prompts]
        flu = fluency(model, prompts, config.n_new)
        con = 100.0 * consistency(model, records, config.n_new)
    per = []
    for i, r in enumerate(records):
        per.append({
            "case_id": r.case_id,
            "efficacy": bool(eff[i]),
            "generalization": [bool(x) for x in gen[gen_owner == i]],
            "specificity": [bool(x) for x in spec[spec_owner == i]],
        })
    counts = {
        "records": len(records), "paraphrase_prompts": int(len(gen)), "neighborhood_prompts": int(len(spec)),
        "records_without_paraphrases": gen_skipped, "records_without_neighbors": spec_skipped,
    }
    return MetricsResult(e, g, s, score(e, g, s), flu, con, counts, per)
