"""Hidden-state probes and update-norm comparisons.

Per layer, the last-token layer input ``h^{l-1}`` is compared with the
attention output ``a^l`` and the FFN output ``m^l`` by cosine similarity and
by the Jaccard overlap of the top-k tokens each state decodes to.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from .model import ToyTransformer, forward
from .tensor import layernorm

log = logging.getLogger(__name__)


def top_k_vocab(model: ToyTransformer, h, k: int) -> list[int]:
    """Ids of the ``k`` largest logits of ``W_E lnf(h)``; ties go to the lower id."""
    V = model.config.vocab_size
    if not 1 <= k <= V:
        raise ValueError(f"k must lie in [1, {V}], got {k}")
    h = np.asarray(h, dtype=float)
    logits = model.unembedding() @ layernorm(h, model.params["lnf_g"], model.params["lnf_b"])
    # stable sort on -logits keeps ascending ids among equal values
    order = np.argsort(-logits, kind="stable")
    return [int(i) for i in order[:k]]


def jaccard(a, b) -> float:
    a, b = set(a), set(b)
    union = a | b
    if not union:
        return 1.0
    return len(a & b) / len(union)


@dataclass
class SimilarityProfile:
    layers: list[int]
    cos_mhsa: list[float]
    cos_ffn: list[float]
    jac_mhsa: list[float]
    jac_ffn: list[float]
    k_used: int
    n_prompts: int
    zero_cosines: int = 0

    def rows(self):
        return list(zip(self.layers, self.cos_mhsa, self.cos_ffn, self.jac_mhsa, self.jac_ffn))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(PROFILE_HEADER)
        for row in self.rows():
            w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])
        return buf.getvalue()


PROFILE_HEADER = ["layer", "cos_mhsa", "cos_ffn", "jac_mhsa", "jac_ffn"]


def _cos(x, y, counter):
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0.0 or ny == 0.0:
        counter[0] += 1
        return 0.0
    return float(np.clip(np.dot(x, y) / (nx * ny), -1.0, 1.0))


def similarity_profile(model: ToyTransformer, prompts, k: int = 50) -> SimilarityProfile:
    """Average last-token similarities per layer over ``prompts``."""
    prompts = list(prompts)
    if not prompts:
        raise ValueError("similarity_profile needs at least one prompt")
    n_layers = model.config.n_layers
    k = min(k, model.config.vocab_size)
    sums = np.zeros((n_layers, 4))
    zeros = [0]
    # sorted order keeps the float sums independent of the caller's ordering
    for prompt in sorted(prompts):
        ids = model.vocab.encode(prompt)
        _, tr = forward(model, ids)
        for l in range(1, n_layers + 1):
            h, a, m = tr.layer_input(l)[-1], tr.attn(l)[-1], tr.ffn(l)[-1]
            th, ta, tm = (set(top_k_vocab(model, x, k)) for x in (h, a, m))
            sums[l - 1] += (_cos(h, a, zeros), _cos(h, m, zeros), jaccard(th, ta), jaccard(th, tm))
    if zeros[0]:
        log.warning("%d cosines involved a zero vector and were set to 0", zeros[0])
    avg = sums / len(prompts)
    return SimilarityProfile(
        layers=list(range(1, n_layers + 1)),
        cos_mhsa=avg[:, 0].tolist(), cos_ffn=avg[:, 1].tolist(),
        jac_mhsa=avg[:, 2].tolist(), jac_ffn=avg[:, 3].tolist(),
        k_used=k, n_prompts=len(prompts), zero_cosines=zeros[0],
    )


@dataclass
class NormTable:
    labels: list[str]
    layers: list[int]
    norms: dict = field(default_factory=dict)  # label -> {layer: norm}
    totals: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer"] + self.labels)
        for l in self.layers:
            w.writerow([l] + [repr(float(self.norms[x][l])) for x in self.labels])
        w.writerow(["total"] + [repr(float(self.totals[x])) for x in self.labels])
        return buf.getvalue()


def delta_norm_comparison(reports) -> NormTable:
    """Per-layer and total FFN update norms for ``[(label, EditReport), ...]``."""
    reports = list(reports)
    if len(reports) < 2:
        raise ValueError("need at least two reports to compare")
    labels = [lab for lab, _ in reports]
    if len(set(labels)) != len(labels):
        raise ValueError("report labels must be distinct")
    layer_sets = {tuple(sorted(r.delta_norms())) for _, r in reports}
    if len(layer_sets) != 1:
        raise ValueError(f"reports cover different layers: {sorted(layer_sets)}")
    layers = list(layer_sets.pop())
    norms = {lab: r.delta_norms() for lab, r in reports}
    totals = {lab: r.total_delta_norm for lab, r in reports}
    return NormTable(labels=labels, layers=layers, norms=norms, totals=totals)
