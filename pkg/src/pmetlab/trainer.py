"""Next-token training that bakes the synthetic facts into the toy model."""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .model import ToyTransformer, last_token_logprobs, run_backward, run_forward
from .tensor import softmax


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Training hyperparameters.

    ``frozen`` names parameters the optimizer leaves untouched. The desk
    default keeps the token embedding at its small random init, so the
    subject's state after layer 1 is dominated by the first FFN's output and
    later layers read the facts through it.
    """

    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 5e-3
    seed: int = 0
    target_memorization: float = 1.0
    check_every: int = 5
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    frozen: tuple = ("wte",)

    def validate(self):
        if self.epochs < 0 or self.batch_size < 1 or self.check_every < 1:
            raise ValueError("epochs, batch_size and check_every must be positive")
        if not 0.0 <= self.learning_rate < 1.0:
            raise ValueError("learning_rate must lie in [0, 1)")
        if not 0.0 < self.target_memorization <= 1.0:
            raise ValueError("target_memorization must lie in (0, 1]")


def nll_and_grads(model: ToyTransformer, batch: np.ndarray, weight_grads: bool = True):
    """Mean next-token NLL over every position of an equal-length batch."""
    fw = run_forward(model, batch)
    B, T = batch.shape
    probs = softmax(fw.logits[:, :-1])
    tgt = batch[:, 1:]
    bi, ti = np.meshgrid(np.arange(B), np.arange(T - 1), indexing="ij")
    picked = probs[bi, ti, tgt]
    n = B * (T - 1)
    loss = float(-np.log(picked).sum() / n)
    if not weight_grads:
        return loss, None
    dlogits = np.zeros_like(fw.logits)
    dlogits[:, :-1] = probs
    dlogits[bi, ti, tgt] -= 1.0
    dlogits /= n
    grads, _ = run_backward(model, fw, dlogits)
    return loss, grads


class AdamW:
    def __init__(self, params, cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        c = self.cfg
        self.t += 1
        b1c = 1 - c.beta1**self.t
        b2c = 1 - c.beta2**self.t
        for k in sorted(params):
            if k in c.frozen:
                continue
            g = grads[k]
            self.m[k] = c.beta1 * self.m[k] + (1 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1 - c.beta2) * g * g
            update = (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + c.eps)
            # layernorm parameters are not decayed
            decay = c.weight_decay if k.split(".")[-1] not in ("ln_g", "ln_b", "lnf_g", "lnf_b") else 0.0
            params[k] -= c.learning_rate * (update + decay * params[k])


def _buckets(seqs):
    by_len = defaultdict(list)
    for s in seqs:
        by_len[len(s)].append(s)
    return {n: np.array(v, dtype=np.int64) for n, v in sorted(by_len.items())}


def train(model: ToyTransformer, training_texts, config: TrainConfig, records=None, log=None):
    """Train ``model`` in place; return ``(model, history)``.

    ``history`` has one ``(epoch, mean_nll, memorization_rate)`` tuple per
    epoch; the rate is ``nan`` on epochs where it was not measured. Training
    stops early once ``memorization_rate(records)`` reaches the target.
    """
    config.validate()
    if not training_texts:
        raise ValueError("training corpus is empty")
    unknown = sorted(set(config.frozen) - set(model.params))
    if unknown:
        raise ValueError(f"cannot freeze unknown parameters {unknown}")
    seqs = [model.vocab.encode(t) for t in training_texts]
    buckets = _buckets(seqs)
    rng = np.random.default_rng(config.seed)
    opt = AdamW(model.params, config)
    history = []
    for epoch in range(1, config.epochs + 1):
        batches = []
        for n, arr in buckets.items():
            idx = rng.permutation(len(arr))
            for i in range(0, len(arr), config.batch_size):
                batches.append(arr[idx[i : i + config.batch_size]])
        order = rng.permutation(len(batches))
        total, count = 0.0, 0
        for bi in order:
            batch = batches[bi]
            loss, grads = nll_and_grads(model, batch)
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"NLL became non-finite at epoch {epoch}")
            opt.step(model.params, grads)
            total += loss * batch.size
            count += batch.size
        mean_nll = total / count
        rate = float("nan")
        if records and (epoch % config.check_every == 0 or epoch == config.epochs):
            rate = memorization_rate(model, records)
        history.append((epoch, mean_nll, rate))
        if log:
            log(epoch, mean_nll, rate)
        if rate >= config.target_memorization:
            break
    return model, history


def relation_candidates(records) -> dict[str, list[str]]:
    cands = defaultdict(set)
    for r in records:
        cands[r.relation].add(r.original_object)
        if r.target_new is not None:
            cands[r.relation].add(r.target_new)
    return {k: sorted(v) for k, v in cands.items()}


def memorization_rate(model: ToyTransformer, records) -> float:
    """Fraction of records whose original object beats every other object of its relation at the clue."""
    if not records:
        raise ValueError("memorization_rate needs at least one record")
    cands = relation_candidates(records)
    lp = last_token_logprobs(model, [model.vocab.encode(r.src) for r in records])
    hits = 0
    for row, r in zip(lp, records):
        ids = [model.vocab.id(o) for o in cands[r.relation] if o != r.original_object]
        own = row[model.vocab.id(r.original_object)]
        if all(own > row[i] for i in ids):
            hits += 1
    return hits / len(records)


def write_history_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_nll", "memorization_rate"])
        for epoch, nll, rate in history:
            w.writerow([epoch, repr(float(nll)), "" if rate != rate else repr(float(rate))])
