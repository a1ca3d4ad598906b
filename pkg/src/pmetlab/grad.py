"""Exact gradients of the target-value loss with respect to the injected deltas.

Only the part of the network above the injection layer is differentiated;
model weights are constants. The per-request forward up to layer ``L`` is
computed once in :func:`build_context` and reused on every evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import BOS, Injection, ToyTransformer, pad_batch, run_backward, run_forward
from .tensor import log_softmax

KL_TEMPLATE = "{S} is a"


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class DeltaGradients:
    grad_delta_a: np.ndarray
    grad_delta_m: np.ndarray
    loss_value: float
    nll_term: float
    kl_term: float


@dataclass
class EditContext:
    """Everything the loss needs for one request.

    Rows ``0..P-1`` of the batch are ``prefix_j + clue + target[:-1]``; the
    last row is the KL prompt. ``subject_pos[r]`` is the subject's last token
    in row ``r`` and ``target_pos[r]`` the position predicting ``target[0]``.
    """

    layer: int
    target: list[int]
    seqs: list[list[int]]
    subject_pos: list[int]
    target_pos: list[int]
    batch: np.ndarray = field(repr=False)
    resume: tuple = field(repr=False)
    base_a: np.ndarray = field(repr=False)
    base_m: np.ndarray = field(repr=False)
    base_kl_logprobs: np.ndarray = field(repr=False, default=None)

    @property
    def n_prefixes(self) -> int:
        return len(self.seqs) - 1


def subject_last_index(vocab, prompt: str, subject: str, bos: bool = True) -> int:
    """Token index of the subject's last token inside ``prompt``."""
    at = prompt.find(subject)
    if at < 0:
        raise ValueError(f"subject {subject!r} not found in {prompt!r}")
    n = len(vocab.encode(prompt[: at + len(subject)], bos=bos))
    return n - 1


def build_context(model: ToyTransformer, clue: str, subject: str, target: str, prefixes, layer: int,
                  kl_template: str = KL_TEMPLATE) -> EditContext:
    """Tokenize a request and cache the forward pass up to layer ``layer``.

    ``prefixes`` is a list of token-id lists (without BOS); an empty list is
    the bare clue.
    """
    vocab = model.vocab
    if not 1 <= layer <= model.config.n_layers:
        raise IndexError(f"layer {layer} outside [1, {model.config.n_layers}]")
    prefixes = list(prefixes) or [[]]
    clue_ids = vocab.encode(clue, bos=False)
    tgt = vocab.encode(target, bos=False)
    if not tgt:
        raise ValueError("empty target")
    subj = subject_last_index(vocab, clue, subject, bos=False)
    seqs, spos, tpos = [], [], []
    for pre in prefixes:
        head = [BOS] + list(pre)
        seqs.append(head + clue_ids + tgt[:-1])
        spos.append(len(head) + subj)
        tpos.append(len(head) + len(clue_ids) - 1)
    kl_prompt = kl_template.replace("{S}", subject)
    kl_seq = vocab.encode(kl_prompt)
    seqs.append(kl_seq)
    spos.append(subject_last_index(vocab, kl_prompt, subject))
    tpos.append(len(kl_seq) - 1)
    batch = pad_batch(seqs)
    fw = run_forward(model, batch)
    resume = (layer, fw.h[layer - 1], fw.a[layer], fw.m[layer])
    rows = np.arange(len(seqs))
    ctx = EditContext(
        layer=layer, target=tgt, seqs=seqs, subject_pos=spos, target_pos=tpos, batch=batch,
        resume=resume, base_a=fw.a[layer][rows, spos], base_m=fw.m[layer][rows, spos],
    )
    zero = np.zeros(model.config.d_model)
    fw0 = _forward(model, ctx, zero, zero)
    ctx.base_kl_logprobs = log_softmax(fw0.logits[-1, tpos[-1]])
    return ctx


def _injections(ctx: EditContext, delta_a, delta_m):
    return [
        Injection(layer=ctx.layer, position=p, delta_a=delta_a, delta_m=delta_m, row=r)
        for r, p in enumerate(ctx.subject_pos)
    ]


def _forward(model, ctx, delta_a, delta_m):
    return run_forward(model, ctx.batch, _injections(ctx, delta_a, delta_m), resume=ctx.resume)


def _terms(ctx, logits):
    """NLL (mean over prefixes) and KL, plus their logit gradients."""
    P = ctx.n_prefixes
    dn = np.zeros_like(logits)
    nll = 0.0
    for r in range(P):
        pos = ctx.target_pos[r] + np.arange(len(ctx.target))
        lp = log_softmax(logits[r, pos])
        nll -= lp[np.arange(len(pos)), ctx.target].sum()
        g = np.exp(lp)
        g[np.arange(len(pos)), ctx.target] -= 1.0
        dn[r, pos] = g / P
    nll /= P
    k = len(ctx.seqs) - 1
    lp_mod = log_softmax(logits[k, ctx.target_pos[k]])
    p_mod = np.exp(lp_mod)
    diff = lp_mod - ctx.base_kl_logprobs
    kl = float(np.dot(p_mod, diff))
    dk = np.zeros_like(logits)
    dk[k, ctx.target_pos[k]] = p_mod * (diff - kl)
    return nll, kl, dn, dk


def evaluate_loss(model, ctx, delta_a, delta_m, phi: float, mu: float):
    """Loss value only (no backward); used by finite differences."""
    d = model.config.d_model
    da = np.zeros(d) if delta_a is None else delta_a
    dm = np.zeros(d) if delta_m is None else delta_m
    fw = _forward(model, ctx, da, dm)
    nll, kl, _, _ = _terms(ctx, fw.logits)
    return mu * kl + phi * nll


def loss_and_grads(model: ToyTransformer, ctx: EditContext, delta_a, delta_m, phi: float, mu: float) -> DeltaGradients:
    """Loss ``mu*KL(mod||base) + phi*mean_j NLL_j`` and its delta gradients.

    ``delta_a`` may be ``None`` (no attention-output perturbation). Because
    both deltas are added to the same residual sum, their gradients coincide.
    """
    d = model.config.d_model
    fw = _forward(model, ctx, delta_a, np.zeros(d) if delta_m is None else delta_m)
    nll, kl, dn, dk = _terms(ctx, fw.logits)
    loss = mu * kl + phi * nll
    for name, val in (("nll", nll), ("kl", kl), ("loss", loss)):
        if not np.isfinite(val):
            raise NonFiniteLossError(f"non-finite {name} term: {val}")
    dlogits = phi * dn + mu * dk
    _, dh = run_backward(model, fw, dlogits, weight_grads=False, stop_layer=ctx.layer)
    g = dh[np.arange(len(ctx.seqs)), ctx.subject_pos].sum(axis=0)
    return DeltaGradients(grad_delta_a=g.copy(), grad_delta_m=g, loss_value=float(loss),
                          nll_term=float(nll), kl_term=kl)


def finite_diff_check(model, ctx, delta_a, delta_m, step: float = 1e-5, phi: float = 1.0, mu: float = 1.0,
                      n_coords: int | None = None, seed: int = 0) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    Checks ``n_coords`` random coordinates of each delta (all when ``None``).
    """
    if not 0.0 < step <= 1e-2:
        raise ValueError("step must lie in (0, 1e-2]")
    d = model.config.d_model
    da = np.zeros(d) if delta_a is None else np.array(delta_a, dtype=float)
    dm = np.zeros(d) if delta_m is None else np.array(delta_m, dtype=float)
    g = loss_and_grads(model, ctx, da, dm, phi, mu)
    rng = np.random.default_rng(seed)
    coords = np.arange(d) if n_coords is None else rng.choice(d, size=min(n_coords, d), replace=False)
    worst = 0.0
    for which, vec, grad in (("a", da, g.grad_delta_a), ("m", dm, g.grad_delta_m)):
        for i in coords:
            old = vec[i]
            vec[i] = old + step
            up = evaluate_loss(model, ctx, da, dm, phi, mu)
            vec[i] = old - step
            down = evaluate_loss(model, ctx, da, dm, phi, mu)
            vec[i] = old
            fd = (up - down) / (2 * step)
            err = abs(grad[i] - fd) / max(abs(grad[i]), 1e-8)
            worst = max(worst, err)
    return worst
