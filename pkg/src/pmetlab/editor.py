"""Precise FFN key-value editing.

Per request, perturbations of the attention and FFN outputs at the last
critical layer ``L`` are optimized so the model emits the new object; only
the optimized FFN output (``v_m = m_L + delta_m``) becomes an edit target.
Then, for each critical layer in ascending order, the remaining residual
``v_m - m_L`` is spread over the layers still to be edited and written into
``W_O_ffn`` with a covariance-regularized least-squares update::

    Delta = R K1^T (C0 + K1 K1^T)^-1
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .grad import EditContext, build_context, loss_and_grads, subject_last_index
from .model import BOS, ToyTransformer, greedy_generate, pad_batch, run_forward
from .tensor import NotPositiveDefiniteError, solve_spd

log = logging.getLogger(__name__)

WEIGHT_KINDS = ("ffn", "mhsa")
SPREAD_MODES = ("sqrt", "even")


class EditError(RuntimeError):
    """Raised when an edit fails; ``partial`` holds the layers already done."""

    def __init__(self, msg, partial=None):
        super().__init__(msg)
        self.partial = partial


@dataclass
class EditConfig:
    """Editing hyperparameters.

    Step count, step size, clamp ratio and the second-phase schedule keep
    their large-model values. Layer range, lambda and the prefix count are
    desk choices: on the 4-layer toy model only layer 1 leaves
    enough downstream depth for a clamped FFN perturbation to move the
    prediction, and layer-1 keys depend on absolute position, so prefixes
    would shift them away from where the facts were learned.
    """

    critical_layers: tuple[int, ...] = (1,)
    lam: float = 15.0
    phi: float = 1.0
    mu: float = 1.0
    phase2_phi: float = 0.1
    kl_stop: float = 0.01
    opt_steps: int = 30
    opt_lr: float = 0.2
    clamp_ratio: float = 0.75
    n_prefixes: int = 1
    prefix_length: int = 5
    covariance_samples: int = 2000
    spread_mode: str = "sqrt"
    optimize_delta_a: bool = True
    update_mhsa_weights: bool = False
    switch_nll: float = 0.05
    switch_fraction: float = 0.6
    seed: int = 0

    def validate(self, n_layers: int | None = None):
        layers = list(self.critical_layers)
        if not layers:
            raise ValueError("critical_layers must be non-empty")
        if any(b <= a for a, b in zip(layers, layers[1:])):
            raise ValueError("critical_layers must be strictly ascending")
        if layers[0] < 1 or (n_layers is not None and layers[-1] > n_layers):
            raise ValueError(f"critical_layers {layers} outside the model's layers")
        if not self.lam > 0:
            raise ValueError("lambda must be > 0")
        if not (self.phi > 0 and self.phase2_phi > 0 and self.kl_stop > 0 and self.opt_lr > 0):
            raise ValueError("phi, phase2_phi, kl_stop and opt_lr must be positive")
        if not 0.0 <= self.mu <= 1.0:
            raise ValueError("mu must lie in [0, 1]")
        if not 0.0 < self.clamp_ratio <= 1.0:
            raise ValueError("clamp_ratio must lie in (0, 1]")
        if self.opt_steps < 0 or self.n_prefixes < 1 or self.covariance_samples < 1:
            raise ValueError("opt_steps >= 0, n_prefixes >= 1, covariance_samples >= 1 required")
        if self.spread_mode not in SPREAD_MODES:
            raise ValueError(f"spread_mode must be one of {SPREAD_MODES}")

    @property
    def last_layer(self) -> int:
        return max(self.critical_layers)


_ALIASES = {"lambda": "lam", "critical_layers": "critical_layers", "spread": "spread_mode"}


def parse_config_text(text: str) -> dict[str, str]:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _coerce(kind, value: str):
    if kind is bool or kind == "bool":
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if kind in (int, "int"):
        return int(value)
    if kind in (float, "float"):
        return float(value)
    return value


def config_from_mapping(cls, mapping: dict[str, str], aliases=None):
    """Build a dataclass config from string values, rejecting unknown keys."""
    aliases = aliases or {}
    types = {f.name: f.type for f in fields(cls)}
    kwargs = {}
    for key, value in mapping.items():
        name = aliases.get(key, key)
        if name not in types:
            raise ValueError(f"unknown config key {key!r}")
        t = types[name]
        if name == "critical_layers":
            kwargs[name] = tuple(int(x) for x in str(value).replace(",", " ").split())
        elif t in ("tuple", tuple) and isinstance(value, str):
            kwargs[name] = tuple(value.replace(",", " ").split())
        elif isinstance(value, str):
            kwargs[name] = _coerce(t.split(" ")[0] if isinstance(t, str) else t, value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def load_edit_config(path, overrides=None) -> EditConfig:
    with open(path, encoding="utf-8") as fh:
        mapping = parse_config_text(fh.read())
    mapping.update(overrides or {})
    return config_from_mapping(EditConfig, mapping, _ALIASES)


# ---------------------------------------------------------------------------
# target values


@dataclass
class TargetValues:
    v_m: np.ndarray
    v_a: np.ndarray
    delta_a_final: np.ndarray
    delta_m_final: np.ndarray
    base_a: np.ndarray
    base_m: np.ndarray
    opt_trace: list[tuple[float, float, float]] = field(default_factory=list)
    phase_switch_step: int | None = None


class _Adam:
    def __init__(self, n, lr):
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0
        self.lr = lr

    def step(self, x, g):
        self.t += 1
        self.m = 0.9 * self.m + 0.1 * g
        self.v = 0.999 * self.v + 0.001 * g * g
        mh = self.m / (1 - 0.9**self.t)
        vh = self.v / (1 - 0.999**self.t)
        return x - self.lr * mh / (np.sqrt(vh) + 1e-8)


def _clamp(delta, base_norm, ratio):
    limit = ratio * base_norm
    n = np.linalg.norm(delta)
    if n > limit:
        delta = delta * (limit / n)
    return delta


def optimize_target_values(model: ToyTransformer, request, config: EditConfig, prefixes=None,
                           ctx: EditContext | None = None) -> TargetValues:
    """Optimize ``delta_a``/``delta_m`` at layer ``L = max(critical_layers)``.

    Phase 1 weights the target NLL by ``phi``; once the mean NLL drops to
    ``switch_nll`` (or ``switch_fraction`` of the steps have run) the weight
    becomes ``phase2_phi`` and the loop stops as soon as the KL term falls
    below ``kl_stop``. Deltas are rescaled after every step so their norms stay
    within ``clamp_ratio`` of the corresponding base component outputs.
    """
    L = config.last_layer
    if ctx is None:
        if prefixes is None:
            prefixes = make_prefixes(model, config)
        ctx = build_context(model, request.src, request.subject, request.target_new, prefixes, L)
    base_a = ctx.base_a[0].copy()
    base_m = ctx.base_m[0].copy()
    na, nm = np.linalg.norm(base_a), np.linalg.norm(base_m)
    if nm == 0.0 or (config.optimize_delta_a and na == 0.0):
        raise EditError("zero-norm base hidden state; cannot bound the deltas")
    d = model.config.d_model
    dm = np.zeros(d)
    da = np.zeros(d) if config.optimize_delta_a else None
    opt_m = _Adam(d, config.opt_lr)
    opt_a = _Adam(d, config.opt_lr) if config.optimize_delta_a else None
    phi = config.phi
    switched = None
    trace = []
    for step in range(config.opt_steps):
        g = loss_and_grads(model, ctx, da, dm, phi, config.mu)
        if switched is None and (g.nll_term <= config.switch_nll or step >= config.switch_fraction * config.opt_steps):
            switched = step
            phi = config.phase2_phi
            g = loss_and_grads(model, ctx, da, dm, phi, config.mu)
        trace.append((g.loss_value, g.nll_term, g.kl_term))
        if switched is not None and g.kl_term < config.kl_stop:
            break
        dm = _clamp(opt_m.step(dm, g.grad_delta_m), nm, config.clamp_ratio)
        if opt_a is not None:
            da = _clamp(opt_a.step(da, g.grad_delta_a), na, config.clamp_ratio)
    if da is None:
        da = np.zeros(d)
    return TargetValues(
        v_m=base_m + dm, v_a=base_a + da, delta_a_final=da, delta_m_final=dm,
        base_a=base_a, base_m=base_m, opt_trace=trace, phase_switch_step=switched,
    )


def make_prefixes(model: ToyTransformer, config: EditConfig) -> list[list[int]]:
    """The empty prefix plus ``n_prefixes - 1`` seeded greedy generations."""
    rng = np.random.default_rng(config.seed)
    words = np.arange(4, model.config.vocab_size)
    out = [[]]
    for _ in range(config.n_prefixes - 1):
        start = int(rng.choice(words))
        seq = greedy_generate(model, [BOS, start], config.prefix_length - 1)
        out.append(seq[1:])
    return out


# ---------------------------------------------------------------------------
# keys, covariance, residual spreading, closed-form update


def _key_rows(fw, layer, kind):
    if kind == "ffn":
        return fw.kf[layer]
    if kind == "mhsa":
        return fw.z[layer]
    raise ValueError(f"unknown weight kind {kind!r}")


def compute_keys(model: ToyTransformer, subject: str, prefixes, layer: int, weight_kind: str = "ffn",
                 prompt: str | None = None) -> np.ndarray:
    """Mean over prefixes of the input to the edited weight at the subject's last token.

    The key sequence is ``prefix_j + prompt`` (``prompt`` defaults to the
    subject itself); causal attention makes any text after the subject
    irrelevant.
    """
    return compute_keys_batch(model, [(subject, prompt)], prefixes, layer, weight_kind)[:, 0]


def compute_keys_batch(model, items, prefixes, layer, weight_kind="ffn") -> np.ndarray:
    """Keys for several ``(subject, prompt)`` pairs, one column each."""
    if weight_kind not in WEIGHT_KINDS:
        raise ValueError(f"unknown weight kind {weight_kind!r}")
    prefixes = list(prefixes) or [[]]
    vocab = model.vocab
    seqs, pos = [], []
    for subject, prompt in items:
        prompt = prompt if prompt is not None else subject
        if not vocab.encode(subject, bos=False):
            raise ValueError("subject tokenizes to nothing")
        body = vocab.encode(prompt, bos=False)
        j = subject_last_index(vocab, prompt, subject, bos=False)
        for pre in prefixes:
            head = [BOS] + list(pre)
            seqs.append(head + body[: j + 1])
            pos.append(len(head) + j)
    fw = run_forward(model, pad_batch(seqs))
    rows = _key_rows(fw, layer, weight_kind)[np.arange(len(seqs)), pos]
    P = len(prefixes)
    return rows.reshape(len(items), P, -1).mean(axis=1).T


def component_outputs(model, items, layer):
    """``(a_L, m_L)`` at the subject's last token of each bare prompt, as columns."""
    vocab = model.vocab
    seqs, pos = [], []
    for subject, prompt in items:
        seqs.append(vocab.encode(prompt))
        pos.append(subject_last_index(vocab, prompt, subject))
    fw = run_forward(model, pad_batch(seqs))
    idx = np.arange(len(seqs))
    return fw.a[layer][idx, pos].T.copy(), fw.m[layer][idx, pos].T.copy()


@dataclass
class CovarianceEstimate:
    layer: int
    weight_kind: str
    C0: np.ndarray
    n_samples: int
    lambda_used: float


def estimate_covariance(model: ToyTransformer, sample_texts, layer: int, weight_kind: str, lam: float,
                        n_samples: int = 2000, seed: int = 0) -> CovarianceEstimate:
    """``lam * mean(k k^T)`` over keys taken at random token positions."""
    if weight_kind not in WEIGHT_KINDS:
        raise ValueError(f"unknown weight kind {weight_kind!r}")
    seqs = [model.vocab.encode(t) for t in sample_texts]
    if not seqs:
        raise ValueError("no sample texts for covariance estimation")
    sites = [(i, j) for i, s in enumerate(seqs) for j in range(len(s))]
    rng = np.random.default_rng(seed)
    take = rng.choice(len(sites), size=n_samples, replace=n_samples > len(sites))
    chosen = sorted(take.tolist())
    keys = []
    by_seq = {}
    for t in chosen:
        i, j = sites[t]
        by_seq.setdefault(i, []).append(j)
    order = sorted(by_seq)
    for start in range(0, len(order), 256):
        part = order[start : start + 256]
        fw = run_forward(model, pad_batch([seqs[i] for i in part]))
        states = _key_rows(fw, layer, weight_kind)
        for r, i in enumerate(part):
            for j in by_seq[i]:
                keys.append(states[r, j])
    K = np.array(keys)
    dim = K.shape[1]
    if n_samples < dim:
        log.warning("only %d covariance samples for a %d-dimensional key space", n_samples, dim)
    C0 = lam * (K.T @ K) / len(K)
    C0 = 0.5 * (C0 + C0.T)
    return CovarianceEstimate(layer=layer, weight_kind=weight_kind, C0=C0, n_samples=len(K), lambda_used=lam)


def spread_residual(v, m, layer: int, last_layer: int, mode: str = "sqrt") -> np.ndarray:
    if layer > last_layer:
        raise ValueError(f"layer {layer} is above the last critical layer {last_layer}")
    diff = np.asarray(v, dtype=float) - np.asarray(m, dtype=float)
    span = last_layer - layer + 1
    if mode == "sqrt":
        return diff / math.sqrt(span)
    if mode == "even":
        return diff / span
    raise ValueError(f"unknown spread mode {mode!r}")


def compute_delta(R: np.ndarray, K1: np.ndarray, C0: np.ndarray) -> np.ndarray:
    """``R K1^T (C0 + K1 K1^T)^-1`` via a Cholesky solve of the transposed system.

    On a failed factorization, ``1e-8 * trace / d`` is added to the diagonal
    once before giving up. Two refinement steps follow the solve.
    """
    R = np.atleast_2d(np.asarray(R, dtype=float))
    K1 = np.atleast_2d(np.asarray(K1, dtype=float))
    if R.shape[1] != K1.shape[1] or C0.shape != (K1.shape[0], K1.shape[0]):
        raise ValueError(f"inconsistent shapes R{R.shape} K1{K1.shape} C0{C0.shape}")
    A = C0 + K1 @ K1.T
    A = 0.5 * (A + A.T)
    rhs = K1 @ R.T
    try:
        X = solve_spd(A, rhs)
    except NotPositiveDefiniteError:
        d = A.shape[0]
        A = A + 1e-8 * np.trace(A) / d * np.eye(d)
        try:
            X = solve_spd(A, rhs)
        except NotPositiveDefiniteError as exc:
            raise EditError(f"update system is singular even after jitter: {exc}") from None
    # refinement with the fit residual taken from K1 itself; forming K1 K1^T
    # squares its condition number
    for _ in range(2):
        E = R - X.T @ K1
        X = X + solve_spd(A, K1 @ E.T - C0 @ X)
    return X.T


# ---------------------------------------------------------------------------
# multi-layer application


@dataclass
class LayerReport:
    layer: int
    delta_norm_ffn: float
    residual_norm_before: float
    residual_norm_after: float
    delta_norm_mhsa: float | None = None
    residual_norm_mhsa_before: float | None = None
    residual_norm_mhsa_after: float | None = None

    @property
    def kinds(self):
        return ["ffn"] if self.delta_norm_mhsa is None else ["ffn", "mhsa"]


@dataclass
class EditReport:
    layers: list[LayerReport]
    config: dict
    n_requests: int
    target_key_shape: tuple[int, int] = (0, 0)
    target_value_shape: tuple[int, int] = (0, 0)
    opt_final: list[dict] = field(default_factory=list)

    @property
    def total_delta_norm(self) -> float:
        return math.sqrt(sum(r.delta_norm_ffn**2 for r in self.layers))

    @property
    def total_delta_norm_mhsa(self) -> float | None:
        vals = [r.delta_norm_mhsa for r in self.layers if r.delta_norm_mhsa is not None]
        return math.sqrt(sum(v * v for v in vals)) if vals else None

    def delta_norms(self) -> dict[int, float]:
        return {r.layer: r.delta_norm_ffn for r in self.layers}

    def to_json(self) -> str:
        d = {
            "n_requests": self.n_requests,
            "layers": [asdict(r) | {"weight_kinds": r.kinds} for r in self.layers],
            "total_delta_norm_ffn": self.total_delta_norm,
            "total_delta_norm_mhsa": self.total_delta_norm_mhsa,
            "keys_shape": list(self.target_key_shape),
            "values_shape": list(self.target_value_shape),
            "optimization": self.opt_final,
            "config": self.config,
        }
        return json.dumps(d, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "delta_norm"])
        for r in self.layers:
            w.writerow([r.layer, repr(r.delta_norm_ffn)])
        return buf.getvalue()

    @classmethod
    def from_json(cls, text: str) -> "EditReport":
        d = json.loads(text)
        layers = []
        for r in d["layers"]:
            r = {k: v for k, v in r.items() if k != "weight_kinds"}
            layers.append(LayerReport(**r))
        return cls(layers=layers, config=d["config"], n_requests=d["n_requests"],
                   target_key_shape=tuple(d.get("keys_shape", (0, 0))),
                   target_value_shape=tuple(d.get("values_shape", (0, 0))),
                   opt_final=d.get("optimization", []))


def config_echo(config: EditConfig) -> dict:
    d = asdict(config)
    d["critical_layers"] = list(config.critical_layers)
    return d


class CovarianceCache:
    """Lazily estimated ``C0`` per (layer, kind) on a fixed model snapshot."""

    def __init__(self, model, sample_texts, config: EditConfig):
        self.model = model
        self.texts = sample_texts
        self.config = config
        self.store = {}

    def get(self, layer, kind) -> np.ndarray:
        key = (layer, kind)
        if key not in self.store:
            self.store[key] = estimate_covariance(
                self.model, self.texts, layer, kind, self.config.lam,
                self.config.covariance_samples, seed=self.config.seed + 1000 * layer,
            ).C0
        return self.store[key]


def apply_edits(model: ToyTransformer, requests, config: EditConfig, sample_texts=None,
                covariances: CovarianceCache | None = None, prefixes=None):
    """Edit a copy of ``model``; return ``(edited_model, EditReport)``.

    Targets are optimized independently on the unedited model. Keys and the
    current ``m_L`` are recomputed after each layer's update. With
    ``update_mhsa_weights`` the attention output projection of every critical
    layer receives the analogous update toward ``a_L + delta_a``.
    """
    requests = list(requests)
    if not requests:
        raise ValueError("apply_edits needs at least one request")
    config.validate(model.config.n_layers)
    if covariances is None:
        if sample_texts is None:
            raise ValueError("sample_texts or covariances required")
        covariances = CovarianceCache(model, sample_texts, config)
    L = config.last_layer
    if prefixes is None:
        prefixes = make_prefixes(model, config)
    targets = [optimize_target_values(model, r, config, prefixes) for r in requests]
    V_m = np.stack([t.v_m for t in targets], axis=1)
    V_a = np.stack([t.v_a for t in targets], axis=1)
    items = [(r.subject, r.src) for r in requests]
    edited = model.copy()
    layers = []
    key_shape = (0, 0)
    for l in config.critical_layers:
        try:
            cur_a, cur_m = component_outputs(edited, items, L)
            resid_m = V_m - cur_m
            K1 = compute_keys_batch(edited, items, prefixes, l, "ffn")
            key_shape = K1.shape
            delta = compute_delta(spread_residual(V_m, cur_m, l, L, config.spread_mode), K1, covariances.get(l, "ffn"))
            delta_mhsa = None
            if config.update_mhsa_weights:
                Ka = compute_keys_batch(edited, items, prefixes, l, "mhsa")
                resid_a = V_a - cur_a
                delta_mhsa = compute_delta(spread_residual(V_a, cur_a, l, L, config.spread_mode), Ka,
                                           covariances.get(l, "mhsa"))
            edited.params[f"layer{l}.w_o_ffn"] = edited.params[f"layer{l}.w_o_ffn"] + delta
            if delta_mhsa is not None:
                edited.params[f"layer{l}.w_o_mhsa"] = edited.params[f"layer{l}.w_o_mhsa"] + delta_mhsa
            new_a, new_m = component_outputs(edited, items, L)
        except Exception as exc:
            raise EditError(f"edit failed at layer {l}: {exc}", partial=layers) from exc
        rep = LayerReport(
            layer=l, delta_norm_ffn=float(np.linalg.norm(delta)),
            residual_norm_before=float(np.linalg.norm(resid_m)),
            residual_norm_after=float(np.linalg.norm(V_m - new_m)),
        )
        if delta_mhsa is not None:
            rep.delta_norm_mhsa = float(np.linalg.norm(delta_mhsa))
            rep.residual_norm_mhsa_before = float(np.linalg.norm(resid_a))
            rep.residual_norm_mhsa_after = float(np.linalg.norm(V_a - new_a))
        layers.append(rep)
        log.info("layer %d: |delta|=%.4g residual %.4g -> %.4g", l, rep.delta_norm_ffn,
                 rep.residual_norm_before, rep.residual_norm_after)
    opt_final = [
        {"case_id": getattr(r, "case_id", i), "steps": len(t.opt_trace),
         "final_nll": t.opt_trace[-1][1] if t.opt_trace else None,
         "final_kl": t.opt_trace[-1][2] if t.opt_trace else None,
         "delta_m_norm": float(np.linalg.norm(t.delta_m_final)),
         "delta_a_norm": float(np.linalg.norm(t.delta_a_final))}
        for i, (r, t) in enumerate(zip(requests, targets))
    ]
    report = EditReport(layers=layers, config=config_echo(config), n_requests=len(requests),
                        target_key_shape=tuple(key_shape), target_value_shape=tuple(V_m.shape),
                        opt_final=opt_final)
    return edited, report
