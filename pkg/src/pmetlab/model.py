"""A small GPT-J-style decoder-only transformer written directly in numpy.

Each layer reads one shared layernorm of its input and runs attention and the
feed-forward block in parallel::

    h_l = h_{l-1} + a_l + m_l
    a_l = W_O_mhsa  MHSA(ln(h_{l-1}))
    m_l = W_O_ffn   gelu(W_I ln(h_{l-1}))

Layer indices in the public API are 1-based (layer 1 is the first block).
Linear maps carry no biases. The unembedding is tied to the token embedding.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tensor import LN_EPS, gelu, gelu_grad, gelu_tanh, log_softmax, softmax

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")
LAYER_PARAMS = ("ln_g", "ln_b", "w_q", "w_k", "w_v", "w_o_mhsa", "w_i", "w_o_ffn")


class Vocab:
    """Closed whitespace tokenizer. Ids 0..3 are pad/bos/eos/unk."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[:4]) != SPECIAL_TOKENS:
            tokens = list(SPECIAL_TOKENS) + [t for t in tokens if t not in SPECIAL_TOKENS]
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}
        if len(self.index) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def encode(self, text: str, bos: bool = True) -> list[int]:
        ids = [self.index.get(w, UNK) for w in text.split()]
        return [BOS] + ids if bos else ids

    def decode(self, ids) -> str:
        return " ".join(self.tokens[i] for i in ids if i not in (PAD, BOS))

    def id(self, word: str) -> int:
        return self.index.get(word, UNK)

    @classmethod
    def placeholder(cls, size: int) -> "Vocab":
        return cls(list(SPECIAL_TOKENS) + [f"tok{i}" for i in range(4, size)])


@dataclass
class ModelConfig:
    n_layers: int = 4
    d_model: int = 64
    d_ff: int = 256
    n_heads: int = 4
    vocab_size: int = 300
    max_seq_len: int = 32
    seed: int = 0

    def validate(self):
        for name in ("n_layers", "d_model", "d_ff", "n_heads", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model < 2:
            raise ValueError("d_model must be >= 2 for layernorm")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.vocab_size < 4:
            raise ValueError("vocab_size must be >= 4")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ff
    shapes = {"wte": (cfg.vocab_size, d), "wpe": (cfg.max_seq_len, d)}
    for l in range(1, cfg.n_layers + 1):
        shapes.update({
            f"layer{l}.ln_g": (d,), f"layer{l}.ln_b": (d,),
            f"layer{l}.w_q": (d, d), f"layer{l}.w_k": (d, d), f"layer{l}.w_v": (d, d),
            f"layer{l}.w_o_mhsa": (d, d),
            f"layer{l}.w_i": (f, d), f"layer{l}.w_o_ffn": (d, f),
        })
    shapes.update({"lnf_g": (d,), "lnf_b": (d,)})
    return shapes


class ToyTransformer:
    """Model parameters plus vocabulary.

    ``params`` maps names such as ``"layer2.w_o_ffn"`` to float64 arrays.
    The unembedding is ``params["wte"]`` itself, so it cannot drift from the
    embedding.
    """

    def __init__(self, config: ModelConfig, vocab: Vocab, params: dict[str, np.ndarray]):
        config.validate()
        if len(vocab) != config.vocab_size:
            raise ValueError(f"vocab has {len(vocab)} tokens, config says {config.vocab_size}")
        expected = param_shapes(config)
        if set(params) != set(expected):
            raise ValueError(f"parameter names differ: {sorted(set(params) ^ set(expected))}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ValueError(f"{name}: shape {params[name].shape}, expected {shape}")
        self.config = config
        self.vocab = vocab
        self.params = {k: np.ascontiguousarray(params[k], dtype=np.float64) for k in expected}

    def w(self, layer: int, name: str) -> np.ndarray:
        return self.params[f"layer{layer}.{name}"]

    @property
    def n_layers(self) -> int:
        return self.config.n_layers

    def copy(self) -> "ToyTransformer":
        return ToyTransformer(self.config, self.vocab, {k: v.copy() for k, v in self.params.items()})

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in param_shapes(self.config):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name]).astype("<f8").tobytes())
        return h.hexdigest()

    def unembedding(self) -> np.ndarray:
        return self.params["wte"]


def init_model(config: ModelConfig, vocab: Vocab | None = None) -> ToyTransformer:
    config.validate()
    vocab = vocab or Vocab.placeholder(config.vocab_size)
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith("_g"):
            params[name] = np.ones(shape)
        elif name.endswith("_b"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, 0.02, size=shape)
    return ToyTransformer(config, vocab, params)


# ---------------------------------------------------------------------------
# batched forward / backward


@dataclass
class Injection:
    """Additive perturbation of a component output at one (layer, position)."""

    layer: int
    position: int
    delta_a: np.ndarray | None = None
    delta_m: np.ndarray | None = None
    row: int = 0


@dataclass
class HiddenTrace:
    """Per-layer hidden states of one sequence.

    ``h[0]`` is the embedding output and ``h[l]`` the output of layer ``l``;
    ``a[l-1]`` and ``m[l-1]`` are the attention and FFN outputs of layer ``l``
    after any injection. ``final`` is the layernormed state fed to the
    unembedding.
    """

    h: np.ndarray
    a: np.ndarray
    m: np.ndarray
    final: np.ndarray
    mhsa_keys: np.ndarray = field(repr=False, default=None)
    ffn_keys: np.ndarray = field(repr=False, default=None)

    def layer_input(self, layer: int) -> np.ndarray:
        return self.h[layer - 1]

    def attn(self, layer: int) -> np.ndarray:
        return self.a[layer - 1]

    def ffn(self, layer: int) -> np.ndarray:
        return self.m[layer - 1]


class _LN:
    __slots__ = ("xhat", "rstd", "g")


def _ln_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    c = _LN()
    c.xhat = xc * rstd
    c.rstd = rstd
    c.g = g
    return c.xhat * g + b, c


def _ln_bwd(dy, c, grads=None, gname=None, bname=None):
    dxhat = dy * c.g
    if grads is not None:
        grads[gname] += (dy * c.xhat).reshape(-1, dy.shape[-1]).sum(0)
        grads[bname] += dy.reshape(-1, dy.shape[-1]).sum(0)
    mean_d = dxhat.mean(axis=-1, keepdims=True)
    mean_dx = (dxhat * c.xhat).mean(axis=-1, keepdims=True)
    return c.rstd * (dxhat - mean_d - c.xhat * mean_dx)


class Forward:
    """Activations of a batched forward pass, kept for backpropagation."""

    def __init__(self):
        self.tokens = None
        self.h = []       # h[0..L], each [B,T,d]
        self.a = {}       # layer -> [B,T,d]
        self.m = {}
        self.z = {}       # layer -> concat head outputs [B,T,d]
        self.kf = {}      # layer -> gelu output [B,T,d_ff]
        self.cache = {}   # layer -> dict for backward
        self.final = None
        self.final_cache = None
        self.logits = None
        self.start = 1


def _causal_mask(T):
    return np.tril(np.ones((T, T), dtype=bool))


def _layer_forward(model: ToyTransformer, l: int, x: np.ndarray):
    cfg = model.config
    B, T, d = x.shape
    H, dh = cfg.n_heads, cfg.d_head
    p = model.params
    xl, lnc = _ln_fwd(x, p[f"layer{l}.ln_g"], p[f"layer{l}.ln_b"])
    q = (xl @ p[f"layer{l}.w_q"].T).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
    k = (xl @ p[f"layer{l}.w_k"].T).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
    v = (xl @ p[f"layer{l}.w_v"].T).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
    scale = 1.0 / np.sqrt(dh)
    scores = (q @ k.transpose(0, 1, 3, 2)) * scale
    scores = np.where(_causal_mask(T), scores, -np.inf)
    att = softmax(scores, axis=-1)
    z = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, d)
    a = z @ p[f"layer{l}.w_o_mhsa"].T
    pre = xl @ p[f"layer{l}.w_i"].T
    tanh_term = gelu_tanh(pre)
    kf = gelu(pre, tanh_term)
    m = kf @ p[f"layer{l}.w_o_ffn"].T
    cache = dict(lnc=lnc, xl=xl, q=q, k=k, v=v, att=att, pre=pre, tanh=tanh_term)
    return a, m, z, kf, cache


def _group_injections(injections):
    by_layer = {}
    for inj in injections or ():
        by_layer.setdefault(inj.layer, []).append(inj)
    return by_layer


def _apply(a, m, injs):
    if not injs:
        return a, m
    a = a.copy()
    m = m.copy()
    for inj in injs:
        if inj.delta_a is not None:
            a[inj.row, inj.position] += inj.delta_a
        if inj.delta_m is not None:
            m[inj.row, inj.position] += inj.delta_m
    return a, m


def run_forward(model: ToyTransformer, tokens, injections=(), resume=None) -> Forward:
    """Batched forward pass over ``tokens`` of shape [B, T].

    ``resume=(L, h_prev, a_L, m_L)`` reuses already computed (uninjected)
    layer-``L`` component outputs so that only layers above ``L`` are rerun.
    """
    cfg = model.config
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    B, T = tokens.shape
    if T < 1:
        raise ValueError("empty token sequence")
    if T > cfg.max_seq_len:
        raise ValueError(f"sequence length {T} exceeds max_seq_len {cfg.max_seq_len}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ValueError("token id out of range")
    by_layer = _group_injections(injections)
    for l, injs in by_layer.items():
        if not 1 <= l <= cfg.n_layers:
            raise IndexError(f"injection layer {l} outside [1, {cfg.n_layers}]")
        for inj in injs:
            if not 0 <= inj.position < T or not 0 <= inj.row < B:
                raise IndexError(f"injection position {inj.position} outside sequence of length {T}")
    fw = Forward()
    fw.tokens = tokens
    p = model.params
    if resume is None:
        x = p["wte"][tokens] + p["wpe"][:T]
        fw.h.append(x)
        first = 1
    else:
        L, h_prev, a0, m0 = resume
        fw.h = [None] * (L - 1) + [h_prev]
        a, m = _apply(a0, m0, by_layer.get(L))
        fw.a[L], fw.m[L] = a, m
        x = h_prev + a + m
        fw.h.append(x)
        first = L + 1
    fw.start = first
    for l in range(first, cfg.n_layers + 1):
        a, m, z, kf, cache = _layer_forward(model, l, x)
        a, m = _apply(a, m, by_layer.get(l))
        x = x + a + m
        fw.a[l], fw.m[l], fw.z[l], fw.kf[l], fw.cache[l] = a, m, z, kf, cache
        fw.h.append(x)
    fw.final, fw.final_cache = _ln_fwd(x, p["lnf_g"], p["lnf_b"])
    fw.logits = fw.final @ p["wte"].T
    return fw


def _layer_backward(model, l, fw: Forward, dh, grads):
    """Backprop through layer ``l``. ``dh`` is the gradient of its output."""
    cfg = model.config
    p = model.params
    c = fw.cache[l]
    B, T, d = dh.shape
    H, dh_ = cfg.n_heads, cfg.d_head
    pre = f"layer{l}."
    # FFN branch
    w_o_ffn = p[pre + "w_o_ffn"]
    dkf = dh @ w_o_ffn
    dpre = dkf * gelu_grad(c["pre"], c["tanh"])
    dxl = dpre @ p[pre + "w_i"]
    # attention branch
    w_o = p[pre + "w_o_mhsa"]
    dz = (dh @ w_o).reshape(B, T, H, dh_).transpose(0, 2, 1, 3)
    att, q, k, v = c["att"], c["q"], c["k"], c["v"]
    datt = dz @ v.transpose(0, 1, 3, 2)
    dv = att.transpose(0, 1, 3, 2) @ dz
    dscores = att * (datt - np.sum(datt * att, axis=-1, keepdims=True))
    scale = 1.0 / np.sqrt(dh_)
    dq = (dscores @ k) * scale
    dk = (dscores.transpose(0, 1, 3, 2) @ q) * scale
    dq = dq.transpose(0, 2, 1, 3).reshape(B, T, d)
    dk = dk.transpose(0, 2, 1, 3).reshape(B, T, d)
    dv = dv.transpose(0, 2, 1, 3).reshape(B, T, d)
    dxl = dxl + dq @ p[pre + "w_q"] + dk @ p[pre + "w_k"] + dv @ p[pre + "w_v"]
    if grads is not None:
        xl = c["xl"].reshape(-1, d)
        flat = lambda t: t.reshape(-1, t.shape[-1])
        grads[pre + "w_o_ffn"] += flat(dh).T @ flat(fw.kf[l])
        grads[pre + "w_i"] += flat(dpre).T @ xl
        grads[pre + "w_o_mhsa"] += flat(dh).T @ flat(fw.z[l])
        grads[pre + "w_q"] += flat(dq).T @ xl
        grads[pre + "w_k"] += flat(dk).T @ xl
        grads[pre + "w_v"] += flat(dv).T @ xl
    dx = _ln_bwd(dxl, c["lnc"], grads, pre + "ln_g", pre + "ln_b")
    return dh + dx


def run_backward(model: ToyTransformer, fw: Forward, dlogits, weight_grads=True, stop_layer=0):
    """Backpropagate ``dlogits`` [B,T,V].

    Returns ``(grads, dh)`` where ``grads`` maps parameter names to gradients
    (``None`` when ``weight_grads`` is false) and ``dh`` is the gradient with
    respect to ``h_{stop_layer}``, the output of layer ``stop_layer``.
    """
    p = model.params
    grads = {k: np.zeros_like(v) for k, v in p.items()} if weight_grads else None
    V = p["wte"].shape[0]
    d = p["wte"].shape[1]
    if grads is not None:
        grads["wte"] += dlogits.reshape(-1, V).T @ fw.final.reshape(-1, d)
    dfinal = dlogits @ p["wte"]
    dh = _ln_bwd(dfinal, fw.final_cache, grads, "lnf_g", "lnf_b")
    if stop_layer < fw.start - 1:
        raise ValueError("cannot backpropagate below the resumed layer")
    for l in range(model.config.n_layers, stop_layer, -1):
        dh = _layer_backward(model, l, fw, dh, grads)
    if grads is not None and stop_layer == 0:
        T = fw.tokens.shape[1]
        np.add.at(grads["wte"], fw.tokens.reshape(-1), dh.reshape(-1, d))
        grads["wpe"][:T] += dh.sum(axis=0)
    return grads, dh


# ---------------------------------------------------------------------------
# single-sequence public API


def _check_tokens(model, tokens):
    tokens = list(tokens)
    if not tokens:
        raise ValueError("tokens must be non-empty")
    if any(t < 0 or t >= model.config.vocab_size for t in tokens):
        raise ValueError("token id out of range")
    return tokens


def forward(model: ToyTransformer, tokens, injections=()):
    """Run one sequence; return ``(logits [T,V], HiddenTrace)``."""
    tokens = _check_tokens(model, tokens)
    fw = run_forward(model, [tokens], injections)
    L = model.config.n_layers
    trace = HiddenTrace(
        h=np.stack([x[0] for x in fw.h]),
        a=np.stack([fw.a[l][0] for l in range(1, L + 1)]),
        m=np.stack([fw.m[l][0] for l in range(1, L + 1)]),
        final=fw.final[0],
        mhsa_keys=np.stack([fw.z[l][0] for l in range(1, L + 1)]),
        ffn_keys=np.stack([fw.kf[l][0] for l in range(1, L + 1)]),
    )
    return fw.logits[0], trace


def next_token_distribution(model, tokens, injections=()) -> np.ndarray:
    logits, _ = forward(model, tokens, injections)
    return softmax(logits[-1])


def greedy_generate(model, prompt_tokens, n_new: int) -> list[int]:
    """Argmax decoding; ``np.argmax`` already breaks ties by lowest id."""
    if n_new < 1:
        raise ValueError("n_new must be >= 1")
    seq = _check_tokens(model, prompt_tokens)
    for _ in range(n_new):
        window = seq[-model.config.max_seq_len:]
        logits, _ = forward(model, window)
        seq.append(int(np.argmax(logits[-1])))
    return seq


def _check_site(model, tokens, layer, position):
    if not 1 <= layer <= model.config.n_layers:
        raise IndexError(f"layer {layer} outside [1, {model.config.n_layers}]")
    if not 0 <= position < len(tokens):
        raise IndexError(f"position {position} outside sequence of length {len(tokens)}")


def ffn_key_state(model, tokens, layer: int, position: int) -> np.ndarray:
    """Input of ``W_O_ffn`` at (layer, position): ``gelu(W_I ln(h_{l-1}))``."""
    tokens = _check_tokens(model, tokens)
    _check_site(model, tokens, layer, position)
    fw = run_forward(model, [tokens])
    return fw.kf[layer][0, position].copy()


def mhsa_key_state(model, tokens, layer: int, position: int) -> np.ndarray:
    """Input of ``W_O_mhsa`` at (layer, position): the concatenated head outputs."""
    tokens = _check_tokens(model, tokens)
    _check_site(model, tokens, layer, position)
    fw = run_forward(model, [tokens])
    return fw.z[layer][0, position].copy()


def pad_batch(seqs, pad=PAD):
    """Right-pad token lists. Causal attention keeps real positions exact."""
    T = max(len(s) for s in seqs)
    out = np.full((len(seqs), T), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def last_token_logprobs(model, seqs) -> np.ndarray:
    """Next-token log-probabilities after each sequence, shape [N, V]."""
    if not seqs:
        return np.zeros((0, model.config.vocab_size))
    out = []
    chunk = 256
    for i in range(0, len(seqs), chunk):
        part = seqs[i : i + chunk]
        fw = run_forward(model, pad_batch(part))
        idx = np.array([len(s) - 1 for s in part])
        out.append(log_softmax(fw.logits[np.arange(len(part)), idx]))
    return np.concatenate(out)


def sequence_nll(model, seqs) -> np.ndarray:
    """Mean next-token NLL of each full sequence."""
    fw = run_forward(model, pad_batch(seqs))
    lp = log_softmax(fw.logits)
    res = []
    for i, s in enumerate(seqs):
        t = np.arange(len(s) - 1)
        res.append(-lp[i, t, np.asarray(s[1:])].mean())
    return np.array(res)


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"PMETLAB1"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


def _checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def save_checkpoint(model: ToyTransformer, path) -> None:
    """Write the ``PMETLAB1`` container (little-endian throughout).

    Layout: magic, u32 version, u32-length JSON config, u32 token count and
    u32-length UTF-8 tokens, u32 tensor count and per tensor (u16-length name,
    u8 ndim, u32 dims, f64 data), then an 8-byte blake2b checksum of all
    preceding bytes.
    """
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    cfg = json.dumps(asdict(model.config), sort_keys=True).encode()
    buf.write(struct.pack("<I", len(cfg)) + cfg)
    buf.write(struct.pack("<I", len(model.vocab)))
    for tok in model.vocab.tokens:
        b = tok.encode("utf-8")
        buf.write(struct.pack("<I", len(b)) + b)
    names = list(param_shapes(model.config))
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        arr = model.params[name]
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)) + nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).astype("<f8").tobytes())
    data = buf.getvalue()
    Path(path).write_bytes(data + _checksum(data))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError("unexpected end of checkpoint")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> ToyTransformer:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 8 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a PMETLAB1 checkpoint")
    body, tail = raw[:-8], raw[-8:]
    if _checksum(body) != tail:
        raise CheckpointError("checkpoint checksum mismatch (file truncated or corrupted)")
    r = _Reader(body)
    r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n,) = r.unpack("<I")
    config = ModelConfig(**json.loads(r.take(n).decode()))
    (ntok,) = r.unpack("<I")
    tokens = []
    for _ in range(ntok):
        (n,) = r.unpack("<I")
        tokens.append(r.take(n).decode("utf-8"))
    (nt,) = r.unpack("<I")
    expected = param_shapes(config)
    params = {}
    for _ in range(nt):
        (n,) = r.unpack("<H")
        name = r.take(n).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        if name not in expected:
            raise CheckpointError(f"unexpected tensor {name!r}")
        if tuple(shape) != expected[name]:
            raise CheckpointError(f"shape mismatch for {name}: file has {tuple(shape)}, config implies {expected[name]}")
        count = int(np.prod(shape)) if shape else 1
        params[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    missing = set(expected) - set(params)
    if missing:
        raise CheckpointError(f"missing tensors: {sorted(missing)}")
    return ToyTransformer(config, Vocab(tokens), params)
