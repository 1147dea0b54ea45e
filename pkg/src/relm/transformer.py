"""Masked LM and encoder-decoder Transformers with tied embeddings and adapters.

Parameters live in a flat ordered ``dict`` of :class:`~relm.tensor.Parameter`
keyed by hierarchical names::

    embeddings.token / embeddings.position / embeddings.language / pred.bias
    encoder.layer{i}.attn.{wq,bq,wk,bk,wv,bv,wo,bo}
    encoder.layer{i}.ln_attn.{gain,bias}
    encoder.layer{i}.ffn.{w1,b1,w2,b2}
    encoder.layer{i}.ln_ffn.{gain,bias}
    encoder.layer{i}.adapter_attn.{w_down,b_down,w_up,b_up}   (optional)
    encoder.layer{i}.adapter_ffn.{...}                        (optional)
    decoder.layer{i}.{self_attn,ln_self,cross_attn,ln_cross,ffn,ln_ffn,adapter_*}

The output projection is ``embeddings.token`` itself (transposed), so the two
can never drift apart. Layers are post-norm: ``x = LN(x + sublayer(x))``, with
an adapter after each normalized sublayer output when attached.
"""

from __future__ import annotations

import copy
import enum
import math
import warnings
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .bpe import BOS_ID, EOS_ID, MASK_ID, PAD_ID, SPECIALS, Vocabulary
from .errors import ConfigError, ModelError, VocabularyError
from .rng import Rng
from .tensor import Parameter, Tensor

IGNORE_INDEX = -100
NEG_INF = -1e9

ATTN_KEYS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")
FFN_KEYS = ("w1", "b1", "w2", "b2")
LN_KEYS = ("gain", "bias")
ADAPTER_KEYS = ("w_down", "b_down", "w_up", "b_up")


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_dim: int | None = None
    max_positions: int = 128
    dropout: float = 0.1
    attention_dropout: float = 0.0
    n_languages: int = 1
    adapter_dim: int | None = None
    tie_embeddings: bool = True
    init_std: float = 0.02
    dtype: str = "float32"

    def __post_init__(self):
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.d_model
        self.validate()

    def validate(self):
        if self.d_model <= 0 or self.n_heads <= 0 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} must be a positive multiple of n_heads={self.n_heads}")
        if self.n_layers <= 0 or self.vocab_size <= len(SPECIALS) - 1 or self.max_positions <= 0:
            raise ConfigError("n_layers, vocab_size and max_positions must be positive")
        if not 0.0 <= self.dropout < 1.0 or not 0.0 <= self.attention_dropout < 1.0:
            raise ConfigError("dropout rates must lie in [0, 1)")
        if self.n_languages not in (1, 2):
            raise ConfigError(f"n_languages must be 1 or 2, got {self.n_languages}")
        if self.adapter_dim is not None and self.adapter_dim <= 0:
            raise ConfigError("adapter_dim must be positive")
        if not self.tie_embeddings:
            raise ConfigError("tie_embeddings is fixed to true")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class Scheme(enum.Enum):
    ALL = "all"
    ADAPTERS_AND_EMBEDDINGS = "adapters_and_embeddings"


EMBEDDING_NAMES = ("embeddings.token", "embeddings.position", "embeddings.language", "pred.bias")


def _layer_names(prefix, blocks, adapters):
    names = []
    for block, keys in blocks:
        names += [f"{prefix}.{block}.{k}" for k in keys]
    if adapters:
        for block in ("adapter_attn", "adapter_ffn"):
            names += [f"{prefix}.{block}.{k}" for k in ADAPTER_KEYS]
    return names


_ENC_BLOCKS = (("attn", ATTN_KEYS), ("ln_attn", LN_KEYS), ("ffn", FFN_KEYS), ("ln_ffn", LN_KEYS))
_DEC_BLOCKS = (("self_attn", ATTN_KEYS), ("ln_self", LN_KEYS), ("cross_attn", ATTN_KEYS),
               ("ln_cross", LN_KEYS), ("ffn", FFN_KEYS), ("ln_ffn", LN_KEYS))


def parameter_names(config: ModelConfig, kind: str) -> list[str]:
    """Canonical parameter order for a model of ``kind`` ("lm" or "nmt")."""
    adapters = config.adapter_dim is not None
    names = list(EMBEDDING_NAMES)
    for i in range(config.n_layers):
        names += _layer_names(f"encoder.layer{i}", _ENC_BLOCKS, adapters)
    if kind == "nmt":
        for i in range(config.n_layers):
            names += _layer_names(f"decoder.layer{i}", _DEC_BLOCKS, adapters)
    return names


def parameter_shape(name: str, config: ModelConfig) -> tuple[int, ...]:
    d, f, b = config.d_model, config.ffn_dim, config.adapter_dim
    leaf = name.rsplit(".", 1)[1]
    if name == "embeddings.token":
        return (config.vocab_size, d)
    if name == "embeddings.position":
        return (config.max_positions, d)
    if name == "embeddings.language":
        return (config.n_languages, d)
    if name == "pred.bias":
        return (config.vocab_size,)
    if leaf in ("wq", "wk", "wv", "wo"):
        return (d, d)
    return {"bq": (d,), "bk": (d,), "bv": (d,), "bo": (d,), "w1": (d, f), "b1": (f,), "w2": (f, d),
            "b2": (d,), "gain": (d,), "bias": (d,), "w_down": (d, b), "b_down": (b,),
            "w_up": (b, d), "b_up": (d,)}[leaf]


def _init_value(name, shape, config, gen):
    leaf = name.rsplit(".", 1)[1]
    dt = config.np_dtype
    if leaf == "gain":
        return np.ones(shape, dtype=dt)
    if leaf == "w_up" or leaf.startswith("b") or name == "pred.bias":
        return np.zeros(shape, dtype=dt)
    return (gen.standard_normal(shape) * config.init_std).astype(dt)


def is_frozen_under_adapters(name: str) -> bool:
    """Attention, feed-forward and layer-norm tensors; everything the
    ADAPTERS_AND_EMBEDDINGS scheme keeps fixed."""
    block = name.split(".")[2] if name.count(".") >= 3 else ""
    return block in ("attn", "self_attn", "cross_attn", "ffn") or block.startswith("ln_")


class _Model:
    kind = ""

    def __init__(self, config: ModelConfig, params: dict[str, Parameter], vocab: Vocabulary | None = None):
        self.config = config
        self.params = params
        self.vocab = vocab
        expected = parameter_names(config, self.kind)
        if list(params) != expected:
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ModelError(f"parameter set mismatch; missing={missing[:5]} extra={extra[:5]}")
        for name, p in params.items():
            if p.shape != parameter_shape(name, config):
                raise ModelError(f"{name}: shape {p.shape} != {parameter_shape(name, config)}")
        if vocab is not None and len(vocab) != config.vocab_size:
            raise VocabularyError(f"vocabulary has {len(vocab)} entries, embedding has {config.vocab_size} rows")

    # -- parameter bookkeeping
    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def named_parameters(self):
        return self.params.items()

    @property
    def token_embedding(self) -> Parameter:
        return self.params["embeddings.token"]

    @property
    def projection(self) -> Parameter:
        """Output projection weight; the very same object as the token embedding."""
        return self.params["embeddings.token"]

    @property
    def has_adapters(self) -> bool:
        return self.config.adapter_dim is not None

    def num_parameters(self, trainable_only=False) -> int:
        return sum(p.data.size for p in self.params.values() if p.trainable or not trainable_only)

    def trainable_names(self) -> list[str]:
        return [n for n, p in self.params.items() if p.trainable]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.params.items()}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_snapshot(self, snap: dict[str, np.ndarray]):
        for n, p in self.params.items():
            p.data[...] = snap[n]

    def copy(self):
        params = {n: Parameter(p.data.copy(), n, p.trainable) for n, p in self.params.items()}
        return type(self)(copy.deepcopy(self.config), params, self.vocab)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    # -- shared forward pieces
    def _gen(self, rng):
        return rng.stream("dropout") if rng is not None else None

    def embed(self, ids: np.ndarray, lang, training=False, rng=None) -> Tensor:
        cfg = self.config
        B, L = ids.shape
        if L > cfg.max_positions:
            raise ModelError(f"sequence length {L} exceeds max_positions={cfg.max_positions}")
        lang_ids = np.broadcast_to(np.asarray(lang, dtype=np.int64), (B,))
        if lang_ids.size and lang_ids.max() >= cfg.n_languages:
            raise ModelError(f"language index {int(lang_ids.max())} has no embedding row "
                             f"(n_languages={cfg.n_languages})")
        P = self.params
        x = T.embedding(P["embeddings.token"], ids)
        x = x + T.embedding(P["embeddings.position"], np.arange(L))
        x = x + T.reshape(T.embedding(P["embeddings.language"], lang_ids), (B, 1, cfg.d_model))
        return T.dropout(x, cfg.dropout, self._gen(rng), training)

    def logits(self, h: Tensor) -> Tensor:
        """``h @ E^T + b`` with ``E`` the (tied) token embedding."""
        E = self.params["embeddings.token"]
        return T.add(T.matmul(h, T.transpose(E, (1, 0))), self.params["pred.bias"])

    def _attention(self, pre, x, kv, mask, training, rng):
        cfg = self.config
        keep = None
        if training and cfg.attention_dropout > 0:
            B, L = x.shape[:2]
            shape = (B, cfg.n_heads, L, kv.shape[1])
            keep = (self._gen(rng).random(shape) >= cfg.attention_dropout).astype(x.dtype)
            keep *= x.dtype.type(1.0 / (1.0 - cfg.attention_dropout))
        weights = tuple(self.params[f"{pre}.{k}"] for k in ATTN_KEYS)
        return T.attention(x, kv, weights, cfg.n_heads, mask, keep)

    def _ffn(self, pre, x, training, rng):
        P = self.params
        h = T.gelu(_linear(x, P[pre + ".w1"], P[pre + ".b1"]))
        return _linear(h, P[pre + ".w2"], P[pre + ".b2"])

    def _ln(self, pre, x):
        return T.layer_norm(x, self.params[pre + ".gain"], self.params[pre + ".bias"])

    def _adapter(self, pre, x):
        if not self.has_adapters:
            return x
        P = self.params
        h = T.gelu(_linear(x, P[pre + ".w_down"], P[pre + ".b_down"]))
        return T.add(x, _linear(h, P[pre + ".w_up"], P[pre + ".b_up"]))

    def _sublayer(self, pre, x, out, training, rng, ln, adapter):
        out = T.dropout(out, self.config.dropout, self._gen(rng), training)
        x = self._ln(f"{pre}.{ln}", T.add(x, out))
        return self._adapter(f"{pre}.{adapter}", x) if adapter else x

    def encode(self, ids: np.ndarray, lang, training=False, rng=None) -> Tensor:
        """Run the encoder stack; returns hidden states of shape (B, L, d)."""
        ids = np.asarray(ids)
        x = self.embed(ids, lang, training, rng)
        mask = key_padding_mask(ids, self.config.np_dtype)
        for i in range(self.config.n_layers):
            pre = f"encoder.layer{i}"
            a = self._attention(pre + ".attn", x, x, mask, training, rng)
            x = self._sublayer(pre, x, a, training, rng, "ln_attn", "adapter_attn")
            f = self._ffn(pre + ".ffn", x, training, rng)
            x = self._sublayer(pre, x, f, training, rng, "ln_ffn", "adapter_ffn")
        return x


def _linear(x, w, b):
    return T.linear(x, w, b)


def key_padding_mask(ids: np.ndarray, dtype) -> np.ndarray:
    """Additive (B, 1, 1, L) mask hiding <pad> keys."""
    return np.where(ids == PAD_ID, dtype.type(NEG_INF), dtype.type(0))[:, None, None, :]


def causal_mask(L: int, dtype) -> np.ndarray:
    return np.triu(np.full((L, L), NEG_INF, dtype=dtype), k=1)[None, None]


class LmModel(_Model):
    kind = "lm"

    def forward(self, ids, lang, training=False, rng=None) -> Tensor:
        """Logits of shape (B, L, V)."""
        return self.logits(self.encode(ids, lang, training, rng))


class NmtModel(_Model):
    kind = "nmt"

    def decode(self, tgt_in: np.ndarray, lang, memory: Tensor, src_ids: np.ndarray, training=False,
               rng=None) -> Tensor:
        tgt_in = np.asarray(tgt_in)
        dt = self.config.np_dtype
        L = tgt_in.shape[1]
        self_mask = causal_mask(L, dt) + key_padding_mask(tgt_in, dt)
        mem_mask = key_padding_mask(np.asarray(src_ids), dt)
        x = self.embed(tgt_in, lang, training, rng)
        for i in range(self.config.n_layers):
            pre = f"decoder.layer{i}"
            a = self._attention(pre + ".self_attn", x, x, self_mask, training, rng)
            x = self._sublayer(pre, x, a, training, rng, "ln_self", "adapter_attn")
            c = self._attention(pre + ".cross_attn", x, memory, mem_mask, training, rng)
            x = self._sublayer(pre, x, c, training, rng, "ln_cross", None)
            f = self._ffn(pre + ".ffn", x, training, rng)
            x = self._sublayer(pre, x, f, training, rng, "ln_ffn", "adapter_ffn")
        return x

    def forward(self, src_ids, src_lang, tgt_in, tgt_lang, training=False, rng=None) -> Tensor:
        memory = self.encode(src_ids, src_lang, training, rng)
        return self.logits(self.decode(tgt_in, tgt_lang, memory, src_ids, training, rng))

    # -- inference with cached keys and values (no autodiff)
    def start_decoding(self, src_ids, src_lang, tgt_lang) -> DecoderState:
        src_ids = np.asarray(src_ids)
        with T.no_grad():
            memory = self.encode(src_ids, src_lang).data
        P = self.params
        H = self.config.n_heads
        kv = []
        for i in range(self.config.n_layers):
            pre = f"decoder.layer{i}.cross_attn"
            kv.append((_np_heads(_np_linear(memory, P, pre + ".wk", pre + ".bk"), H),
                       _np_heads(_np_linear(memory, P, pre + ".wv", pre + ".bv"), H)))
        if not 0 <= int(tgt_lang) < self.config.n_languages:
            raise ModelError(f"unknown language index {tgt_lang}")
        mask = key_padding_mask(src_ids, self.config.np_dtype)
        return DecoderState(kv, mask, [None] * self.config.n_layers, 0, int(tgt_lang))

    def step(self, state: DecoderState, tokens) -> tuple[np.ndarray, DecoderState]:
        """Feed one token per row; returns next-token logits (rows, V) and the
        advanced state. Equivalent to the last position of :meth:`decode`."""
        cfg = self.config
        P = self.params
        H = cfg.n_heads
        t = state.length
        if t >= cfg.max_positions:
            raise ModelError(f"sequence length {t + 1} exceeds max_positions={cfg.max_positions}")
        tokens = np.asarray(tokens, dtype=np.int64)
        x = (P["embeddings.token"].data[tokens] + P["embeddings.position"].data[t]
             + P["embeddings.language"].data[state.lang])[:, None, :]
        new_kv = []
        for i in range(cfg.n_layers):
            pre = f"decoder.layer{i}"
            sa = pre + ".self_attn"
            k = _np_heads(_np_linear(x, P, sa + ".wk", sa + ".bk"), H)
            v = _np_heads(_np_linear(x, P, sa + ".wv", sa + ".bv"), H)
            if state.self_kv[i] is not None:
                k = np.concatenate([state.self_kv[i][0], k], axis=2)
                v = np.concatenate([state.self_kv[i][1], v], axis=2)
            new_kv.append((k, v))
            q = _np_heads(_np_linear(x, P, sa + ".wq", sa + ".bq"), H)
            x = self._np_post(pre, x, _np_attend(q, k, v, None, P, sa), "ln_self", "adapter_attn")
            ca = pre + ".cross_attn"
            q = _np_heads(_np_linear(x, P, ca + ".wq", ca + ".bq"), H)
            mk, mv = state.memory_kv[i]
            x = self._np_post(pre, x, _np_attend(q, mk, mv, state.mem_mask, P, ca), "ln_cross", None)
            f = _np_linear(_np_gelu(_np_linear(x, P, pre + ".ffn.w1", pre + ".ffn.b1")), P,
                           pre + ".ffn.w2", pre + ".ffn.b2")
            x = self._np_post(pre, x, f, "ln_ffn", "adapter_ffn")
        logits = x[:, 0] @ P["embeddings.token"].data.T + P["pred.bias"].data
        return logits, DecoderState(state.memory_kv, state.mem_mask, new_kv, t + 1, state.lang)

    def _np_post(self, pre, x, out, ln, adapter):
        P = self.params
        x = _np_ln(x + out, P, f"{pre}.{ln}")
        if adapter and self.has_adapters:
            a = f"{pre}.{adapter}"
            h = _np_gelu(_np_linear(x, P, a + ".w_down", a + ".b_down"))
            x = x + _np_linear(h, P, a + ".w_up", a + ".b_up")
        return x


class DecoderState:
    """Cached keys/values for step-by-step decoding of one source batch.

    Row ``i`` of the state belongs to hypothesis ``i``; :meth:`select`
    reorders rows (beam search) and :meth:`NmtModel.step` appends one
    position to every row.
    """

    def __init__(self, memory_kv, mem_mask, self_kv, length, lang):
        self.memory_kv = memory_kv
        self.mem_mask = mem_mask
        self.self_kv = self_kv
        self.length = length
        self.lang = lang

    def select(self, rows) -> "DecoderState":
        rows = np.asarray(rows, dtype=np.int64)
        return DecoderState([(k[rows], v[rows]) for k, v in self.memory_kv], self.mem_mask[rows],
                            [(k[rows], v[rows]) for k, v in self.self_kv], self.length, self.lang)


def _np_linear(x, P, w, b):
    return x @ P[w].data + P[b].data


def _np_ln(x, P, pre):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + x.dtype.type(1e-12)) * P[pre + ".gain"].data + P[pre + ".bias"].data


def _np_heads(a, H):
    B, n, d = a.shape
    return a.reshape(B, n, H, d // H).transpose(0, 2, 1, 3)


def _np_attend(q, k, v, mask, P, pre):
    B, H, L, dh = q.shape
    z = q @ k.transpose(0, 1, 3, 2)
    z *= q.dtype.type(1.0 / math.sqrt(dh))
    if mask is not None:
        z += mask
    z -= z.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    ctx = (z @ v).transpose(0, 2, 1, 3).reshape(B, L, H * dh)
    return _np_linear(ctx, P, pre + ".wo", pre + ".bo")


def _np_gelu(x):
    return x * T.gaussian_cdf(x)


# ---------------------------------------------------------------- construction


def _fresh_params(config: ModelConfig, kind: str, rng: Rng) -> dict[str, Parameter]:
    gen = rng.stream("init")
    return {n: Parameter(_init_value(n, parameter_shape(n, config), config, gen), n)
            for n in parameter_names(config, kind)}


def build_lm(config: ModelConfig, vocab: Vocabulary | None, rng: Rng) -> LmModel:
    """Fresh masked LM: weights ~ N(0, init_std^2), LN gains 1, biases 0."""
    config.validate()
    return LmModel(config, _fresh_params(config, "lm", rng), vocab)


def build_nmt(config: ModelConfig, vocab: Vocabulary | None, rng: Rng) -> NmtModel:
    """Randomly initialized encoder-decoder (the no-pretraining baseline)."""
    config.validate()
    return NmtModel(config, _fresh_params(config, "nmt", rng), vocab)


def extend_embeddings(model: LmModel, old_vocab: Vocabulary, new_vocab: Vocabulary, rng: Rng) -> LmModel:
    """Grow the tied embedding/projection (and output bias) to ``new_vocab``.

    Old rows are kept bit-exact; new rows are drawn from N(0, s^2) where ``s``
    is the standard deviation of all existing embedding entries; the bias gets
    zeros. A one-language model also gains an LMR language row copied from the
    HMR row. Returns a new model; ``model`` is not modified.
    """
    n_old = len(old_vocab)
    if model.token_embedding.shape[0] != n_old:
        raise VocabularyError(f"model has {model.token_embedding.shape[0]} rows but old vocabulary has {n_old}")
    if new_vocab.tokens[:n_old] != old_vocab.tokens:
        raise VocabularyError("new vocabulary is not an extension of the old one (indices moved)")
    out = model.copy()
    cfg = out.config
    k = len(new_vocab) - n_old
    E = out.params["embeddings.token"]
    bias = out.params["pred.bias"]
    if k:
        sigma = float(E.data.astype(np.float64).std())
        rows = (rng.stream("init").standard_normal((k, cfg.d_model)) * sigma).astype(E.dtype)
        E.data = np.concatenate([E.data, rows])
        E.grad = np.zeros_like(E.data)
        bias.data = np.concatenate([bias.data, np.zeros(k, dtype=bias.dtype)])
        bias.grad = np.zeros_like(bias.data)
        cfg.vocab_size = len(new_vocab)
    if cfg.n_languages == 1:
        lang = out.params["embeddings.language"]
        lang.data = np.concatenate([lang.data, lang.data[:1]])
        lang.grad = np.zeros_like(lang.data)
        cfg.n_languages = 2
    out.vocab = new_vocab
    return out


def attach_adapters(model: _Model, adapter_dim: int, rng: Rng):
    """Insert two near-identity adapters (w_up = 0) into every layer."""
    if model.has_adapters:
        raise ModelError("adapters are already attached")
    cfg = copy.deepcopy(model.config)
    cfg.adapter_dim = adapter_dim
    cfg.validate()
    gen = rng.stream("init")
    params = {}
    for name in parameter_names(cfg, model.kind):
        if name in model.params:
            params[name] = model.params[name]
        else:
            params[name] = Parameter(_init_value(name, parameter_shape(name, cfg), cfg, gen), name)
    return type(model)(cfg, params, model.vocab)


def adapter_parameter_count(d_model: int, adapter_dim: int) -> int:
    """Parameters added per layer by two adapters."""
    return 2 * (2 * d_model * adapter_dim + adapter_dim + d_model)


def set_trainable(model: _Model, scheme: Scheme):
    scheme = Scheme(scheme)
    if scheme is Scheme.ADAPTERS_AND_EMBEDDINGS and not model.has_adapters:
        raise ModelError("ADAPTERS_AND_EMBEDDINGS requires attached adapters")
    for name, p in model.params.items():
        p.trainable = scheme is Scheme.ALL or not is_frozen_under_adapters(name)
    return model


def init_nmt_from_lm(lm: LmModel, rng: Rng) -> NmtModel:
    """Encoder-decoder whose encoder and decoder layers both start as copies of
    the LM layers; cross-attention (and its norm) is fresh."""
    cfg = copy.deepcopy(lm.config)
    gen = rng.stream("init")
    params = {}
    for name in parameter_names(cfg, "nmt"):
        if not name.startswith("decoder."):
            src = name
        else:
            _, layer, block, leaf = name.split(".")
            block = {"self_attn": "attn", "ln_self": "ln_attn"}.get(block, block)
            src = f"encoder.{layer}.{block}.{leaf}"
        if src in lm.params and not (".cross_attn." in name or ".ln_cross." in name):
            value = lm.params[src].data.copy()
        else:
            value = _init_value(name, parameter_shape(name, cfg), cfg, gen)
        params[name] = Parameter(value, name)
    return NmtModel(cfg, params, lm.vocab)


# ------------------------------------------------------------------ objectives


def mask_batch(batch: np.ndarray, rng: Rng, vocab_size: int, select_prob=0.15, mask_prob=0.8,
               random_prob=0.1):
    """BERT-style corruption. Returns ``(masked, targets)`` where ``targets``
    holds original ids at selected positions and IGNORE_INDEX elsewhere.

    <pad>, <s> and </s> are never selected. Random replacements are drawn
    uniformly from the non-special part of the vocabulary.
    """
    batch = np.asarray(batch)
    gen = rng.stream("masking")
    eligible = (batch != PAD_ID) & (batch != BOS_ID) & (batch != EOS_ID)
    u = gen.random(batch.shape)
    selected = eligible & (u < select_prob)
    action = gen.random(batch.shape)
    rand_tok = gen.integers(len(SPECIALS), max(vocab_size, len(SPECIALS) + 1), size=batch.shape)
    masked = batch.copy()
    to_mask = selected & (action < mask_prob)
    to_rand = selected & (action >= mask_prob) & (action < mask_prob + random_prob)
    masked[to_mask] = MASK_ID
    masked[to_rand] = rand_tok[to_rand]
    targets = np.where(selected, batch, IGNORE_INDEX)
    return masked, targets


def mlm_loss(model: LmModel, masked: np.ndarray, targets: np.ndarray, lang, training=True, rng=None) -> Tensor:
    """Mean cross-entropy over selected positions (zero if none are selected)."""
    masked = np.asarray(masked)
    targets = np.asarray(targets)
    flat_t = targets.reshape(-1)
    rows = np.nonzero(flat_t != IGNORE_INDEX)[0]
    h = model.encode(masked, lang, training, rng)
    if rows.size == 0:
        warnings.warn("mlm_loss: batch has no masked targets; loss is 0", RuntimeWarning)
        return T.mul(T.total(h), 0.0)
    h = T.index_rows(T.reshape(h, (-1, model.config.d_model)), rows)
    return T.cross_entropy(model.logits(h), flat_t[rows])


def nmt_loss(model: NmtModel, src: np.ndarray, tgt: np.ndarray, src_lang, tgt_lang, training=True, rng=None,
             label_smoothing=0.0) -> Tensor:
    """Teacher-forced cross-entropy; ``tgt`` rows are ``<s> ... </s>`` padded."""
    src = np.asarray(src)
    tgt = np.asarray(tgt)
    for lang in (src_lang, tgt_lang):
        if not 0 <= int(lang) < model.config.n_languages:
            raise ModelError(f"unknown language index {lang}")
    tgt_in, tgt_out = tgt[:, :-1], tgt[:, 1:]
    gold = np.where(tgt_out == PAD_ID, IGNORE_INDEX, tgt_out).reshape(-1)
    if not (gold != IGNORE_INDEX).any():
        raise ModelError("target batch is empty after padding")
    logits = model.forward(src, src_lang, tgt_in, tgt_lang, training, rng)
    return T.cross_entropy(T.reshape(logits, (-1, model.config.vocab_size)), gold,
                           label_smoothing=label_smoothing)


def pad_batch(seqs, max_len=None) -> np.ndarray:
    """Right-pad integer sequences with <pad>."""
    L = max(len(s) for s in seqs)
    if max_len is not None:
        L = min(L, max_len)
    out = np.full((len(seqs), L), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        s = s[:L]
        out[i, : len(s)] = s
    return out


def frame(ids) -> list[int]:
    return [BOS_ID, *ids, EOS_ID]
