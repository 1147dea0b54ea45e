"""Small builders shared by the test modules."""

from __future__ import annotations

import numpy as np

from relm.bpe import SPECIALS, Vocabulary
from relm.rng import Rng
from relm.transformer import ModelConfig, build_lm, build_nmt, frame, pad_batch


def toy_vocab(n_regular: int, prefix="t") -> Vocabulary:
    tokens = [f"{prefix}{i}" for i in range(n_regular)]
    return Vocabulary(list(SPECIALS) + tokens, {t: n_regular - i for i, t in enumerate(tokens)})


def tiny_config(vocab_size, **kw) -> ModelConfig:
    base = dict(d_model=8, n_layers=2, n_heads=2, ffn_dim=16, max_positions=12, dropout=0.0)
    base.update(kw)
    return ModelConfig(vocab_size=vocab_size, **base)


def tiny_lm(n_regular=10, seed=0, **kw):
    v = toy_vocab(n_regular)
    return build_lm(tiny_config(len(v), **kw), v, Rng(seed))


def tiny_nmt(n_regular=10, seed=0, **kw):
    v = toy_vocab(n_regular)
    kw.setdefault("n_languages", 2)
    return build_nmt(tiny_config(len(v), **kw), v, Rng(seed))


def random_sentences(n, vocab_size, rng, min_len=1, max_len=6):
    out = []
    for _ in range(n):
        k = int(rng.integers(min_len, max_len + 1))
        out.append(frame(rng.integers(len(SPECIALS), vocab_size, size=k).tolist()))
    return out


def random_batch(n, vocab_size, seed=0, **kw):
    return pad_batch(random_sentences(n, vocab_size, np.random.default_rng(seed), **kw))
