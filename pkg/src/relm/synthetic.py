"""Synthetic language pairs with a known word-level cipher.

An HMR "language" is a seeded word bigram process over invented words. Its
LMR partner is the same process pushed through a bijective cipher, so every
LMR sentence has exactly one correct translation. Two ciphers exist:

* ``WORD_SUBSTITUTION`` swaps each word for another invented word over the
  same alphabet;
* ``TRANSLITERATION`` rewrites each word letter by letter into a disjoint
  (Cyrillic) alphabet, which makes any HMR-only subword table useless on
  LMR text.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ConfigError

HMR_ALPHABET = "abcdefghijklmnopqrstuvwxyz"
LMR_ALPHABET = "абвгдежзийклмнопрстуфхцчшщ"  # 26 Cyrillic letters, disjoint from Latin


class Cipher(enum.Enum):
    WORD_SUBSTITUTION = "word_substitution"
    TRANSLITERATION = "transliteration"


@dataclass
class SyntheticPairSpec:
    vocab_size: int = 100
    min_len: int = 3
    max_len: int = 12
    hmr_n: int = 5000
    lmr_n: int = 1000
    dev_n: int = 200
    parallel_n: int = 0
    cipher: Cipher = Cipher.WORD_SUBSTITUTION
    successors: int = 4
    letter_shift: int = 0
    seed: int = 0

    def __post_init__(self):
        self.cipher = Cipher(self.cipher)
        self.validate()

    def validate(self):
        if self.vocab_size < 10:
            raise ConfigError(f"vocab_size must be >= 10, got {self.vocab_size}")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError(f"sentence length range [{self.min_len}, {self.max_len}] is empty")
        for name in ("hmr_n", "lmr_n", "dev_n", "parallel_n"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 1 <= self.successors <= self.vocab_size:
            raise ConfigError("successors must lie in [1, vocab_size]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cipher"] = self.cipher.value
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "SyntheticPairSpec":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SyntheticPair:
    spec: SyntheticPairSpec
    cipher: dict[str, str]
    hmr: list[str]
    lmr: list[str]
    dev_lmr: list[str]
    dev_hmr: list[str]
    parallel_lmr: list[str] = field(default_factory=list)
    parallel_hmr: list[str] = field(default_factory=list)

    def encipher(self, sentence: str) -> str:
        return " ".join(self.cipher[w] for w in sentence.split())

    def save(self, out_dir) -> dict[str, Path]:
        """Write one file per corpus (one sentence per line); returns the paths."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = {"hmr": self.hmr, "lmr": self.lmr, "dev_lmr": self.dev_lmr, "dev_hmr": self.dev_hmr}
        if self.spec.parallel_n:
            files.update(parallel_lmr=self.parallel_lmr, parallel_hmr=self.parallel_hmr)
        paths = {}
        for name, lines in files.items():
            path = out / f"{name}.txt"
            path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
            paths[name] = path
        return paths


def _invent_words(n: int, alphabet: str, gen: np.random.Generator, avoid=()) -> list[str]:
    words: list[str] = []
    seen = set(avoid)
    while len(words) < n:
        length = int(gen.integers(2, 8))
        w = "".join(alphabet[i] for i in gen.integers(0, len(alphabet), size=length))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


class _BigramProcess:
    """Zipfian start distribution; each word has a few uniformly chosen
    successors with Zipfian weights plus a small floor over the whole
    vocabulary. Uniform successor choice keeps any single word from
    dominating the text."""

    def __init__(self, n: int, successors: int, gen: np.random.Generator):
        ranks = np.arange(1, n + 1, dtype=np.float64)
        zipf = 1.0 / ranks
        self.start = zipf[gen.permutation(n)]
        self.start /= self.start.sum()
        self.trans = np.full((n, n), 0.02 / n)
        for i in range(n):
            nxt = gen.choice(n, size=successors, replace=False)
            self.trans[i, nxt] += 0.98 * zipf[:successors] / zipf[:successors].sum()
        self.trans /= self.trans.sum(axis=1, keepdims=True)
        self.cum_start = np.cumsum(self.start)
        self.cum_trans = np.cumsum(self.trans, axis=1)

    def sample(self, length: int, gen: np.random.Generator) -> list[int]:
        u = gen.random(length)
        w = min(int(np.searchsorted(self.cum_start, u[0], side="right")), len(self.start) - 1)
        out = [w]
        for k in range(1, length):
            w = min(int(np.searchsorted(self.cum_trans[w], u[k], side="right")), len(self.start) - 1)
            out.append(w)
        return out


def gen_synthetic(spec: SyntheticPairSpec) -> SyntheticPair:
    """Draw HMR, LMR, dev and (optionally) parallel sets with disjoint sentences."""
    spec.validate()
    # Independent streams, so the HMR side does not depend on the cipher.
    seq = np.random.SeedSequence(spec.seed)
    word_gen, process_gen, gen, cipher_gen = (np.random.Generator(np.random.PCG64(s)) for s in seq.spawn(4))
    words = _invent_words(spec.vocab_size, HMR_ALPHABET, word_gen)
    if spec.cipher is Cipher.TRANSLITERATION:
        table = str.maketrans(HMR_ALPHABET, LMR_ALPHABET)
        lmr_words = [w.translate(table) for w in words]
    elif spec.letter_shift:
        letters = "".join(cipher_gen.choice(list(HMR_ALPHABET), size=spec.letter_shift, replace=False))
        table = str.maketrans(letters, letters[1:] + letters[:1])
        lmr_words = [w.translate(table) for w in words]
    else:
        lmr_words = _invent_words(spec.vocab_size, HMR_ALPHABET, cipher_gen, avoid=words)
    cipher = dict(zip(words, lmr_words))
    process = _BigramProcess(spec.vocab_size, spec.successors, process_gen)

    used: set[str] = set()

    def draw(n: int) -> list[str]:
        out = []
        attempts = 0
        while len(out) < n:
            attempts += 1
            if attempts > 1000 * (n + 1):
                raise ConfigError("could not draw enough distinct sentences; enlarge vocab_size or lengths")
            length = int(gen.integers(spec.min_len, spec.max_len + 1))
            s = " ".join(words[i] for i in process.sample(length, gen))
            if s not in used:
                used.add(s)
                out.append(s)
        return out

    hmr = draw(spec.hmr_n)
    lmr_src = draw(spec.lmr_n)
    dev = draw(spec.dev_n)
    par = draw(spec.parallel_n)
    pair = SyntheticPair(spec, cipher, hmr, [], [], dev)
    pair.lmr = [pair.encipher(s) for s in lmr_src]
    pair.dev_lmr = [pair.encipher(s) for s in dev]
    pair.parallel_hmr = par
    pair.parallel_lmr = [pair.encipher(s) for s in par]
    return pair
