"""Corpus loading, 13a tokenization, length filtering and alpha-smoothed sampling."""

from __future__ import annotations

import enum
import logging
import re
import warnings
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np

from .errors import ConfigError, CorpusDecodeError, CorpusLoadError, EmptyCorpusError
from .rng import Rng

log = logging.getLogger(__name__)


class Role(enum.Enum):
    HMR = "hmr"
    LMR = "lmr"


@dataclass(frozen=True)
class LanguageTag:
    id: str
    role: Role

    @property
    def index(self) -> int:
        """Row of this language in the language-embedding table."""
        return 0 if self.role is Role.HMR else 1

    def __str__(self):
        return self.id


HMR = LanguageTag("hmr", Role.HMR)
LMR = LanguageTag("lmr", Role.LMR)


def check_pair(tags):
    roles = sorted(t.role.value for t in tags)
    if roles != ["hmr", "lmr"]:
        raise ConfigError(f"an experiment needs exactly one HMR and one LMR language, got {roles}")


class TokenKind(enum.Enum):
    WORD = "word"
    SUBWORD = "subword"


@dataclass
class RawCorpus:
    language: LanguageTag
    lines: list[str]
    source_path: str = ""

    def __len__(self):
        return len(self.lines)


@dataclass
class TokenizedCorpus:
    language: LanguageTag
    sentences: list[list[str]]
    token_kind: TokenKind = TokenKind.WORD
    removed: int = field(default=0, compare=False)

    def __len__(self):
        return len(self.sentences)

    def word_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for sent in self.sentences:
            for w in sent:
                counts[w] = counts.get(w, 0) + 1
        return counts

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for sent in self.sentences:
                f.write(" ".join(sent) + "\n")


# mteval-v13a, as in sacrebleu's Tokenizer13a
_13A_RULES = [
    (re.compile(r"([\{-\~\[-\` -\&\(-\+\:-\@\/])"), r" \1 "),
    (re.compile(r"([^0-9])([\.,])"), r"\1 \2 "),
    (re.compile(r"([\.,])([^0-9])"), r" \1 \2"),
    (re.compile(r"([0-9])(-)"), r"\1 \2 "),
]


def tokenize_13a(text: str) -> list[str]:
    line = text.replace("<skipped>", "").replace("-\n", "").replace("\n", " ")
    if "&" in line:
        line = (line.replace("&quot;", '"').replace("&amp;", "&")
                .replace("&lt;", "<").replace("&gt;", ">"))
    line = f" {line} "
    for pattern, repl in _13A_RULES:
        line = pattern.sub(repl, line)
    return line.split()


def load_corpus(path, language: LanguageTag) -> RawCorpus:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as exc:
        raise CorpusLoadError(str(path), exc.strerror or str(exc)) from exc
    lines = []
    for lineno, chunk in enumerate(raw.split(b"\n"), start=1):
        try:
            text = chunk.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorpusDecodeError(str(path), lineno, exc.reason) from None
        text = text.rstrip("\r")
        if text.strip():
            lines.append(text)
    log.info("loaded %d lines from %s", len(lines), path)
    return RawCorpus(language, lines, str(path))


def tokenize_corpus(raw: RawCorpus) -> TokenizedCorpus:
    return TokenizedCorpus(raw.language, [tokenize_13a(line) for line in raw.lines], TokenKind.WORD)


def read_tokenized(path, language: LanguageTag, kind=TokenKind.WORD) -> TokenizedCorpus:
    """Load a corpus that is already tokenized (tokens joined by single spaces)."""
    raw = load_corpus(path, language)
    return TokenizedCorpus(language, [line.split() for line in raw.lines], kind)


def filter_by_length(corpus: TokenizedCorpus, max_len: int = 100) -> TokenizedCorpus:
    """Drop (never truncate) sentences longer than ``max_len`` tokens."""
    if max_len <= 0:
        raise ConfigError(f"max_len must be positive, got {max_len}")
    kept = [s for s in corpus.sentences if len(s) <= max_len]
    removed = len(corpus.sentences) - len(kept)
    log.info("length filter (max_len=%d) removed %d of %d sentences", max_len, removed, len(corpus))
    if corpus.sentences and not kept:
        warnings.warn(f"length filter removed all {removed} sentences of {corpus.language}", RuntimeWarning)
    return TokenizedCorpus(corpus.language, kept, corpus.token_kind, removed=removed)


@dataclass(frozen=True)
class SamplingDistribution:
    alpha: float
    probabilities: Mapping[LanguageTag, float]

    @property
    def languages(self) -> list[LanguageTag]:
        return list(self.probabilities)


def make_sampler(counts: Mapping[LanguageTag, int], alpha: float = 0.5) -> SamplingDistribution:
    """Multinomial smoothing ``q_i = p_i^alpha / sum_j p_j^alpha`` with ``p_i = n_i / N``."""
    if not counts:
        raise ConfigError("make_sampler needs at least one language")
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    for tag, n in counts.items():
        if n <= 0:
            raise EmptyCorpusError(f"language {tag} has no data (count {n})")
    total = float(sum(counts.values()))
    weights = {tag: (n / total) ** alpha for tag, n in counts.items()}
    z = sum(weights.values())
    return SamplingDistribution(alpha, {tag: w / z for tag, w in weights.items()})


class _Cycler:
    """Walks a corpus through one seeded permutation per epoch."""

    def __init__(self, n: int, gen: np.random.Generator):
        self.n = n
        self.gen = gen
        self.order = gen.permutation(n)
        self.pos = 0

    def take(self, k: int) -> list[int]:
        out = []
        while len(out) < k:
            if self.pos == self.n:
                self.order = self.gen.permutation(self.n)
                self.pos = 0
            step = min(k - len(out), self.n - self.pos)
            out.extend(self.order[self.pos:self.pos + step].tolist())
            self.pos += step
        return out


def sample_batches(corpora: Mapping[LanguageTag, Sequence], dist: SamplingDistribution,
                   batch_size: int, seed: int) -> Iterator[tuple[LanguageTag, list]]:
    """Endless stream of single-language batches.

    ``corpora`` values may be :class:`TokenizedCorpus` objects or plain
    sequences of sentences. The stream depends only on the inputs and ``seed``.
    """
    if batch_size <= 0:
        raise ConfigError(f"batch_size must be positive, got {batch_size}")
    rng = Rng(seed)
    tags = [t for t in dist.probabilities if dist.probabilities[t] > 0]
    probs = np.array([dist.probabilities[t] for t in tags], dtype=np.float64)
    probs /= probs.sum()
    data = {}
    for t in tags:
        sents = corpora[t].sentences if isinstance(corpora[t], TokenizedCorpus) else corpora[t]
        if len(sents) == 0:
            raise EmptyCorpusError(f"corpus for {t} is empty")
        data[t] = (sents, _Cycler(len(sents), rng.stream(f"sampling.{t.id}")))
    chooser = rng.stream("sampling.language")
    while True:
        tag = tags[int(chooser.choice(len(tags), p=probs))] if len(tags) > 1 else tags[0]
        sents, cyc = data[tag]
        yield tag, [sents[i] for i in cyc.take(batch_size)]
