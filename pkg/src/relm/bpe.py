"""Byte-pair encoding: learning, application, joint learning, and vocabulary extension.

Words are split into characters with ``</w>`` glued to the final one while
merges are learned and applied; emitted subwords instead carry the ``@@``
continuation marker on every non-final piece (the fastBPE convention).
"""

from __future__ import annotations

import enum
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .corpus import LanguageTag, TokenizedCorpus, TokenKind, make_sampler
from .errors import EmptyCorpusError, VocabularyError
from .rng import Rng

EOW = "</w>"
CONT = "@@"

PAD, UNK, BOS, EOS, MASK = "<pad>", "<unk>", "<s>", "</s>", "<mask>"
SPECIALS = (PAD, UNK, BOS, EOS, MASK)
PAD_ID, UNK_ID, BOS_ID, EOS_ID, MASK_ID = range(5)


@dataclass(frozen=True)
class MergeTable:
    merges: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        if len(set(self.merges)) != len(self.merges):
            raise ValueError("duplicate pair in merge table")

    def __len__(self):
        return len(self.merges)

    def __iter__(self):
        return iter(self.merges)

    def ranks(self) -> dict[tuple[str, str], int]:
        return {pair: i for i, pair in enumerate(self.merges)}

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for left, right in self.merges:
                f.write(f"{left} {right}\n")

    @classmethod
    def load(cls, path) -> "MergeTable":
        merges = []
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.rstrip("\n")
                if line:
                    left, right = line.split(" ")
                    merges.append((left, right))
        return cls(tuple(merges))


def _symbols(word: str) -> list[str]:
    syms = list(word)
    syms[-1] += EOW
    return syms


def _pairs(syms):
    return zip(syms, syms[1:])


def learn_bpe(word_freqs: Mapping[str, int], num_merges: int) -> MergeTable:
    """Classic frequency-ordered BPE learning.

    Each iteration merges the most frequent adjacent pair (weighted by word
    frequency); equal counts go to the lexicographically smallest pair.
    """
    words = [_symbols(w) for w in word_freqs]
    freqs = [int(c) for c in word_freqs.values()]
    pair_counts: dict[tuple[str, str], int] = defaultdict(int)
    where: dict[tuple[str, str], set[int]] = defaultdict(set)
    for i, syms in enumerate(words):
        for pair in _pairs(syms):
            pair_counts[pair] += freqs[i]
            where[pair].add(i)

    merges = []
    for _ in range(num_merges):
        if not pair_counts:
            break
        best = min(pair_counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        merges.append(best)
        left, right = best
        joined = left + right
        for i in sorted(where.pop(best, ())):
            syms = words[i]
            for pair in _pairs(syms):
                pair_counts[pair] -= freqs[i]
                if pair_counts[pair] <= 0:
                    del pair_counts[pair]
            merged, j = [], 0
            while j < len(syms):
                if j + 1 < len(syms) and syms[j] == left and syms[j + 1] == right:
                    merged.append(joined)
                    j += 2
                else:
                    merged.append(syms[j])
                    j += 1
            words[i] = merged
            for pair in _pairs(merged):
                pair_counts[pair] += freqs[i]
                where[pair].add(i)
        pair_counts.pop(best, None)
    return MergeTable(tuple(merges))


class BpeCodec:
    """Applies a merge table to words, memoizing segmentations."""

    def __init__(self, merges: MergeTable):
        self.merges = merges
        self._ranks = merges.ranks()
        self._cache: dict[str, list[str]] = {}

    def segment(self, word: str) -> list[str]:
        out = self._cache.get(word)
        if out is None:
            out = self._cache[word] = self._segment(word)
        return out

    def _segment(self, word):
        syms = _symbols(word)
        ranks = self._ranks
        while len(syms) > 1:
            best_rank, best = None, None
            for pair in _pairs(syms):
                r = ranks.get(pair)
                if r is not None and (best_rank is None or r < best_rank):
                    best_rank, best = r, pair
            if best is None:
                break
            left, right = best
            merged, j = [], 0
            while j < len(syms):
                if j + 1 < len(syms) and syms[j] == left and syms[j + 1] == right:
                    merged.append(left + right)
                    j += 2
                else:
                    merged.append(syms[j])
                    j += 1
            syms = merged
        syms[-1] = syms[-1][: -len(EOW)]
        return [s + CONT for s in syms[:-1]] + [syms[-1]]

    def apply_sentence(self, words: Iterable[str]) -> list[str]:
        out = []
        for w in words:
            out.extend(self.segment(w))
        return out

    def apply_corpus(self, corpus: TokenizedCorpus) -> TokenizedCorpus:
        return TokenizedCorpus(corpus.language, [self.apply_sentence(s) for s in corpus.sentences],
                               TokenKind.SUBWORD)


def apply_bpe(merges: MergeTable, word: str) -> list[str]:
    return BpeCodec(merges).segment(word)


def _allocate(total: int, probs: list[float]) -> list[int]:
    """Largest-remainder rounding of ``total * probs`` to integers summing to ``total``."""
    raw = [total * p for p in probs]
    base = [int(np.floor(r)) for r in raw]
    short = total - sum(base)
    order = sorted(range(len(probs)), key=lambda i: (-(raw[i] - base[i]), i))
    for i in order[:short]:
        base[i] += 1
    return base


def learn_joint_bpe(corpora: Mapping[LanguageTag, TokenizedCorpus], alpha: float, num_merges: int,
                    seed: int, sample_size: int | None = None) -> MergeTable:
    """Learn merges on an alpha-smoothed sample drawn from several corpora.

    Each language receives ``round(q_i * sample_size)`` sentences taken by
    cycling through a seeded permutation of its corpus. The default sample
    size is ``min corpus size * number of languages``.
    """
    for tag, c in corpora.items():
        if len(c) == 0:
            raise EmptyCorpusError(f"corpus for {tag} is empty")
    dist = make_sampler({t: len(c) for t, c in corpora.items()}, alpha)
    tags = list(corpora)
    if sample_size is None:
        sample_size = min(len(c) for c in corpora.values()) * len(tags)
    quotas = _allocate(sample_size, [dist.probabilities[t] for t in tags])
    rng = Rng(seed)
    freqs: dict[str, int] = defaultdict(int)
    for tag, quota in zip(tags, quotas):
        sents = corpora[tag].sentences
        gen = rng.stream(f"joint_bpe.{tag.id}")
        taken = 0
        while taken < quota:
            for idx in gen.permutation(len(sents))[: quota - taken]:
                for w in sents[idx]:
                    freqs[w] += 1
                taken += 1
    return learn_bpe(dict(sorted(freqs.items())), num_merges)


class Segment(enum.Enum):
    SPECIAL = "special"
    PRETRAINED = "pretrained"
    EXTENSION = "extension"


@dataclass
class Vocabulary:
    """Dense token/index bijection split into SPECIAL, PRETRAINED and EXTENSION ranges.

    ``pretrained_end`` is the first EXTENSION index (== ``len`` when there is
    no extension).
    """

    tokens: list[str]
    frequency: dict[str, int] = field(default_factory=dict)
    pretrained_end: int | None = None

    def __post_init__(self):
        if tuple(self.tokens[: len(SPECIALS)]) != SPECIALS:
            raise VocabularyError(f"vocabulary must start with {SPECIALS}")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise VocabularyError("duplicate token in vocabulary")
        if self.pretrained_end is None:
            self.pretrained_end = len(self.tokens)
        if not len(SPECIALS) <= self.pretrained_end <= len(self.tokens):
            raise VocabularyError(f"bad pretrained_end {self.pretrained_end}")

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def __eq__(self, other):
        return (isinstance(other, Vocabulary) and self.tokens == other.tokens
                and self.frequency == other.frequency and self.pretrained_end == other.pretrained_end)

    def segment_of(self, idx: int) -> Segment:
        if idx < len(SPECIALS):
            return Segment.SPECIAL
        return Segment.PRETRAINED if idx < self.pretrained_end else Segment.EXTENSION

    @property
    def regular_tokens(self) -> list[str]:
        return self.tokens[len(SPECIALS):]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        get = self.index.get
        return [get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def dumps(self) -> str:
        lines = []
        for i, tok in enumerate(self.tokens):
            lines.append(f"{tok} {i} {self.frequency.get(tok, 0)} {self.segment_of(i).value}\n")
        return "".join(lines)

    @classmethod
    def loads(cls, text: str) -> "Vocabulary":
        tokens, freq, pretrained_end = [], {}, None
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line:
                continue
            tok, idx, count, seg = line.rsplit(" ", 3)
            if int(idx) != len(tokens):
                raise VocabularyError(f"line {lineno}: index {idx} is not dense")
            if seg == Segment.EXTENSION.value and pretrained_end is None:
                pretrained_end = len(tokens)
            tokens.append(tok)
            if int(count):
                freq[tok] = int(count)
        return cls(tokens, freq, pretrained_end)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.dumps())

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            return cls.loads(f.read())


def _rank_tokens(freq: Mapping[str, int]) -> list[str]:
    return sorted(freq, key=lambda t: (-freq[t], t))


def build_vocabulary(corpus: TokenizedCorpus, merges: MergeTable | None = None) -> Vocabulary:
    """Segment ``corpus`` with ``merges`` (skip when the corpus is already
    SUBWORD) and index its distinct subwords by (frequency desc, token asc)."""
    if len(corpus) == 0:
        raise EmptyCorpusError("cannot build a vocabulary from an empty corpus")
    if corpus.token_kind is TokenKind.WORD:
        corpus = BpeCodec(merges or MergeTable()).apply_corpus(corpus)
    freq: dict[str, int] = defaultdict(int)
    for sent in corpus.sentences:
        for tok in sent:
            freq[tok] += 1
    for special in SPECIALS:
        freq.pop(special, None)
    ranked = _rank_tokens(freq)
    return Vocabulary(list(SPECIALS) + ranked, dict(freq))


@dataclass(frozen=True)
class ExtensionReport:
    size_hmr: int
    size_lmr: int
    overlap: int
    new_items: int

    def line(self) -> str:
        return (f"size_hmr={self.size_hmr} size_lmr={self.size_lmr} "
                f"overlap={self.overlap} new_items={self.new_items}")


def extend_vocabulary(v_hmr: Vocabulary, v_lmr: Vocabulary) -> tuple[Vocabulary, ExtensionReport]:
    """Union of both vocabularies with every ``v_hmr`` index left untouched.

    Tokens only in ``v_lmr`` are appended, ordered by their ``v_lmr``
    frequency (descending) and then by token.
    """
    if v_hmr.tokens[: len(SPECIALS)] != v_lmr.tokens[: len(SPECIALS)]:
        raise VocabularyError("vocabularies disagree on the special-token layout")
    hmr_set = set(v_hmr.regular_tokens)
    lmr_regular = v_lmr.regular_tokens
    new = [t for t in lmr_regular if t not in hmr_set]
    new_freq = {t: v_lmr.frequency.get(t, 0) for t in new}
    new = _rank_tokens(new_freq)
    report = ExtensionReport(size_hmr=len(hmr_set), size_lmr=len(lmr_regular),
                             overlap=len(lmr_regular) - len(new), new_items=len(new))
    if not new:
        return v_hmr, report
    freq = dict(v_hmr.frequency)
    freq.update(new_freq)
    return Vocabulary(v_hmr.tokens + new, freq, v_hmr.pretrained_end), report


def vocabulary_overlap(v_hmr: Vocabulary, v_lmr: Vocabulary) -> ExtensionReport:
    return extend_vocabulary(v_hmr, v_lmr)[1]


@dataclass(frozen=True)
class SegmentationStats:
    fertility: float
    char_split_rate: float
    token_count: int
    word_count: int


def segmentation_stats(corpus: TokenizedCorpus, merges: MergeTable) -> SegmentationStats:
    if len(corpus) == 0:
        raise EmptyCorpusError("segmentation_stats needs a nonempty corpus")
    codec = BpeCodec(merges)
    words = tokens = char_split = 0
    for sent in corpus.sentences:
        for w in sent:
            pieces = codec.segment(w)
            words += 1
            tokens += len(pieces)
            char_split += len(pieces) == len(w)
    if words == 0:
        raise EmptyCorpusError("corpus contains no words")
    return SegmentationStats(tokens / words, char_split / words, tokens, words)
