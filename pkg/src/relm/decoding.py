"""Greedy and beam decoding, detokenization, and masked perplexity."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .bpe import BOS_ID, CONT, EOS_ID, PAD_ID, SPECIALS
from .errors import EmptyCorpusError
from .rng import Rng
from .tensor import Tensor, log_softmax_np, no_grad
from .transformer import IGNORE_INDEX, LmModel, NmtModel, mask_batch, pad_batch


@dataclass
class Hypothesis:
    tokens: list[int]
    log_prob: float
    finished: bool

    def score(self, length_penalty: float) -> float:
        return self.log_prob / (max(len(self.tokens), 1) ** length_penalty)


def default_max_len(src_len: int, cap: int) -> int:
    return min(cap, int(1.5 * src_len) + 5)


def _logprobs(logits: np.ndarray) -> np.ndarray:
    return log_softmax_np(logits.astype(np.float64))


def greedy_decode_batch(model: NmtModel, srcs: Sequence[Sequence[int]], src_lang, tgt_lang,
                        max_len: int | None = None) -> list[list[int]]:
    """Argmax decoding of a batch of framed source id sequences.

    Returns the emitted tokens of each sentence without ``<s>`` and ``</s>``.
    Ties in the argmax go to the lowest index.
    """
    cap = model.config.max_positions - 1
    src = pad_batch([list(s) for s in srcs])
    B = src.shape[0]
    if max_len is None:  # per sentence, as beam_search does
        limits = np.array([default_max_len(len(s), cap) for s in srcs])
    else:
        limits = np.full(B, min(max_len, cap))
    state = model.start_decoding(src, src_lang, tgt_lang)
    last = np.full(B, BOS_ID, dtype=np.int64)
    cum = np.zeros(B)
    done = limits <= 0
    out = []
    for t in range(int(limits.max(initial=0))):
        logits, state = model.step(state, last)
        # Same arithmetic as a width-1 beam so the two agree exactly.
        scores = cum[:, None] + _logprobs(logits)
        nxt = np.argmax(scores, axis=-1)
        cum = scores[np.arange(B), nxt]
        out.append(np.where(done, -1, nxt))
        last = np.where(done, PAD_ID, nxt)
        done |= (last == EOS_ID) | (t + 1 >= limits)
        if done.all():
            break
    result = []
    for row in (np.stack(out, axis=1) if out else np.zeros((B, 0), dtype=np.int64)):
        toks = []
        for t in row.tolist():
            if t in (EOS_ID, -1):
                break
            toks.append(t)
        result.append(toks)
    return result


def greedy_decode(model: NmtModel, src: Sequence[int], tgt_lang, max_len: int, src_lang=None) -> list[int]:
    if not len(src):
        raise ValueError("greedy_decode needs a nonempty source")
    src_lang = (1 - int(tgt_lang)) if src_lang is None else src_lang
    return greedy_decode_batch(model, [src], src_lang, tgt_lang, max_len)[0]


StepFn = Callable[[list[list[int]], list[int]], np.ndarray]


def beam_search_core(step_fn: StepFn, beam: int, max_len: int, length_penalty: float = 1.0,
                     bos: int = BOS_ID, eos: int = EOS_ID) -> Hypothesis:
    """Model-agnostic beam search.

    ``step_fn(prefixes, parents)`` maps the alive prefixes (each starting with
    ``bos``) to a (len(prefixes), V) array of next-token log-probabilities;
    ``parents[i]`` is the row of the previous call that prefix ``i`` extends
    (empty on the first call). Candidates are ranked by (log-prob desc, token
    sequence asc); finished hypotheses are compared by
    ``log_prob / len ** length_penalty``. Search stops once ``beam``
    hypotheses have finished or at ``max_len`` tokens.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    alive = [Hypothesis([], 0.0, False)]
    parents: list[int] = []
    finished: list[Hypothesis] = []
    for _ in range(max_len):
        logp = np.asarray(step_fn([[bos] + h.tokens for h in alive], parents), dtype=np.float64)
        scores = np.array([h.log_prob for h in alive])[:, None] + logp
        flat = scores.ravel()
        keep = min(2 * beam, flat.size)
        cutoff = np.partition(flat, flat.size - keep)[flat.size - keep]
        idx = np.nonzero(flat >= cutoff)[0]
        V = logp.shape[1]
        cands = sorted(((float(flat[i]), alive[i // V].tokens + [int(i % V)], int(i // V)) for i in idx),
                       key=lambda c: (-c[0], c[1]))
        new_alive, parents = [], []
        for score, toks, parent in cands:
            if toks[-1] == eos:
                finished.append(Hypothesis(toks[:-1], score, True))
            else:
                new_alive.append(Hypothesis(toks, score, False))
                parents.append(parent)
            if len(new_alive) == beam or len(finished) >= beam:
                break
        alive = new_alive
        if len(finished) >= beam or not alive:
            break
    pool = finished if finished else alive

    def key(h):
        n = len(h.tokens) + (1 if h.finished else 0)
        return (-(h.log_prob / (max(n, 1) ** length_penalty)), h.tokens)

    return min(pool, key=key)


def beam_search(model: NmtModel, src: Sequence[int], tgt_lang, beam: int = 5, max_len: int | None = None,
                length_penalty: float = 1.0, src_lang=None) -> list[int]:
    """Best hypothesis (content tokens only) for one framed source sentence."""
    src_lang = (1 - int(tgt_lang)) if src_lang is None else src_lang
    cap = model.config.max_positions - 1
    max_len = min(default_max_len(len(src), cap) if max_len is None else max_len, cap)
    state = model.start_decoding(np.asarray([list(src)], dtype=np.int64), src_lang, tgt_lang)

    def step(prefixes, parents):
        nonlocal state
        if parents:
            state = state.select(parents)
        logits, state = model.step(state, [p[-1] for p in prefixes])
        return _logprobs(logits)

    return beam_search_core(step, beam, max_len, length_penalty).tokens


def translate(model: NmtModel, srcs, src_lang, tgt_lang, beam: int = 1, batch_size: int = 32,
              max_len: int | None = None) -> list[list[int]]:
    """Decode many framed sources; ``beam == 1`` uses batched greedy search."""
    out = []
    if beam == 1:
        for i in range(0, len(srcs), batch_size):
            out.extend(greedy_decode_batch(model, srcs[i:i + batch_size], src_lang, tgt_lang, max_len))
    else:
        for s in srcs:
            out.append(beam_search(model, s, tgt_lang, beam, max_len, src_lang=src_lang))
    return out


def detokenize(subwords: Sequence[str]) -> str:
    """Undo BPE: glue ``@@``-marked pieces and drop special tokens."""
    toks = [t for t in subwords if t not in SPECIALS]
    text = " ".join(toks).replace(CONT + " ", "")
    if text.endswith(CONT):
        text = text[: -len(CONT)]
    return text


def masked_perplexity(model: LmModel, sentences: Sequence[Sequence[int]], lang, seed: int,
                      batch_size: int = 32) -> float:
    """exp(mean NLL over masked positions); masks depend only on ``seed``."""
    if not len(sentences):
        raise EmptyCorpusError("masked_perplexity needs a nonempty dev corpus")
    rng = Rng(seed)
    nll = 0.0
    count = 0
    with no_grad():
        for i in range(0, len(sentences), batch_size):
            batch = pad_batch([list(s) for s in sentences[i:i + batch_size]])
            masked, targets = mask_batch(batch, rng, model.config.vocab_size)
            flat = targets.reshape(-1)
            rows = np.nonzero(flat != IGNORE_INDEX)[0]
            if rows.size == 0:
                continue
            h = model.encode(masked, lang).data.reshape(-1, model.config.d_model)[rows]
            logp = log_softmax_np(model.logits(Tensor(h)).data.astype(np.float64))
            nll -= float(logp[np.arange(rows.size), flat[rows]].sum())
            count += rows.size
    if count == 0:
        return float("nan")
    return math.exp(nll / count)
