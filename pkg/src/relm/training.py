"""The three training phases: MLM pretraining, LM fine-tuning, and NMT training.

Every phase is a pure function of (model, data, config, seed): randomness is
drawn from named substreams of ``Rng(cfg.seed).child(phase)``. Phases return
the model restored to its best dev evaluation together with the metrics log.
"""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .bleu import bleu
from .bpe import EOS_ID, MASK_ID, Vocabulary
from .checkpoint import save_checkpoint
from .corpus import HMR, LMR, LanguageTag, TokenizedCorpus, make_sampler, sample_batches
from .decoding import detokenize, greedy_decode_batch, masked_perplexity
from .errors import ConfigError, EmptyCorpusError, ModelError, VocabularyError
from .optim import Adam, inv_sqrt_lr
from .rng import Rng
from .transformer import (IGNORE_INDEX, LmModel, NmtModel, Scheme, frame, mask_batch, mlm_loss, nmt_loss,
                          pad_batch, set_trainable)

log = logging.getLogger(__name__)


class FinetuneScheme(enum.Enum):
    FULL = "full"
    ADAPTERS = "adapters"


class LanguageSet(enum.Enum):
    LMR_ONLY = "lmr_only"
    LMR_AND_HMR = "lmr_and_hmr"


@dataclass
class NoiseConfig:
    shuffle_k: float = 3
    p_drop: float = 0.1
    p_blank: float = 0.1

    def validate(self):
        if self.shuffle_k < 0:
            raise ConfigError("shuffle_k must be >= 0")
        if not 0.0 <= self.p_drop < 1.0:
            raise ConfigError("p_drop must lie in [0, 1)")
        if not 0.0 <= self.p_blank <= 1.0:
            raise ConfigError("p_blank must lie in [0, 1]")


@dataclass
class TrainConfig:
    base_lr: float = 1e-4
    lr_schedule: str = "constant"
    warmup: int = 4000
    batch_size: int = 32
    max_steps: int = 100_000
    checkpoint_every_sentences: int = 200_000
    eval_every_updates: int = 3000
    patience: int = 10
    alpha: float = 0.5
    seed: int = 0
    dev_seed: int = 1234
    clip_norm: float = 5.0
    label_smoothing: float = 0.0
    max_len: int = 100
    scheme: FinetuneScheme = FinetuneScheme.FULL
    languages: LanguageSet = LanguageSet.LMR_AND_HMR
    directions: str = "both"
    noise: NoiseConfig = field(default_factory=NoiseConfig)

    def __post_init__(self):
        self.scheme = FinetuneScheme(self.scheme)
        self.languages = LanguageSet(self.languages)
        if isinstance(self.noise, Mapping):
            self.noise = NoiseConfig(**self.noise)
        self.validate()

    def validate(self):
        for name in ("batch_size", "checkpoint_every_sentences", "eval_every_updates", "patience", "warmup",
                     "max_len"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0")
        if self.lr_schedule not in ("constant", "inv_sqrt"):
            raise ConfigError(f"lr_schedule must be 'constant' or 'inv_sqrt', got {self.lr_schedule!r}")
        if self.directions not in ("both", "lmr2hmr", "hmr2lmr"):
            raise ConfigError(f"directions must be both, lmr2hmr or hmr2lmr, got {self.directions!r}")
        if not 0.0 <= self.label_smoothing <= 0.2:
            raise ConfigError("label_smoothing must lie in [0, 0.2]")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        self.noise.validate()

    def lr(self, step: int) -> float:
        if self.lr_schedule == "inv_sqrt":
            return inv_sqrt_lr(step, self.base_lr, self.warmup)
        return self.base_lr

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scheme"] = self.scheme.value
        d["languages"] = self.languages.value
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class MetricsRecord:
    phase: str
    step: int
    sentences_seen: int
    metric_name: str
    value: float
    is_best: bool

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


class MetricsLog:
    """Append-only list of records, mirrored to a JSON-lines file when given a path."""

    def __init__(self, path=None):
        self.records: list[MetricsRecord] = []
        self.path = Path(path) if path else None

    def append(self, rec: MetricsRecord):
        if self.records and self.records[-1].phase == rec.phase and rec.step < self.records[-1].step:
            raise ValueError("metrics steps must be monotone within a phase")
        self.records.append(rec)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(rec.to_json() + "\n")

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)

    @staticmethod
    def read(path) -> list[MetricsRecord]:
        with open(path, encoding="utf-8") as f:
            return [MetricsRecord(**json.loads(line)) for line in f if line.strip()]


class StopMode(enum.Enum):
    MIN = "min"
    MAX = "max"


@dataclass
class EarlyStopper:
    mode: StopMode
    patience: int
    best: float | None = None
    since_best: int = 0

    def improves(self, value: float) -> bool:
        if self.best is None:
            return True
        return value > self.best if self.mode is StopMode.MAX else value < self.best


def stopper_update(s: EarlyStopper, value: float) -> tuple[EarlyStopper, bool]:
    """Strict-improvement patience rule. Returns ``(new_state, should_stop)``."""
    if not math.isfinite(value):
        raise ValueError(f"stopper_update needs a finite value, got {value}")
    if s.improves(value):
        new = EarlyStopper(s.mode, s.patience, value, 0)
    else:
        new = EarlyStopper(s.mode, s.patience, s.best, s.since_best + 1)
    return new, new.since_best >= new.patience


def dae_noise(tokens: Sequence[int], noise: NoiseConfig, gen: np.random.Generator) -> list[int]:
    """Local shuffle (displacement <= shuffle_k), word drop (keeps >= 1), blanking."""
    x = np.asarray(tokens, dtype=np.int64)
    n = len(x)
    if n == 0:
        return []
    if noise.shuffle_k > 0:
        keys = np.arange(n) + gen.uniform(0, noise.shuffle_k, size=n)
        x = x[np.argsort(keys, kind="stable")]
    if noise.p_drop > 0:
        keep = gen.random(n) >= noise.p_drop
        if not keep.any():
            keep[gen.integers(n)] = True
        x = x[keep]
    if noise.p_blank > 0:
        blank = gen.random(len(x)) < noise.p_blank
        x = np.where(blank, MASK_ID, x)
    return x.tolist()


# ------------------------------------------------------------------ data prep


def encode_sentences(corpus: TokenizedCorpus | Sequence[Sequence[str]], vocab: Vocabulary,
                     max_len: int | None = None) -> list[list[int]]:
    """Numericalize and frame with ``<s> ... </s>``; sentences longer than
    ``max_len`` tokens are dropped."""
    sents = corpus.sentences if isinstance(corpus, TokenizedCorpus) else corpus
    out = []
    for s in sents:
        if max_len is not None and len(s) > max_len:
            continue
        out.append(frame(vocab.encode(s)))
    return out


@dataclass
class DevPairs:
    """Dev set for translation: framed source ids plus raw reference strings."""

    src: list[list[int]]
    refs: list[str]
    src_lang: LanguageTag = LMR
    tgt_lang: LanguageTag = HMR

    def __post_init__(self):
        if len(self.src) != len(self.refs):
            raise ValueError("dev sources and references differ in length")


def make_parallel(lmr: Sequence[list[int]], hmr: Sequence[list[int]]) -> list[tuple[list[int], list[int]]]:
    """Zip line-aligned sides into ``(lmr, hmr)`` pairs."""
    if len(lmr) != len(hmr):
        raise ValueError(f"misaligned parallel corpus: {len(lmr)} LMR lines vs {len(hmr)} HMR lines")
    return list(zip(lmr, hmr))


BatchHook = Callable[[str, str, LanguageTag], None]


def _noop_hook(phase, objective, lang):
    pass


class _Evaluator:
    """Tracks the stopping rule and the best snapshot; writes checkpoints."""

    def __init__(self, phase, model, mode, cfg, metric_name, metrics, out_dir, optimizer):
        self.phase = phase
        self.model = model
        self.metric_name = metric_name
        self.metrics = metrics
        self.stopper = EarlyStopper(mode, cfg.patience)
        self.best_snapshot = None
        self.out_dir = Path(out_dir) if out_dir else None
        self.optimizer = optimizer
        self.seed = cfg.seed
        self.last_step = None

    def record(self, value, step, seen) -> bool:
        improved = self.stopper.improves(value)
        self.stopper, stop = stopper_update(self.stopper, value)
        self.metrics.append(MetricsRecord(self.phase, step, seen, self.metric_name, float(value), improved))
        log.info("%s step %d: %s=%.4f%s", self.phase, step, self.metric_name, value, " (best)" if improved else "")
        if improved:
            self.best_snapshot = self.model.snapshot()
        if self.out_dir:
            meta = {"phase": self.phase, "step": step, "seed": self.seed, "sentences_seen": seen}
            save_checkpoint(self.out_dir / f"{self.phase}.last.ckpt", self.model, self.optimizer, meta)
            if improved:
                save_checkpoint(self.out_dir / f"{self.phase}.best.ckpt", self.model, None, meta)
        self.last_step = step
        return stop

    def finish(self):
        if self.best_snapshot is not None:
            self.model.load_snapshot(self.best_snapshot)


def _check_rows(model, vocab):
    if model.config.vocab_size != len(vocab):
        raise VocabularyError(f"model has {model.config.vocab_size} embedding rows but the vocabulary has "
                              f"{len(vocab)} entries (was extend_embeddings applied?)")


def _lm_loop(phase, model: LmModel, data: Mapping[LanguageTag, list[list[int]]], dev: list[list[int]],
             dev_lang: LanguageTag, cfg: TrainConfig, out_dir, on_batch, metrics):
    if cfg.max_steps == 0:
        return model, metrics
    for tag, sents in data.items():
        if not sents:
            raise EmptyCorpusError(f"{phase}: corpus for {tag} is empty")
    if not dev:
        raise EmptyCorpusError(f"{phase}: dev corpus is empty")
    rng = Rng(cfg.seed).child(phase)
    params = [p for p in model.parameters()]
    opt = Adam(params, lr=cfg.base_lr, clip_norm=cfg.clip_norm)
    dist = make_sampler({t: len(s) for t, s in data.items()}, cfg.alpha)
    stream = sample_batches(data, dist, cfg.batch_size, rng.child("batches").seed)
    ev = _Evaluator(phase, model, StopMode.MIN, cfg, "dev_ppl", metrics, out_dir, opt)
    V = model.config.vocab_size
    seen = 0
    step = 0
    stop = False
    while step < cfg.max_steps and not stop:
        tag, batch = next(stream)
        on_batch(phase, "mlm", tag)
        ids = pad_batch(batch)
        masked, targets = mask_batch(ids, rng, V)
        step += 1
        if (targets != IGNORE_INDEX).any():
            loss = mlm_loss(model, masked, targets, tag.index, training=True, rng=rng)
            loss.backward()
            opt.step(cfg.lr(step))
        before = seen
        seen += len(batch)
        if seen // cfg.checkpoint_every_sentences > before // cfg.checkpoint_every_sentences:
            ppl = masked_perplexity(model, dev, dev_lang.index, cfg.dev_seed)
            stop = ev.record(ppl, step, seen)
    if ev.last_step != step:
        ev.record(masked_perplexity(model, dev, dev_lang.index, cfg.dev_seed), step, seen)
    ev.finish()
    return model, metrics


def pretrain_mlm(model: LmModel, hmr_corpus: list[list[int]], dev_corpus: list[list[int]], cfg: TrainConfig,
                 out_dir=None, on_batch: BatchHook = _noop_hook, metrics: MetricsLog | None = None):
    """Masked-LM training on HMR data only, constant learning rate.

    Dev masked perplexity is evaluated each time another
    ``checkpoint_every_sentences`` sentences have been processed.
    """
    metrics = metrics if metrics is not None else MetricsLog()
    set_trainable(model, Scheme.ALL)
    return _lm_loop("pretrain", model, {HMR: hmr_corpus}, dev_corpus, HMR, cfg, out_dir, on_batch, metrics)


def finetune_lm(model: LmModel, corpora: Mapping[LanguageTag, list[list[int]]], dev_lmr: list[list[int]],
                extended_vocab: Vocabulary, cfg: TrainConfig, out_dir=None, on_batch: BatchHook = _noop_hook,
                metrics: MetricsLog | None = None):
    """Continue MLM training on LMR (optionally plus HMR) data.

    ``cfg.scheme`` picks full fine-tuning or adapters-plus-embeddings; the
    early-stopping metric is always dev LMR masked perplexity.
    """
    metrics = metrics if metrics is not None else MetricsLog()
    _check_rows(model, extended_vocab)
    if model.config.n_languages < 2:
        raise ModelError("fine-tuning needs an LMR language embedding (apply extend_embeddings first)")
    if cfg.scheme is FinetuneScheme.ADAPTERS:
        if not model.has_adapters:
            raise ModelError("scheme=adapters but the model has no adapters attached")
        set_trainable(model, Scheme.ADAPTERS_AND_EMBEDDINGS)
    else:
        set_trainable(model, Scheme.ALL)
    data = {LMR: corpora[LMR]}
    if cfg.languages is LanguageSet.LMR_AND_HMR:
        data[HMR] = corpora[HMR]
    return _lm_loop("finetune", model, data, dev_lmr, LMR, cfg, out_dir, on_batch, metrics)


def _dev_bleu(model: NmtModel, dev: DevPairs, vocab: Vocabulary, batch_size: int) -> float:
    hyps = []
    for i in range(0, len(dev.src), batch_size):
        for toks in greedy_decode_batch(model, dev.src[i:i + batch_size], dev.src_lang.index, dev.tgt_lang.index):
            hyps.append(detokenize(vocab.decode(toks)))
    return bleu(hyps, dev.refs).score


def _single_stream(sents, cfg, seed, tag):
    dist = make_sampler({tag: len(sents)}, 1.0)
    return sample_batches({tag: sents}, dist, cfg.batch_size, seed)


def train_unmt(model: NmtModel, mono: Mapping[LanguageTag, list[list[int]]], dev: DevPairs, cfg: TrainConfig,
               out_dir=None, on_batch: BatchHook = _noop_hook, metrics: MetricsLog | None = None):
    """Unsupervised NMT: denoising auto-encoding plus online back-translation.

    One cycle is four updates: DAE(HMR), DAE(LMR), BT(HMR->LMR->HMR),
    BT(LMR->HMR->LMR). Back-translations are generated greedily with dropout
    off and no graph. Every ``eval_every_updates`` updates the dev
    LMR->HMR BLEU drives early stopping.
    """
    metrics = metrics if metrics is not None else MetricsLog()
    if not dev.src:
        raise EmptyCorpusError("train_unmt: empty dev set")
    if cfg.max_steps == 0:
        return model, metrics
    vocab = model.vocab
    rng = Rng(cfg.seed).child("unmt")
    noise_gen = rng.stream("noise")
    set_trainable(model, Scheme.ALL)
    opt = Adam(model.parameters(), lr=cfg.base_lr, clip_norm=cfg.clip_norm)
    streams = {tag: _single_stream(mono[tag], cfg, rng.child(f"batches.{tag.id}").seed, tag) for tag in (HMR, LMR)}
    ev = _Evaluator("unmt", model, StopMode.MAX, cfg, "dev_bleu_lmr2hmr", metrics, out_dir, opt)
    schedule = [("dae", HMR), ("dae", LMR), ("bt", HMR), ("bt", LMR)]
    updates = seen = 0
    stop = False
    while updates < cfg.max_steps and not stop:
        for objective, lang in schedule:
            if updates >= cfg.max_steps or stop:
                break
            _, batch = next(streams[lang])
            on_batch("unmt", objective, lang)
            other = LMR if lang is HMR else HMR
            if objective == "dae":
                src = [frame(dae_noise(s[1:-1], cfg.noise, noise_gen)) for s in batch]
                src_lang = lang
            else:
                gen = greedy_decode_batch(model, batch, lang.index, other.index, None)
                src = [frame(g) for g in gen]
                src_lang = other
            loss = nmt_loss(model, pad_batch(src), pad_batch(batch), src_lang.index, lang.index, training=True,
                            rng=rng, label_smoothing=cfg.label_smoothing)
            loss.backward()
            updates += 1
            opt.step(cfg.lr(updates))
            seen += len(batch)
            if updates % cfg.eval_every_updates == 0:
                stop = ev.record(_dev_bleu(model, dev, vocab, cfg.batch_size), updates, seen)
    if ev.last_step != updates:
        ev.record(_dev_bleu(model, dev, vocab, cfg.batch_size), updates, seen)
    ev.finish()
    return model, metrics


def train_supervised(model: NmtModel, parallel: Sequence[tuple[list[int], list[int]]], dev: DevPairs,
                     cfg: TrainConfig, out_dir=None, on_batch: BatchHook = _noop_hook,
                     metrics: MetricsLog | None = None):
    """Teacher-forced training on parallel pairs ``(lmr_ids, hmr_ids)``.

    With ``directions="both"`` updates alternate LMR->HMR and HMR->LMR.
    """
    metrics = metrics if metrics is not None else MetricsLog()
    if not dev.src:
        raise EmptyCorpusError("train_supervised: empty dev set")
    if not parallel:
        raise EmptyCorpusError("train_supervised: empty parallel corpus")
    if cfg.max_steps == 0:
        return model, metrics
    vocab = model.vocab
    rng = Rng(cfg.seed).child("supervised")
    set_trainable(model, Scheme.ALL)
    opt = Adam(model.parameters(), lr=cfg.base_lr, clip_norm=cfg.clip_norm)
    stream = _single_stream(list(parallel), cfg, rng.child("batches").seed, LMR)
    directions = {"both": [(LMR, HMR), (HMR, LMR)], "lmr2hmr": [(LMR, HMR)], "hmr2lmr": [(HMR, LMR)]}[cfg.directions]
    ev = _Evaluator("supervised", model, StopMode.MAX, cfg, "dev_bleu_lmr2hmr", metrics, out_dir, opt)
    updates = seen = 0
    stop = False
    while updates < cfg.max_steps and not stop:
        src_lang, tgt_lang = directions[updates % len(directions)]
        _, pairs = next(stream)
        on_batch("supervised", f"{src_lang.id}2{tgt_lang.id}", src_lang)
        side = {LMR: [p[0] for p in pairs], HMR: [p[1] for p in pairs]}
        loss = nmt_loss(model, pad_batch(side[src_lang]), pad_batch(side[tgt_lang]), src_lang.index,
                        tgt_lang.index, training=True, rng=rng, label_smoothing=cfg.label_smoothing)
        loss.backward()
        updates += 1
        opt.step(cfg.lr(updates))
        seen += len(pairs)
        if updates % cfg.eval_every_updates == 0:
            stop = ev.record(_dev_bleu(model, dev, vocab, cfg.batch_size), updates, seen)
    if ev.last_step != updates:
        ev.record(_dev_bleu(model, dev, vocab, cfg.batch_size), updates, seen)
    ev.finish()
    return model, metrics
