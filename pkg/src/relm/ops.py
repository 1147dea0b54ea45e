"""File-level pipeline steps shared by the command line and the manifest runner.

Each step reads named input files, writes fixed-name outputs into one output
directory, and returns a JSON-serializable summary. Summaries hold no
absolute paths or timings so that reruns produce identical records.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

from .bleu import SIGNATURE, bleu
from .bpe import BpeCodec, MergeTable, Vocabulary, build_vocabulary, extend_vocabulary, learn_bpe, \
    learn_joint_bpe, segmentation_stats
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ResolvedConfig, model_config, train_config
from .corpus import HMR, LMR, LanguageTag, TokenizedCorpus, load_corpus, tokenize_corpus
from .decoding import beam_search, default_max_len, detokenize, greedy_decode_batch
from .errors import ConfigError, ModelError
from .rng import Rng
from .synthetic import gen_synthetic
from .training import DevPairs, FinetuneScheme, LanguageSet, MetricsLog, encode_sentences, finetune_lm, \
    make_parallel, pretrain_mlm, train_supervised, train_unmt
from .transformer import LmModel, NmtModel, attach_adapters, build_lm, build_nmt, extend_embeddings, \
    init_nmt_from_lm

MODEL_FILE = "model.ckpt"
METRICS_FILE = "metrics.jsonl"


@dataclass(frozen=True)
class OpSpec:
    name: str
    func: Callable
    help: str
    sections: tuple[str, ...] = ()
    inputs: tuple[str, ...] = ()
    optional: tuple[str, ...] = ()


def _words(path, tag: LanguageTag) -> TokenizedCorpus:
    return tokenize_corpus(load_corpus(path, tag))


def _lines(path) -> list[str]:
    return load_corpus(path, HMR).lines


def _encode(path, merges_path, vocab: Vocabulary, tag: LanguageTag, max_len=None) -> list[list[int]]:
    codec = BpeCodec(MergeTable.load(merges_path))
    corpus = _words(path, tag)
    return encode_sentences([codec.apply_sentence(s) for s in corpus.sentences], vocab, max_len)


def _dev(inputs, vocab) -> DevPairs:
    src = _encode(inputs["dev_lmr"], inputs["merges_lmr"], vocab, LMR)
    refs = _lines(inputs["dev_hmr"])
    return DevPairs(src, refs)


def _fresh_metrics(out: Path) -> MetricsLog:
    path = out / METRICS_FILE
    if path.exists():
        path.unlink()
    return MetricsLog(path)


def _metrics_summary(metrics: MetricsLog) -> dict:
    recs = list(metrics)
    if not recs:
        return {"evaluations": 0}
    best = [r for r in recs if r.is_best][-1]
    return {"evaluations": len(recs), "metric": best.metric_name, "best": best.value, "best_step": best.step,
            "final": recs[-1].value, "steps": recs[-1].step}


# ------------------------------------------------------------------ data ops


def op_gen_synthetic(cfg: ResolvedConfig, inputs, out: Path, seed: int) -> dict:
    spec = cfg.build("synthetic", seed=seed)
    pair = gen_synthetic(spec)
    paths = pair.save(out)
    with open(out / "cipher.tsv", "w", encoding="utf-8") as f:
        for h, l in pair.cipher.items():
            f.write(f"{h}\t{l}\n")
    return {"files": sorted([p.name for p in paths.values()] + ["cipher.tsv"]),
            "sizes": {k: len(getattr(pair, k)) for k in ("hmr", "lmr", "dev_lmr", "parallel_lmr")}}


def op_learn_bpe(cfg, inputs, out, seed):
    bc = cfg.build("bpe")
    merges = learn_bpe(_words(inputs["corpus"], HMR).word_counts(), bc.num_merges)
    merges.save(out / "merges.txt")
    return {"merges": len(merges)}


def op_joint_bpe(cfg, inputs, out, seed):
    bc = cfg.build("bpe")
    corpora = {HMR: _words(inputs["hmr"], HMR), LMR: _words(inputs["lmr"], LMR)}
    merges = learn_joint_bpe(corpora, bc.alpha, bc.num_merges, seed, bc.sample_size or None)
    merges.save(out / "merges.txt")
    return {"merges": len(merges)}


def op_apply_bpe(cfg, inputs, out, seed):
    codec = BpeCodec(MergeTable.load(inputs["merges"]))
    corpus = codec.apply_corpus(_words(inputs["corpus"], HMR))
    corpus.save(out / "segmented.txt")
    return {"sentences": len(corpus), "tokens": sum(len(s) for s in corpus.sentences)}


def op_build_vocab(cfg, inputs, out, seed):
    merges = MergeTable.load(inputs["merges"]) if "merges" in inputs else None
    vocab = build_vocabulary(_words(inputs["corpus"], HMR), merges)
    vocab.save(out / "vocab.txt")
    return {"size": len(vocab)}


def op_extend_vocab(cfg, inputs, out, seed):
    vocab, report = extend_vocabulary(Vocabulary.load(inputs["vocab_hmr"]), Vocabulary.load(inputs["vocab_lmr"]))
    vocab.save(out / "vocab.txt")
    return {"size": len(vocab), "report": report.line(), "new_items": report.new_items}


def op_vocab_stats(cfg, inputs, out, seed):
    _, report = extend_vocabulary(Vocabulary.load(inputs["vocab_hmr"]), Vocabulary.load(inputs["vocab_lmr"]))
    summary = {"report": report.line(), "size_hmr": report.size_hmr, "size_lmr": report.size_lmr,
               "overlap": report.overlap, "new_items": report.new_items}
    if "corpus" in inputs:
        corpus = _words(inputs["corpus"], LMR)
        for key in ("merges_hmr", "merges_joint"):
            if key in inputs:
                st = segmentation_stats(corpus, MergeTable.load(inputs[key]))
                summary[key.replace("merges_", "segmentation_")] = {
                    "fertility": st.fertility, "char_split_rate": st.char_split_rate}
    return summary


# ------------------------------------------------------------------ model ops


def _save(out: Path, model, op: str, seed: int) -> dict:
    save_checkpoint(out / MODEL_FILE, model, None, {"op": op, "seed": seed})
    return {"checkpoint": MODEL_FILE, "parameters": model.num_parameters(),
            "trainable": model.num_parameters(trainable_only=True)}


def op_pretrain_lm(cfg, inputs, out, seed):
    vocab = Vocabulary.load(inputs["vocab"])
    tc = train_config(cfg, seed)
    model = build_lm(model_config(cfg, len(vocab)), vocab, Rng(seed).child("pretrain.init"))
    data = _encode(inputs["corpus"], inputs["merges"], vocab, HMR, tc.max_len)
    dev = _encode(inputs["dev"], inputs["merges"], vocab, HMR, tc.max_len)
    metrics = _fresh_metrics(out)
    model, metrics = pretrain_mlm(model, data, dev, tc, out, metrics=metrics)
    return {**_save(out, model, "pretrain-lm", seed), "metrics": _metrics_summary(metrics)}


def _load_model(path, kind):
    model = load_checkpoint(path).model()
    if model.kind != kind:
        raise ModelError(f"{path}: expected a {kind} checkpoint, found {model.kind}")
    return model


def op_finetune_lm(cfg, inputs, out, seed):
    tc = train_config(cfg, seed)
    ad = cfg.build("adapters")
    lm = _load_model(inputs["checkpoint"], "lm")
    vocab = Vocabulary.load(inputs["vocab"])
    rng = Rng(seed).child("finetune.init")
    lm = extend_embeddings(lm, lm.vocab, vocab, rng.child("extend"))
    if ad.dim:
        lm = attach_adapters(lm, ad.dim, rng.child("adapters"))
        if tc.scheme is not FinetuneScheme.ADAPTERS:
            raise ConfigError("adapters.dim > 0 requires train.scheme = \"adapters\"")
    elif tc.scheme is FinetuneScheme.ADAPTERS:
        raise ConfigError("train.scheme = \"adapters\" requires adapters.dim > 0")
    corpora = {LMR: _encode(inputs["lmr"], inputs["merges_lmr"], vocab, LMR, tc.max_len)}
    if tc.languages is LanguageSet.LMR_AND_HMR:
        missing = [k for k in ("hmr", "merges_hmr") if k not in inputs]
        if missing:
            raise ConfigError(f"train.languages = lmr_and_hmr needs inputs {missing}")
        corpora[HMR] = _encode(inputs["hmr"], inputs["merges_hmr"], vocab, HMR, tc.max_len)
    dev = _encode(inputs["dev"], inputs["merges_lmr"], vocab, LMR, tc.max_len)
    metrics = _fresh_metrics(out)
    lm, metrics = finetune_lm(lm, corpora, dev, vocab, tc, out, metrics=metrics)
    return {**_save(out, lm, "finetune-lm", seed), "metrics": _metrics_summary(metrics),
            "vocab_size": len(vocab), "new_rows": len(vocab) - vocab.pretrained_end}


def op_init_nmt(cfg, inputs, out, seed):
    rng = Rng(seed).child("nmt.init")
    if "checkpoint" in inputs:
        if cfg.values.get("model"):
            raise ConfigError("[model] keys are only accepted for random initialization (no --checkpoint)")
        model = init_nmt_from_lm(_load_model(inputs["checkpoint"], "lm"), rng)
        source = "lm"
    elif "vocab" in inputs:
        vocab = Vocabulary.load(inputs["vocab"])
        model = build_nmt(model_config(cfg, len(vocab), n_languages=2), vocab, rng)
        source = "random"
    else:
        raise ConfigError("init-nmt needs either a checkpoint (LM) or a vocab (random init)")
    return {**_save(out, model, "init-nmt", seed), "init": source}


def op_train_unmt(cfg, inputs, out, seed):
    tc = train_config(cfg, seed)
    model = _load_model(inputs["checkpoint"], "nmt")
    vocab = model.vocab
    mono = {HMR: _encode(inputs["hmr"], inputs["merges_hmr"], vocab, HMR, tc.max_len),
            LMR: _encode(inputs["lmr"], inputs["merges_lmr"], vocab, LMR, tc.max_len)}
    metrics = _fresh_metrics(out)
    model, metrics = train_unmt(model, mono, _dev(inputs, vocab), tc, out, metrics=metrics)
    return {**_save(out, model, "train-unmt", seed), "metrics": _metrics_summary(metrics)}


def op_train_supervised(cfg, inputs, out, seed):
    tc = train_config(cfg, seed)
    model = _load_model(inputs["checkpoint"], "nmt")
    vocab = model.vocab
    lmr = _encode(inputs["parallel_lmr"], inputs["merges_lmr"], vocab, LMR)
    hmr = _encode(inputs["parallel_hmr"], inputs["merges_hmr"], vocab, HMR)
    metrics = _fresh_metrics(out)
    model, metrics = train_supervised(model, make_parallel(lmr, hmr), _dev(inputs, vocab), tc, out,
                                      metrics=metrics)
    return {**_save(out, model, "train-supervised", seed), "metrics": _metrics_summary(metrics)}


def op_translate(cfg, inputs, out, seed):
    dc = cfg.build("decode")
    model = _load_model(inputs["checkpoint"], "nmt")
    src_tag, tgt_tag = {"lmr2hmr": (LMR, HMR), "hmr2lmr": (HMR, LMR)}[dc.direction]
    srcs = _encode(inputs["source"], inputs["merges"], model.vocab, src_tag)
    cap = model.config.max_positions - 1
    hyps = []
    if dc.greedy:
        for i in range(0, len(srcs), dc.batch_size):
            hyps.extend(greedy_decode_batch(model, srcs[i:i + dc.batch_size], src_tag.index, tgt_tag.index,
                                            dc.max_len or None))
    else:
        for s in srcs:
            max_len = dc.max_len or default_max_len(len(s), cap)
            hyps.append(beam_search(model, s, tgt_tag.index, dc.beam, max_len, dc.length_penalty, src_tag.index))
    text = [detokenize(model.vocab.decode(h)) for h in hyps]
    (out / "hyps.txt").write_text("".join(t + "\n" for t in text), encoding="utf-8")
    summary = {"sentences": len(text), "output": "hyps.txt"}
    if "reference" in inputs:
        res = bleu(text, _lines(inputs["reference"]))
        summary["bleu"] = res.score
    return summary


def op_score_bleu(cfg, inputs, out, seed):
    hyps = Path(inputs["hyp"]).read_text(encoding="utf-8").splitlines()
    refs = Path(inputs["ref"]).read_text(encoding="utf-8").splitlines()
    res = bleu(hyps, refs)
    return {"bleu": res.score, "precisions": list(res.precisions), "brevity_penalty": res.brevity_penalty,
            "hyp_len": res.hyp_len, "ref_len": res.ref_len, "signature": SIGNATURE, "text": str(res)}


OPS: dict[str, OpSpec] = {op.name: op for op in [
    OpSpec("gen-synthetic", op_gen_synthetic, "generate a synthetic HMR/LMR cipher pair", ("synthetic",)),
    OpSpec("learn-bpe", op_learn_bpe, "learn a BPE merge table on one corpus", ("bpe",), ("corpus",)),
    OpSpec("joint-bpe", op_joint_bpe, "learn BPE on an alpha-sampled HMR+LMR mix", ("bpe",), ("hmr", "lmr")),
    OpSpec("apply-bpe", op_apply_bpe, "segment a corpus with a merge table", (), ("corpus", "merges")),
    OpSpec("build-vocab", op_build_vocab, "index the subwords of a corpus", (), ("corpus",), ("merges",)),
    OpSpec("extend-vocab", op_extend_vocab, "append LMR-only tokens to an HMR vocabulary", (),
           ("vocab_hmr", "vocab_lmr")),
    OpSpec("vocab-stats", op_vocab_stats, "vocabulary overlap report and segmentation statistics", (),
           ("vocab_hmr", "vocab_lmr"), ("corpus", "merges_hmr", "merges_joint")),
    OpSpec("pretrain-lm", op_pretrain_lm, "masked-LM pretraining on HMR text", ("model", "train"),
           ("corpus", "merges", "vocab", "dev")),
    OpSpec("finetune-lm", op_finetune_lm, "extend the vocabulary and fine-tune on LMR (+HMR)",
           ("train", "adapters"), ("checkpoint", "vocab", "lmr", "merges_lmr", "dev"), ("hmr", "merges_hmr")),
    OpSpec("init-nmt", op_init_nmt, "encoder-decoder from an LM checkpoint or at random", ("model",), (),
           ("checkpoint", "vocab")),
    OpSpec("train-unmt", op_train_unmt, "denoising + online back-translation training", ("train", "noise"),
           ("checkpoint", "hmr", "lmr", "merges_hmr", "merges_lmr", "dev_lmr", "dev_hmr")),
    OpSpec("train-supervised", op_train_supervised, "supervised training on parallel LMR/HMR text", ("train",),
           ("checkpoint", "parallel_lmr", "parallel_hmr", "merges_hmr", "merges_lmr", "dev_lmr", "dev_hmr")),
    OpSpec("translate", op_translate, "decode a source file", ("decode",), ("checkpoint", "source", "merges"),
           ("reference",)),
    OpSpec("score-bleu", op_score_bleu, "corpus BLEU of a hypothesis file", (), ("hyp", "ref")),
]}


def run_op(name: str, cfg: ResolvedConfig, inputs: Mapping[str, str | Path], out, seed: int) -> dict:
    spec = OPS[name]
    missing = [k for k in spec.inputs if k not in inputs]
    if missing:
        raise ConfigError(f"{name}: missing inputs {missing}")
    extra = sorted(set(inputs) - set(spec.inputs) - set(spec.optional))
    if extra:
        raise ConfigError(f"{name}: unexpected inputs {extra}")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return spec.func(cfg, {k: Path(v) for k, v in inputs.items()}, out, seed)


def dump_summary(summary: Mapping) -> str:
    return json.dumps(summary, sort_keys=True, ensure_ascii=False)
