import math

import numpy as np
import pytest

from relm import training
from relm.bpe import MASK_ID, MergeTable, build_vocabulary, extend_vocabulary
from relm.corpus import HMR, LMR, TokenizedCorpus, make_sampler, sample_batches
from relm.decoding import masked_perplexity
from relm.errors import ConfigError, EmptyCorpusError, ModelError, VocabularyError
from relm.rng import Rng
from relm.synthetic import SyntheticPairSpec, gen_synthetic
from relm.training import (DevPairs, EarlyStopper, FinetuneScheme, LanguageSet, MetricsLog, NoiseConfig,
                           StopMode, TrainConfig, dae_noise, encode_sentences, finetune_lm, make_parallel,
                           pretrain_mlm, stopper_update, train_supervised, train_unmt)
from relm.transformer import (ModelConfig, attach_adapters, build_lm, build_nmt, extend_embeddings,
                              init_nmt_from_lm, is_frozen_under_adapters)

SMALL = dict(d_model=16, n_layers=1, n_heads=2, ffn_dim=32, max_positions=64)


class TestStopper:
    def run(self, mode, patience, stream):
        s = EarlyStopper(mode, patience)
        for i, v in enumerate(stream):
            s, stop = stopper_update(s, v)
            if stop:
                return i
        return None

    def test_improving_never_stops(self):
        assert self.run(StopMode.MAX, 2, range(50)) is None
        assert self.run(StopMode.MIN, 2, range(50, 0, -1)) is None

    def test_hand_trace(self):
        assert self.run(StopMode.MAX, 3, [1, 2, 3, 3, 2, 3]) == 5

    def test_equal_is_not_improvement(self):
        s, _ = stopper_update(EarlyStopper(StopMode.MIN, 5), 1.0)
        s, _ = stopper_update(s, 1.0)
        assert s.since_best == 1 and s.best == 1.0

    def test_non_finite(self):
        with pytest.raises(ValueError):
            stopper_update(EarlyStopper(StopMode.MIN, 5), float("nan"))


class TestNoise:
    def test_identity(self):
        toks = list(range(5, 30))
        assert dae_noise(toks, NoiseConfig(0, 0, 0), np.random.default_rng(0)) == toks

    def test_blank_all(self):
        out = dae_noise(list(range(5, 15)), NoiseConfig(3, 0, 1.0), np.random.default_rng(0))
        assert out == [MASK_ID] * 10

    def test_displacement_and_drop(self):
        gen = np.random.default_rng(1)
        kept = total = 0
        for _ in range(2000):
            toks = list(range(50))
            shuffled = dae_noise(toks, NoiseConfig(3, 0, 0), gen)
            assert sorted(shuffled) == toks
            assert max(abs(pos - t) for pos, t in enumerate(shuffled)) <= 3
            dropped = dae_noise(toks, NoiseConfig(0, 0.1, 0), gen)
            kept += len(dropped)
            total += 50
        assert total == 100_000
        assert abs(kept / total - 0.9) <= 0.01

    def test_keeps_one(self):
        gen = np.random.default_rng(0)
        assert all(len(dae_noise([7], NoiseConfig(0, 0.99, 0), gen)) == 1 for _ in range(100))

    def test_config_bounds(self):
        with pytest.raises(ConfigError):
            NoiseConfig(p_drop=1.0).validate()
        with pytest.raises(ConfigError):
            NoiseConfig(shuffle_k=-1).validate()


class TestTrainConfig:
    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"base_lr": 1e-3, "learning_rate": 2})

    def test_positive(self):
        with pytest.raises(ConfigError):
            TrainConfig(patience=0)

    def test_round_trip(self):
        cfg = TrainConfig(scheme="adapters", languages="lmr_only", noise={"p_drop": 0.2})
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_schedule(self):
        cfg = TrainConfig(base_lr=1.0, lr_schedule="inv_sqrt", warmup=10)
        assert cfg.lr(10) == 1.0 and cfg.lr(40) == 0.5
        assert TrainConfig(base_lr=0.3).lr(1234) == 0.3


@pytest.fixture(scope="module")
def data():
    pair = gen_synthetic(SyntheticPairSpec(vocab_size=12, min_len=3, max_len=6, hmr_n=300, lmr_n=200, dev_n=20,
                                           parallel_n=10, letter_shift=4, seed=3))
    h = TokenizedCorpus(HMR, [s.split() for s in pair.hmr])
    l_ = TokenizedCorpus(LMR, [s.split() for s in pair.lmr])
    v_hmr = build_vocabulary(h, MergeTable())
    v_lmr = build_vocabulary(l_, MergeTable())
    v_ext, _ = extend_vocabulary(v_hmr, v_lmr)

    def enc(lines, v):
        return encode_sentences([_chars(line) for line in lines], v)
    return dict(pair=pair, v_hmr=v_hmr, v_ext=v_ext,
                hmr=enc(pair.hmr, v_hmr), dev_hmr=enc(pair.dev_hmr, v_hmr),
                lmr=enc(pair.lmr, v_ext), dev_lmr=enc(pair.dev_lmr, v_ext),
                par_lmr=enc(pair.parallel_lmr, v_ext), par_hmr=enc(pair.parallel_hmr, v_ext))


def _chars(line):
    out = []
    for w in line.split():
        out += [c + "@@" for c in w[:-1]] + [w[-1]]
    return out


def cfg(**kw):
    base = dict(base_lr=3e-3, batch_size=16, max_steps=30, checkpoint_every_sentences=160, eval_every_updates=10,
                patience=10, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def pretrained(data, steps=30):
    lm = build_lm(ModelConfig(vocab_size=len(data["v_hmr"]), **SMALL), data["v_hmr"], Rng(0))
    lm, _ = pretrain_mlm(lm, data["hmr"], data["dev_hmr"], cfg(max_steps=steps))
    return lm


def assert_tied(model):
    assert model.projection is model.token_embedding
    assert np.array_equal(model.projection.data, model.params["embeddings.token"].data)


class TestPretrain:
    def test_zero_steps(self, data):
        lm = build_lm(ModelConfig(vocab_size=len(data["v_hmr"]), **SMALL), data["v_hmr"], Rng(0))
        snap = lm.snapshot()
        lm2, metrics = pretrain_mlm(lm, data["hmr"], data["dev_hmr"], cfg(max_steps=0))
        assert len(metrics) == 0
        assert all(np.array_equal(snap[n], p.data) for n, p in lm2.params.items())

    def test_checkpoint_cadence(self, data, tmp_path):
        lm = build_lm(ModelConfig(vocab_size=len(data["v_hmr"]), d_model=8, n_layers=1, n_heads=2, ffn_dim=8,
                                  max_positions=64), data["v_hmr"], Rng(0))
        c = cfg(batch_size=2000, max_steps=300, checkpoint_every_sentences=200_000, patience=100)
        short = [[2, 5 + i % 7, 3] for i in range(50)]  # cadence only depends on sentence counts
        _, metrics = pretrain_mlm(lm, short, short[:4], c, out_dir=tmp_path)
        assert [r.sentences_seen for r in metrics] == [200_000, 400_000, 600_000]
        assert (tmp_path / "pretrain.best.ckpt").exists() and (tmp_path / "pretrain.last.ckpt").exists()

    def test_learns_and_returns_best(self, data, tmp_path):
        lm = build_lm(ModelConfig(vocab_size=len(data["v_hmr"]), **SMALL), data["v_hmr"], Rng(0))
        untrained = masked_perplexity(lm, data["dev_hmr"], 0, 1234)
        lm, metrics = pretrain_mlm(lm, data["hmr"], data["dev_hmr"], cfg(max_steps=80),
                                   out_dir=tmp_path, metrics=MetricsLog(tmp_path / "m.jsonl"))
        final = masked_perplexity(lm, data["dev_hmr"], 0, 1234)
        assert math.log(final) < math.log(untrained) and math.log(final) < math.log(len(data["v_hmr"]))
        assert final == pytest.approx(min(r.value for r in metrics), rel=1e-12)
        assert MetricsLog.read(tmp_path / "m.jsonl") == metrics.records
        assert_tied(lm)

    def test_only_hmr(self, data):
        seen = []
        lm = build_lm(ModelConfig(vocab_size=len(data["v_hmr"]), **SMALL), data["v_hmr"], Rng(0))
        pretrain_mlm(lm, data["hmr"], data["dev_hmr"], cfg(max_steps=12),
                     on_batch=lambda phase, obj, lang: seen.append(lang))
        assert seen == [HMR] * 12

    def test_replay(self, data):
        a, b = pretrained(data, 15), pretrained(data, 15)
        assert all(np.array_equal(a.params[n].data, b.params[n].data) for n in a.params)

    def test_empty(self, data):
        lm = build_lm(ModelConfig(vocab_size=len(data["v_hmr"]), **SMALL), data["v_hmr"], Rng(0))
        with pytest.raises(EmptyCorpusError):
            pretrain_mlm(lm, [], data["dev_hmr"], cfg())


class TestFinetune:
    def test_requires_extension(self, data):
        with pytest.raises(VocabularyError):
            finetune_lm(pretrained(data, 1), {LMR: data["lmr"]}, data["dev_lmr"], data["v_ext"], cfg())

    def test_needs_adapters(self, data):
        lm = extend_embeddings(pretrained(data, 1), data["v_hmr"], data["v_ext"], Rng(1))
        with pytest.raises(ModelError):
            finetune_lm(lm, {LMR: data["lmr"]}, data["dev_lmr"], data["v_ext"], cfg(scheme="adapters"))

    def test_lmr_only_tags(self, data):
        lm = extend_embeddings(pretrained(data, 1), data["v_hmr"], data["v_ext"], Rng(1))
        tags = []
        finetune_lm(lm, {LMR: data["lmr"], HMR: data["hmr"]}, data["dev_lmr"], data["v_ext"],
                    cfg(languages="lmr_only", max_steps=15), on_batch=lambda p, o, lang: tags.append(lang))
        assert tags == [LMR] * 15

    def test_adapters_freeze(self, data, tmp_path):
        base = extend_embeddings(pretrained(data, 10), data["v_hmr"], data["v_ext"], Rng(1))
        lm = attach_adapters(base, 8, Rng(2))
        before = lm.snapshot()
        lm, _ = finetune_lm(lm, {LMR: data["lmr"], HMR: data["hmr"]}, data["dev_lmr"], data["v_ext"],
                            cfg(scheme="adapters", max_steps=100, checkpoint_every_sentences=800), out_dir=tmp_path)
        changed = {n for n, p in lm.params.items() if not np.array_equal(before[n], p.data)}
        frozen = {n for n in lm.params if is_frozen_under_adapters(n)}
        assert frozen and not (changed & frozen)
        assert changed <= set(lm.trainable_names())
        assert any(".adapter_" in n for n in changed) and "embeddings.token" in changed
        assert_tied(lm)

    def test_balanced_mix(self):
        a, b = [[2, 5, 3]] * 500, [[2, 6, 3]] * 500
        stream = sample_batches({LMR: a, HMR: b}, make_sampler({LMR: 500, HMR: 500}, 0.5), 4, seed=0)
        share = sum(next(stream)[0] is LMR for _ in range(10_000)) / 10_000
        assert abs(share - 0.5) <= 0.01


def _nmt(data, seed=0):
    v = data["v_ext"]
    return build_nmt(ModelConfig(vocab_size=len(v), n_languages=2, **SMALL), v, Rng(seed))


class TestUnmt:
    def test_zero_steps(self, data):
        m = _nmt(data)
        snap = m.snapshot()
        dev = DevPairs(data["dev_lmr"], data["pair"].dev_hmr)
        train_unmt(m, {HMR: data["hmr"], LMR: data["lmr"]}, dev, cfg(max_steps=0))
        assert all(np.array_equal(snap[n], p.data) for n, p in m.params.items())

    def test_cycle_backtranslation_and_purity(self, data, monkeypatch):
        m = _nmt(data)
        calls = []
        real = training.greedy_decode_batch

        def checked(model, *args, **kw):
            snap = model.snapshot()
            out = real(model, *args, **kw)
            assert all(np.array_equal(snap[n], p.data) for n, p in model.params.items())
            calls.append(1)
            return out

        monkeypatch.setattr(training, "greedy_decode_batch", checked)
        log = []
        dev = DevPairs(data["dev_lmr"], data["pair"].dev_hmr)
        m, metrics = train_unmt(m, {HMR: data["hmr"], LMR: data["lmr"]}, dev, cfg(max_steps=8, eval_every_updates=4),
                                on_batch=lambda p, obj, lang: log.append((obj, lang)))
        assert log == [("dae", HMR), ("dae", LMR), ("bt", HMR), ("bt", LMR)] * 2
        assert len(calls) >= 4
        assert [r.step for r in metrics] == [4, 8]
        assert all(r.metric_name == "dev_bleu_lmr2hmr" for r in metrics)
        assert_tied(m)

    def test_empty_dev(self, data):
        with pytest.raises(EmptyCorpusError):
            train_unmt(_nmt(data), {HMR: data["hmr"], LMR: data["lmr"]}, DevPairs([], []), cfg())


class TestSupervised:
    def test_memorizes_ten_pairs(self, data):
        v = data["v_ext"]
        m = build_nmt(ModelConfig(vocab_size=len(v), n_languages=2, d_model=32, n_layers=1, n_heads=4, ffn_dim=64,
                                  max_positions=48, dropout=0.0), v, Rng(0))
        pairs = make_parallel(data["par_lmr"], data["par_hmr"])
        dev = DevPairs(data["par_lmr"], data["pair"].parallel_hmr)
        dev_ref = [" ".join(s.split()) for s in data["pair"].parallel_hmr]
        assert dev.refs == dev_ref
        m, metrics = train_supervised(m, pairs, dev, cfg(base_lr=3e-3, batch_size=10, max_steps=500,
                                                         eval_every_updates=100, patience=10))
        assert max(r.value for r in metrics) > 90

    def test_direction_audit(self, data):
        pairs = make_parallel(data["par_lmr"], data["par_hmr"])
        dev = DevPairs(data["par_lmr"], data["pair"].parallel_hmr)
        for directions, expected in (("lmr2hmr", {"lmr2hmr"}), ("both", {"lmr2hmr", "hmr2lmr"})):
            seen = set()
            train_supervised(_nmt(data), pairs, dev, cfg(max_steps=6, directions=directions),
                             on_batch=lambda p, obj, lang: seen.add(obj))
            assert seen == expected

    def test_zero_steps_and_misaligned(self, data):
        m = _nmt(data)
        snap = m.snapshot()
        pairs = make_parallel(data["par_lmr"], data["par_hmr"])
        train_supervised(m, pairs, DevPairs(data["par_lmr"], data["pair"].parallel_hmr), cfg(max_steps=0))
        assert all(np.array_equal(snap[n], p.data) for n, p in m.params.items())
        with pytest.raises(ValueError):
            make_parallel(data["par_lmr"], data["par_hmr"][:-1])

    def test_best_checkpoint_contract(self, data, tmp_path):
        pairs = make_parallel(data["par_lmr"], data["par_hmr"])
        dev = DevPairs(data["dev_lmr"], data["pair"].dev_hmr)
        m, metrics = train_supervised(_nmt(data), pairs, dev, cfg(max_steps=40, eval_every_updates=10),
                                      out_dir=tmp_path)
        assert training._dev_bleu(m, dev, m.vocab, 16) == max(r.value for r in metrics)
        assert (tmp_path / "supervised.best.ckpt").exists()


def test_full_chain_keeps_tying(data):
    lm = pretrained(data, 5)
    assert_tied(lm)
    lm = extend_embeddings(lm, data["v_hmr"], data["v_ext"], Rng(1))
    assert_tied(lm)
    lm, _ = finetune_lm(lm, {LMR: data["lmr"], HMR: data["hmr"]}, data["dev_lmr"], data["v_ext"], cfg(max_steps=5))
    assert_tied(lm)
    nmt = init_nmt_from_lm(lm, Rng(2))
    assert_tied(nmt)
    nmt, _ = train_unmt(nmt, {HMR: data["hmr"], LMR: data["lmr"]}, DevPairs(data["dev_lmr"], data["pair"].dev_hmr),
                        cfg(max_steps=4))
    assert_tied(nmt)
