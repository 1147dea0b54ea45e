import json
import subprocess
import sys

import pytest

from relm.bpe import SPECIALS, Vocabulary
from relm.cli import main

TINY_MODEL = ["model.d_model=16", "model.n_layers=1", "model.n_heads=2", "model.max_positions=64"]
TINY_TRAIN = ["train.max_steps=20", "train.batch_size=8", "train.eval_every_updates=10",
              "train.checkpoint_every_sentences=80", "train.base_lr=3e-3"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    captured = capsys.readouterr()
    out = json.loads(captured.out) if code == 0 else None
    err = json.loads(captured.err.strip().splitlines()[-1]) if code else None
    return code, out, err


def _vocab(path, shared, own, prefix):
    tokens = [f"s{i}" for i in range(shared)] + [f"{prefix}{i}" for i in range(own)]
    Vocabulary(list(SPECIALS) + tokens, {t: 1 for t in tokens}).save(path)


def test_vocab_stats_paper_report(tmp_path, capsys):
    _vocab(tmp_path / "h.txt", 21606, 59009 - 21606, "h")
    _vocab(tmp_path / "l.txt", 21606, 40583 - 21606, "l")
    code, out, _ = run(capsys, "vocab-stats", "--vocab-hmr", tmp_path / "h.txt", "--vocab-lmr", tmp_path / "l.txt",
                       "--out", tmp_path / "o")
    assert code == 0
    assert out["summary"]["report"] == "size_hmr=59009 size_lmr=40583 overlap=21606 new_items=18977"


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Runs the full command chain once on a tiny synthetic pair."""
    root = tmp_path_factory.mktemp("cli")

    def call(*argv):
        from io import StringIO
        import contextlib
        buf = StringIO()
        with contextlib.redirect_stdout(buf):
            code = main([str(a) for a in argv])
        assert code == 0, argv
        return json.loads(buf.getvalue())

    d = root / "data"
    syn = ["synthetic.vocab_size=12", "synthetic.hmr_n=200", "synthetic.lmr_n=100", "synthetic.dev_n=10",
           "synthetic.max_len=6", "synthetic.letter_shift=4"]
    call("gen-synthetic", "--out", d, *sum((["--config", c] for c in syn), []))
    call("learn-bpe", "--corpus", d / "hmr.txt", "--out", root / "bpe", "--config", "bpe.num_merges=20")
    call("joint-bpe", "--hmr", d / "hmr.txt", "--lmr", d / "lmr.txt", "--out", root / "joint",
         "--config", "bpe.num_merges=20")
    call("build-vocab", "--corpus", d / "hmr.txt", "--merges", root / "bpe/merges.txt", "--out", root / "vh")
    call("build-vocab", "--corpus", d / "lmr.txt", "--merges", root / "joint/merges.txt", "--out", root / "vl")
    ext = call("extend-vocab", "--vocab-hmr", root / "vh/vocab.txt", "--vocab-lmr", root / "vl/vocab.txt",
               "--out", root / "vx")
    flags = lambda items: sum((["--config", c] for c in items), [])
    pre = call("pretrain-lm", "--corpus", d / "hmr.txt", "--merges", root / "bpe/merges.txt",
               "--vocab", root / "vh/vocab.txt", "--dev", d / "dev_hmr.txt", "--out", root / "pre",
               *flags(TINY_MODEL + TINY_TRAIN))
    call("finetune-lm", "--checkpoint", root / "pre/model.ckpt", "--vocab", root / "vx/vocab.txt",
         "--lmr", d / "lmr.txt", "--merges-lmr", root / "joint/merges.txt", "--dev", d / "dev_lmr.txt",
         "--hmr", d / "hmr.txt", "--merges-hmr", root / "bpe/merges.txt", "--out", root / "ft", *flags(TINY_TRAIN))
    call("init-nmt", "--checkpoint", root / "ft/model.ckpt", "--out", root / "nmt")
    un = call("train-unmt", "--checkpoint", root / "nmt/model.ckpt", "--hmr", d / "hmr.txt", "--lmr", d / "lmr.txt",
              "--merges-hmr", root / "bpe/merges.txt", "--merges-lmr", root / "joint/merges.txt",
              "--dev-lmr", d / "dev_lmr.txt", "--dev-hmr", d / "dev_hmr.txt", "--out", root / "unmt",
              *flags(TINY_TRAIN))
    return dict(root=root, data=d, call=call, ext=ext, pre=pre, unmt=un)


def test_pipeline_outputs(pipeline):
    root = pipeline["root"]
    assert pipeline["ext"]["summary"]["new_items"] > 0
    assert pipeline["pre"]["summary"]["metrics"]["evaluations"] == 2
    assert pipeline["unmt"]["summary"]["metrics"]["metric"] == "dev_bleu_lmr2hmr"
    for sub in ("pre", "ft", "unmt"):
        assert (root / sub / "model.ckpt").exists() and (root / sub / "metrics.jsonl").exists()
    assert pipeline["pre"]["config"]["train"]["max_steps"] == 20


def test_translate_beam1_matches_greedy(pipeline):
    root, d, call = pipeline["root"], pipeline["data"], pipeline["call"]
    args = ["--checkpoint", root / "unmt/model.ckpt", "--source", d / "dev_lmr.txt",
            "--merges", root / "joint/merges.txt", "--reference", d / "dev_hmr.txt"]
    beam = call("translate", *args, "--out", root / "t_beam", "--beam", 1)
    greedy = call("translate", *args, "--out", root / "t_greedy", "--greedy")
    assert (root / "t_beam/hyps.txt").read_bytes() == (root / "t_greedy/hyps.txt").read_bytes()
    assert beam["summary"]["bleu"] == greedy["summary"]["bleu"]
    scored = call("score-bleu", "--hyp", root / "t_beam/hyps.txt", "--ref", d / "dev_hmr.txt", "--out", root / "s")
    assert scored["summary"]["bleu"] == pytest.approx(beam["summary"]["bleu"], abs=1e-9)
    assert scored["summary"]["signature"].startswith("BLEU")


def test_score_identity(tmp_path, capsys):
    (tmp_path / "h").write_text("the cat sat on the mat\n", encoding="utf-8")
    code, out, _ = run(capsys, "score-bleu", "--hyp", tmp_path / "h", "--ref", tmp_path / "h", "--out", tmp_path)
    assert code == 0 and out["summary"]["bleu"] == pytest.approx(100.0)


@pytest.mark.parametrize("argv, kind, code", [
    (["frobnicate"], "UsageError", 2),
    (["learn-bpe", "--out", "x"], "UsageError", 2),
    (["learn-bpe", "--corpus", "{f}", "--out", "{o}", "--config", "bpe.merges=3"], "ConfigError", 2),
    (["learn-bpe", "--corpus", "{f}", "--out", "{o}", "--config", "train.base_lr=3"], "ConfigError", 2),
    (["learn-bpe", "--corpus", "{o}/missing.txt", "--out", "{o}"], "CorpusLoadError", 1),
    (["run-manifest", "no-such-manifest", "--out", "{o}"], "ManifestError", 2),
])
def test_errors_are_json(tmp_path, capsys, argv, kind, code):
    f = tmp_path / "c.txt"
    f.write_text("a b\n", encoding="utf-8")
    argv = [a.format(f=f, o=tmp_path / "o") for a in argv]
    got, _, err = run(capsys, *argv)
    assert got == code and err["error"] == kind


def test_config_file_and_override(tmp_path, capsys):
    (tmp_path / "c.txt").write_text("low lower lowest\n", encoding="utf-8")
    (tmp_path / "cfg.toml").write_text("[bpe]\nnum_merges = 1\n", encoding="utf-8")
    base = ["learn-bpe", "--corpus", tmp_path / "c.txt", "-c", tmp_path / "cfg.toml"]
    _, a, _ = run(capsys, *base, "--out", tmp_path / "a")
    _, b, _ = run(capsys, *base, "--out", tmp_path / "b", "--config", "bpe.num_merges=3")
    assert a["summary"]["merges"] == 1 and b["summary"]["merges"] == 3
    assert b["config"]["bpe"]["num_merges"] == 3


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "relm.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip()
