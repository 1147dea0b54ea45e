"""Show how an HMR-only BPE table shatters text in another script, and how
joint BPE plus vocabulary extension repairs it.

    python demos/segmentation_report.py
"""

from relm.bpe import BpeCodec, build_vocabulary, extend_vocabulary, learn_bpe, learn_joint_bpe, segmentation_stats
from relm.corpus import HMR, LMR, TokenizedCorpus
from relm.synthetic import Cipher, SyntheticPairSpec, gen_synthetic


def main():
    pair = gen_synthetic(SyntheticPairSpec(cipher=Cipher.TRANSLITERATION, dev_n=0))
    hmr = TokenizedCorpus(HMR, [s.split() for s in pair.hmr])
    lmr = TokenizedCorpus(LMR, [s.split() for s in pair.lmr])
    bpe_hmr = learn_bpe(hmr.word_counts(), 500)
    bpe_joint = learn_joint_bpe({HMR: hmr, LMR: lmr}, alpha=0.5, num_merges=500, seed=0)

    for name, table in (("BPE_HMR", bpe_hmr), ("BPE_joint", bpe_joint)):
        st = segmentation_stats(lmr, table)
        print(f"{name:10s} LMR fertility {st.fertility:.2f} subwords/word, "
              f"fully character-split words {st.char_split_rate:.0%}")

    sentence = pair.lmr[0].split()
    print("\nLMR sentence:", " ".join(sentence))
    print("BPE_HMR  :", " ".join(BpeCodec(bpe_hmr).apply_sentence(sentence)))
    print("BPE_joint:", " ".join(BpeCodec(bpe_joint).apply_sentence(sentence)))

    v_hmr = build_vocabulary(hmr, bpe_hmr)
    v_lmr = build_vocabulary(BpeCodec(bpe_joint).apply_corpus(lmr))
    _, report = extend_vocabulary(v_hmr, v_lmr)
    print("\nvocabulary extension:", report.line())


if __name__ == "__main__":
    main()
