"""Bag-of-words baseline: n-grams, chi-squared selection, TF-IDF, FNN and
sliding-window labelling."""
import math
from collections import Counter
from dataclasses import replace

import numpy as np
import pytest

from multiqt import baseline as B
from multiqt.synthdata import GenConfig, generate

TOY_TEXTS = ["a b", "a c", "b d", "c d"]
TOY_LABELS = [1, 1, 0, 0]
SMALL = B.FnnConfig(hidden=(32, 32, 32), epochs=60, dropout=0.0, l2=0.0, lr=3e-3, batch_size=8)


def test_ngram_extraction():
    assert B.word_ngrams("is he ok") == ["is", "he", "ok", "is he", "he ok"]
    grams = B.char_ngrams("ab")
    assert grams == [" ab", "ab ", " ab "]
    assert B.char_ngrams("") == [] and B.word_ngrams("") == []


def test_chi2_hand_computed_toy():
    vocab = B.build_vocab(TOY_TEXTS, TOY_LABELS, 2, per_group=3)
    words = [f for f, g in zip(vocab.features, vocab.groups) if g == "word"]
    scores = dict(zip(vocab.features, vocab.chi2))
    # 'a' and 'd' split the classes perfectly: chi2 = 4; tie broken lexicographically
    assert words[:2] == ["a", "d"]
    assert scores["a"] == pytest.approx(4.0) and scores["d"] == pytest.approx(4.0)
    # a bigram seen once: observed [[0,1],[2,1]], expected [[.5,.5],[1.5,1.5]]
    assert words[2] == "a b" and scores["a b"] == pytest.approx(1 + 1 / 3)


def test_chi2_needs_two_classes():
    with pytest.raises(B.VocabError):
        B.build_vocab(TOY_TEXTS, [1, 1, 1, 1], 2)


def test_vocab_group_sizes_and_round_trip(tmp_path):
    vocab = B.build_vocab(TOY_TEXTS * 3, TOY_LABELS * 3, 2, per_group=5)
    assert sum(g == "word" for g in vocab.groups) == 5 and sum(g == "char" for g in vocab.groups) == 5
    path = tmp_path / "vocab.tsv"
    vocab.save(path)
    back = B.BowVocab.load(path)
    assert back.features == vocab.features and back.groups == vocab.groups
    np.testing.assert_allclose(back.idf, vocab.idf, rtol=1e-12)
    assert path.read_text().startswith("# multiqt-bow-vocab v1")


def test_vocab_is_fold_local():
    a = B.build_vocab(["red car", "blue sky"], [1, 0], 2, per_group=10)
    b = B.build_vocab(["green tree", "gray wall"], [1, 0], 2, per_group=10)
    assert not set(a.features) & set(b.features) - {" ", "  "}
    assert np.count_nonzero(B.featurize("green tree", a)) == 0


def test_featurize_matches_tfidf_oracle():
    vocab = B.build_vocab(TOY_TEXTS, TOY_LABELS, 2, per_group=500)
    text = "a a b"
    v = B.featurize(text, vocab)
    n = len(TOY_TEXTS)
    ref = np.zeros(len(vocab))
    for group, extract in (("word", B.word_ngrams), ("char", B.char_ngrams)):
        df = Counter(f for t in TOY_TEXTS for f in set(extract(t)))
        for f, c in Counter(extract(text)).items():
            if (group, f) in vocab.index:
                ref[vocab.index[(group, f)]] = c * (math.log((1 + n) / (1 + df[f])) + 1)
    ref /= np.linalg.norm(ref)
    np.testing.assert_allclose(v, ref, atol=1e-6)


def test_featurize_empty_and_duplicates():
    vocab = B.build_vocab(TOY_TEXTS, TOY_LABELS, 2)
    assert not B.featurize("", vocab).any()
    np.testing.assert_array_equal(B.featurize("a c", vocab), B.featurize("a c", vocab))


# -- FNN ---------------------------------------------------------------------

def _blobs(n=120, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 3, n)
    x = rng.normal(0, 0.1, size=(n, 6)).astype(np.float32)
    x[np.arange(n), y] += 2.0
    return x, y


def test_fnn_separable_toy_fits_perfectly():
    x, y = _blobs()
    fnn = B.fnn_train(x, y, 3, SMALL)
    assert (fnn.predict(x) == y).mean() == 1.0


def test_fnn_seed_determinism():
    x, y = _blobs()
    cfg = replace(SMALL, epochs=3)
    a, b = B.fnn_train(x, y, 3, cfg), B.fnn_train(x, y, 3, cfg)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])


def test_fnn_shuffled_labels_near_chance():
    x, y = _blobs(600, seed=1)
    y_shuf = np.random.default_rng(2).permutation(y)
    fnn = B.fnn_train(x[:400], y_shuf[:400], 3, replace(SMALL, epochs=20))
    acc = (fnn.predict(x[400:]) == y_shuf[400:]).mean()
    assert acc < 0.5


def test_fnn_default_shape():
    cfg = B.FnnConfig()
    assert cfg.hidden == (256, 256, 256) and cfg.dropout == 0.3 and cfg.l2 == 0.05


# -- segments and sliding windows -------------------------------------------

class ConstFnn:
    """Predicts class 2 for any window containing the word 'old', else None."""

    n_classes = 6

    def __init__(self, vocab):
        self.j = vocab.index[("word", "old")]

    def predict(self, x):
        return np.where(x[:, self.j] > 0, 2, 0)


def _toy_words():
    # one word per second, 'old' at t=10
    return [("old" if i == 10 else "yes", float(i), i + 0.4) for i in range(20)]


def test_sliding_window_isolated_keyword():
    vocab = B.build_vocab(["how old", "yes yes"], [2, 0], 6)
    words = _toy_words()
    n_steps = 250
    out = B.sliding_eval(ConstFnn(vocab), vocab, words, n_steps, window_s=3.0)
    assert out.shape == (n_steps,)
    # windows starting at words 8, 9 and 10 contain 'old' and cover 8.0..12.4 s
    labelled = np.flatnonzero(out == 2)
    assert labelled.size > 0
    centres = (labelled + 0.5) * 0.08
    assert centres.min() >= 8.0 and centres.max() <= 12.4
    assert out[int(5.0 / 0.08)] == 0


def test_sliding_window_edge_cases():
    vocab = B.build_vocab(["how old", "yes yes"], [2, 0], 6)
    fnn = ConstFnn(vocab)
    assert not B.sliding_eval(fnn, vocab, [], 40).any()
    for w in (3.0, 9.0):
        assert B.sliding_eval(fnn, vocab, _toy_words(), 250, w).shape == (250,)
    with pytest.raises(ValueError):
        B.sliding_eval(fnn, vocab, _toy_words(), 250, 2.0)


def test_training_segments_follow_gold_runs():
    labels = np.zeros(50, np.int32)
    labels[10:20] = 3                      # 0.8 s .. 1.6 s
    words = [("a", 0.1, 0.3), ("how", 0.85, 1.0), ("old", 1.1, 1.5), ("b", 2.0, 2.3)]
    segs = B.training_segments(words, labels)
    assert segs == [("a", 0), ("how old", 3), ("b", 0)]


def test_end_to_end_on_synthetic_calls():
    calls = generate(GenConfig.desk(n_calls=12, seed=4))
    base = B.train_baseline(calls[:10], 6, B.FnnConfig.desk(epochs=3), window_s=6.0, per_group=100)
    for c in calls[10:]:
        assert base.predict_call(c).shape == c.labels.shape
