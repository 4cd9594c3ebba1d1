"""Bag-of-n-grams feed-forward baseline evaluated with a sliding window.

Features are TF-IDF weights of word uni/bigrams and character 3-5-grams,
each group reduced to its top features by a chi-squared test between
feature presence and class.  The classifier is a dense ReLU trunk with batch
norm and dropout, trained on text segments whose steps share one label.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .numcore import (
    Adam,
    batchnorm_infer_forward,
    batchnorm_train_backward,
    batchnorm_train_forward,
    dense_backward,
    dense_forward,
    dropout_backward,
    dropout_forward,
    log_softmax,
    relu_backward,
    relu_forward,
    softmax,
    update_running,
)
from .synthdata import STEP_S, decode_words

WORD_ORDERS = (1, 2)
CHAR_ORDERS = (3, 4, 5)
GROUPS = ("word", "char")
VOCAB_HEADER = "# multiqt-bow-vocab v1\tfeature\tgroup\tchi2\tidf"


class VocabError(ValueError):
    pass


def word_ngrams(text: str, orders: Sequence[int] = WORD_ORDERS) -> list[str]:
    toks = text.split()
    return [" ".join(toks[i:i + n]) for n in orders for i in range(len(toks) - n + 1)]


def char_ngrams(text: str, orders: Sequence[int] = CHAR_ORDERS) -> list[str]:
    s = " " + " ".join(text.split()) + " " if text.strip() else ""
    return [s[i:i + n] for n in orders for i in range(len(s) - n + 1)]


_EXTRACT = {"word": word_ngrams, "char": char_ngrams}


def chi2_scores(presence: np.ndarray, labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Chi-squared statistic of the 2 x K table (feature present/absent by class)
    for every column of the binary ``presence`` matrix ``[n_docs, n_features]``."""
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise VocabError("chi-squared needs at least two classes in the training labels")
    n = presence.shape[0]
    onehot = np.eye(n_classes)[labels]                      # [n, K]
    present = presence.T.astype(np.float64) @ onehot        # [F, K]
    class_tot = onehot.sum(axis=0)                          # [K]
    absent = class_tot[None, :] - present
    feat_tot = present.sum(axis=1, keepdims=True)
    score = np.zeros(presence.shape[1])
    for obs, row_tot in ((present, feat_tot), (absent, n - feat_tot)):
        exp = row_tot * class_tot[None, :] / n
        with np.errstate(divide="ignore", invalid="ignore"):
            cell = np.where(exp > 0, (obs - exp) ** 2 / exp, 0.0)
        score += cell.sum(axis=1)
    return score


@dataclass
class BowVocab:
    features: list[str]
    groups: list[str]
    chi2: np.ndarray
    idf: np.ndarray
    index: dict[tuple[str, str], int] = field(default_factory=dict)

    def __post_init__(self):
        self.index = {(g, f): i for i, (g, f) in enumerate(zip(self.groups, self.features))}

    def __len__(self) -> int:
        return len(self.features)

    def to_text(self) -> str:
        lines = [VOCAB_HEADER]
        for f, g, c, i in zip(self.features, self.groups, self.chi2, self.idf):
            lines.append(f"{f}\t{g}\t{float(c)!r}\t{float(i)!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "BowVocab":
        lines = text.split("\n")
        if not lines or lines[0] != VOCAB_HEADER:
            raise VocabError("not a vocabulary file (bad header)")
        feats, groups, chi, idf = [], [], [], []
        for n, line in enumerate(lines[1:], 2):
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4 or parts[1] not in GROUPS:
                raise VocabError(f"line {n}: expected feature, group, chi2, idf")
            feats.append(parts[0])
            groups.append(parts[1])
            chi.append(float(parts[2]))
            idf.append(float(parts[3]))
        return cls(feats, groups, np.array(chi), np.array(idf))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: str | Path) -> "BowVocab":
        return cls.from_text(Path(path).read_text())


def build_vocab(texts: Sequence[str], labels: Sequence[int], n_classes: int,
                per_group: int = 500) -> BowVocab:
    """Top ``per_group`` features per group by chi-squared; ties go to the
    lexicographically smaller feature."""
    labels = np.asarray(labels)
    if len(texts) != len(labels):
        raise VocabError(f"{len(texts)} texts but {len(labels)} labels")
    feats, groups, chis, idfs = [], [], [], []
    n = len(texts)
    for group in GROUPS:
        docs = [set(_EXTRACT[group](t)) for t in texts]
        cand = sorted(set().union(*docs)) if docs else []
        col = {f: j for j, f in enumerate(cand)}
        presence = np.zeros((n, len(cand)), dtype=np.float32)
        for i, d in enumerate(docs):
            presence[i, [col[f] for f in d]] = 1
        scores = chi2_scores(presence, labels, n_classes)
        order = sorted(range(len(cand)), key=lambda j: (-scores[j], cand[j]))[:per_group]
        df = presence.sum(axis=0)
        for j in order:
            feats.append(cand[j])
            groups.append(group)
            chis.append(scores[j])
            idfs.append(math.log((1 + n) / (1 + df[j])) + 1.0)
    return BowVocab(feats, groups, np.array(chis), np.array(idfs))


def featurize(text: str, vocab: BowVocab) -> np.ndarray:
    """L2-normalised TF-IDF vector; all zeros when no feature occurs."""
    v = np.zeros(len(vocab), dtype=np.float32)
    for group in GROUPS:
        for f, c in Counter(_EXTRACT[group](text)).items():
            j = vocab.index.get((group, f))
            if j is not None:
                v[j] = c * vocab.idf[j]
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else v


def featurize_many(texts: Sequence[str], vocab: BowVocab) -> np.ndarray:
    if not texts:
        return np.zeros((0, len(vocab)), np.float32)
    return np.stack([featurize(t, vocab) for t in texts])


# -- classifier --------------------------------------------------------------

@dataclass(frozen=True)
class FnnConfig:
    hidden: tuple[int, ...] = (256, 256, 256)
    dropout: float = 0.3
    l2: float = 0.05
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 32
    bn_momentum: float = 0.99
    bn_eps: float = 1e-5
    seed: int = 0

    @classmethod
    def desk(cls, **kw) -> "FnnConfig":
        base = dict(epochs=20)
        base.update(kw)
        return cls(**base)


@dataclass
class Fnn:
    cfg: FnnConfig
    params: dict[str, np.ndarray]
    n_classes: int

    @classmethod
    def init(cls, n_in: int, n_classes: int, cfg: FnnConfig) -> "Fnn":
        rng = np.random.default_rng(cfg.seed)
        p = {}
        d = n_in
        for i, h in enumerate(cfg.hidden):
            lim = math.sqrt(3.0 / d)
            p[f"h{i}.w"] = rng.uniform(-lim, lim, (d, h)).astype(np.float32)
            p[f"h{i}.b"] = np.zeros(h, np.float32)
            p[f"h{i}.gamma"] = np.ones(h, np.float32)
            p[f"h{i}.beta"] = np.zeros(h, np.float32)
            p[f"h{i}.mean"] = np.zeros(h, np.float32)
            p[f"h{i}.var"] = np.ones(h, np.float32)
            d = h
        lim = math.sqrt(3.0 / d)
        p["out.w"] = rng.uniform(-lim, lim, (d, n_classes)).astype(np.float32)
        p["out.b"] = np.zeros(n_classes, np.float32)
        return cls(cfg, p, n_classes)

    @staticmethod
    def trainable(name: str) -> bool:
        return not (name.endswith(".mean") or name.endswith(".var"))

    def _forward(self, x, training, rng):
        p, cfg = self.params, self.cfg
        caches, stats = [], {}
        h = x
        for i in range(len(cfg.hidden)):
            y, dc = dense_forward(h, p[f"h{i}.w"], p[f"h{i}.b"])
            if training:
                y, bc, mean, var = batchnorm_train_forward(y, p[f"h{i}.gamma"], p[f"h{i}.beta"], cfg.bn_eps)
                stats[i] = (mean, var)
            else:
                y, bc = batchnorm_infer_forward(y, p[f"h{i}.gamma"], p[f"h{i}.beta"],
                                                p[f"h{i}.mean"], p[f"h{i}.var"], cfg.bn_eps)
            a, mask = relu_forward(y)
            h, dmask = dropout_forward(a, cfg.dropout, training, rng)
            caches.append((dc, bc, mask, dmask))
        logits, oc = dense_forward(h, p["out.w"], p["out.b"])
        return logits, caches, oc, stats

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        if x.shape[0] == 0:
            return np.zeros((0, self.n_classes), np.float32)
        return softmax(self._forward(x, False, None)[0])

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.predict_proba(x).argmax(axis=1)


def fnn_train(features: np.ndarray, labels: np.ndarray, n_classes: int,
              cfg: FnnConfig = FnnConfig()) -> Fnn:
    """Mini-batch Adam on cross-entropy plus ``l2 / 2 * |theta|^2``."""
    labels = np.asarray(labels)
    model = Fnn.init(features.shape[1], n_classes, cfg)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(cfg.lr)
    n = features.shape[0]
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for b0 in range(0, n, cfg.batch_size):
            idx = order[b0:b0 + cfg.batch_size]
            if len(idx) < 2:
                continue   # batch statistics need two rows
            x, y = features[idx], labels[idx]
            logits, caches, oc, stats = model._forward(x, True, rng)
            d = np.exp(log_softmax(logits))
            d[np.arange(len(y)), y] -= 1
            d /= len(y)
            grads = {}
            dh, grads["out.w"], grads["out.b"] = dense_backward(d, oc)
            for i in reversed(range(len(cfg.hidden))):
                dc, bc, mask, dmask = caches[i]
                da = relu_backward(dropout_backward(dh, dmask), mask)
                dy, grads[f"h{i}.gamma"], grads[f"h{i}.beta"] = batchnorm_train_backward(da, bc)
                dh, grads[f"h{i}.w"], grads[f"h{i}.b"] = dense_backward(dy, dc)
            p = model.params
            for k in grads:
                grads[k] = grads[k] + cfg.l2 * p[k]
            new = opt.step({k: v for k, v in p.items() if Fnn.trainable(k)}, grads)
            for i, (mean, var) in stats.items():
                new[f"h{i}.mean"] = update_running(p[f"h{i}.mean"], mean, cfg.bn_momentum)
                new[f"h{i}.var"] = update_running(p[f"h{i}.var"], var, cfg.bn_momentum)
            model.params = {**p, **new}
    _population_bn(model, features)
    return model


def _population_bn(model: Fnn, x: np.ndarray) -> None:
    """Set BN statistics to the training-set population values (no dropout)."""
    p, cfg = model.params, model.cfg
    h = x
    for i in range(len(cfg.hidden)):
        y, _ = dense_forward(h, p[f"h{i}.w"], p[f"h{i}.b"])
        p[f"h{i}.mean"] = y.mean(axis=0).astype(np.float32)
        p[f"h{i}.var"] = y.var(axis=0).astype(np.float32)
        y, _ = batchnorm_infer_forward(y, p[f"h{i}.gamma"], p[f"h{i}.beta"],
                                       p[f"h{i}.mean"], p[f"h{i}.var"], cfg.bn_eps)
        h, _ = relu_forward(y)


# -- segments and sliding-window evaluation ----------------------------------

def _word_steps(w0: float, w1: float, n_steps: int) -> tuple[int, int]:
    """Steps whose centre lies in ``[w0, w1]``, as a half-open index range."""
    a = max(int(math.ceil(w0 / STEP_S - 0.5)), 0)
    b = min(int(math.floor(w1 / STEP_S - 0.5)) + 1, n_steps)
    return a, b


def training_segments(words: Sequence[tuple[str, float, float]], labels: np.ndarray,
                      max_s: float = 6.0) -> list[tuple[str, int]]:
    """Text of maximal gold-label runs; each word joins the run holding its
    midpoint.  Long runs are cut into pieces of at most ``max_s`` seconds."""
    n = len(labels)
    out: list[tuple[str, int]] = []
    cur: list[str] = []
    cur_label, cur_t0 = None, 0.0
    for w, t0, t1 in words:
        step = min(max(int((t0 + t1) / 2 / STEP_S), 0), n - 1) if n else 0
        lab = int(labels[step]) if n else 0
        if cur and (lab != cur_label or t1 - cur_t0 > max_s):
            out.append((" ".join(cur), cur_label))
            cur = []
        if not cur:
            cur_label, cur_t0 = lab, t0
        cur.append(w)
    if cur:
        out.append((" ".join(cur), cur_label))
    return out


def call_segments(calls, max_s: float = 6.0, words_of=None) -> tuple[list[str], list[int]]:
    words_of = words_of or (lambda c: decode_words(c.x_s))
    texts, labels = [], []
    for c in calls:
        for t, lab in training_segments(words_of(c), c.labels, max_s):
            texts.append(t)
            labels.append(lab)
    return texts, labels


def sliding_eval(fnn: Fnn, vocab: BowVocab, words: Sequence[tuple[str, float, float]],
                 n_steps: int, window_s: float = 6.0) -> np.ndarray:
    """Label every step by majority vote of the windows covering it.

    One window starts at every word and holds the words that begin within
    ``window_s`` seconds; it covers the steps from its first word's start to
    its last word's end.  Ties and uncovered steps are None (0).
    """
    if not 3.0 <= window_s <= 9.0:
        raise ValueError("window_s must lie in [3, 9] seconds")
    out = np.zeros(n_steps, dtype=np.int32)
    if not words or n_steps == 0:
        return out
    spans, texts = [], []
    starts = [w[1] for w in words]
    for i, (_, t0, _) in enumerate(words):
        j = i
        while j + 1 < len(words) and starts[j + 1] < t0 + window_s:
            j += 1
        texts.append(" ".join(w[0] for w in words[i:j + 1]))
        spans.append(_word_steps(t0, words[j][2], n_steps))
    preds = fnn.predict(featurize_many(texts, vocab))
    votes = np.zeros((n_steps, fnn.n_classes), dtype=np.int64)
    for (a, b), k in zip(spans, preds):
        votes[a:b, k] += 1
    top = votes.max(axis=1)
    winners = (votes == top[:, None]).sum(axis=1)
    best = votes.argmax(axis=1)
    ok = (top > 0) & (winners == 1)
    out[ok] = best[ok]
    return out


@dataclass
class BowBaseline:
    vocab: BowVocab
    fnn: Fnn
    window_s: float = 6.0

    def predict_call(self, call) -> np.ndarray:
        return sliding_eval(self.fnn, self.vocab, decode_words(call.x_s), len(call.labels), self.window_s)


def train_baseline(calls, n_classes: int, cfg: FnnConfig = FnnConfig(), window_s: float = 6.0,
                   per_group: int = 500) -> BowBaseline:
    """Vocabulary, IDF and classifier all come from ``calls`` only."""
    texts, labels = call_segments(calls, window_s)
    vocab = build_vocab(texts, labels, n_classes, per_group)
    fnn = fnn_train(featurize_many(texts, vocab), np.asarray(labels), n_classes, cfg)
    return BowBaseline(vocab, fnn, window_s)
