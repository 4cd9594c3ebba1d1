"""Segment and timestep evaluation for per-step label sequences.

TIMESTEP pools per-step confusion counts over all calls and macro-averages
per-class P/R/F1 over every class, "None" included.  INSTANCE works on
maximal same-label runs of the question classes only: a gold run counts as
found when at least ``min_run`` consecutive steps inside it carry its label,
and a predicted run of at least ``min_run`` steps is a false positive unless
it has ``min_run`` consecutive correct steps.

Classes that occur neither in the gold nor in the predictions are left out
of the macro average instead of contributing a 0/0.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

STEP_SECONDS = 0.08
MIN_RUN = 5
REPORT_VERSION = 1


@dataclass(frozen=True)
class Segment:
    label: int
    start: int  # first step
    stop: int   # one past the last step

    @property
    def length(self) -> int:
        return self.stop - self.start

    def seconds(self) -> tuple[float, float]:
        return self.start * STEP_SECONDS, self.stop * STEP_SECONDS


def segments(seq: np.ndarray) -> list[Segment]:
    """Maximal runs of equal labels."""
    seq = np.asarray(seq)
    if seq.size == 0:
        return []
    cuts = np.flatnonzero(np.diff(seq)) + 1
    starts = np.concatenate([[0], cuts])
    stops = np.concatenate([cuts, [seq.size]])
    return [Segment(int(seq[a]), int(a), int(b)) for a, b in zip(starts, stops)]


def longest_run(mask: np.ndarray) -> int:
    best = cur = 0
    for v in mask:
        cur = cur + 1 if v else 0
        best = max(best, cur)
    return best


def _safe_div(a: float, b: float) -> float:
    return a / b if b else 0.0


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


@dataclass
class ClassPrf:
    label: int
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    support: int


@dataclass
class PrfReport:
    kind: str
    per_class: list[ClassPrf]
    macro_p: float
    macro_r: float
    macro_f1: float
    counted: list[int] = field(default_factory=list)  # classes entering the macro average

    def f1_of(self, label: int) -> float:
        for c in self.per_class:
            if c.label == label:
                return c.f1
        raise KeyError(label)

    def to_records(self) -> list[dict]:
        rows = [dict(version=REPORT_VERSION, metric=self.kind, cls=c.label, **{
            k: v for k, v in asdict(c).items() if k != "label"}) for c in self.per_class]
        rows.append(dict(version=REPORT_VERSION, metric=self.kind, cls="macro", precision=self.macro_p,
                         recall=self.macro_r, f1=self.macro_f1))
        return rows

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.to_records())

    def table(self, names: Sequence[str] | None = None) -> str:
        head = f"{self.kind.upper():<10} {'P':>6} {'R':>6} {'F1':>6} {'TP':>6} {'FP':>6} {'FN':>6}"
        lines = [head]
        for c in self.per_class:
            name = names[c.label] if names else str(c.label)
            lines.append(f"{name:<10} {100 * c.precision:6.1f} {100 * c.recall:6.1f} {100 * c.f1:6.1f} "
                         f"{c.tp:6d} {c.fp:6d} {c.fn:6d}")
        lines.append(f"{'macro':<10} {100 * self.macro_p:6.1f} {100 * self.macro_r:6.1f} {100 * self.macro_f1:6.1f}")
        return "\n".join(lines)


def _macro(kind, rows: list[ClassPrf], present: set[int]) -> PrfReport:
    counted = [c for c in rows if c.label in present]
    if counted:
        mp = float(np.mean([c.precision for c in counted]))
        mr = float(np.mean([c.recall for c in counted]))
        mf = float(np.mean([c.f1 for c in counted]))
    else:
        mp = mr = mf = 0.0
    return PrfReport(kind, rows, mp, mr, mf, [c.label for c in counted])


def _check(preds, golds):
    if len(preds) != len(golds):
        raise ValueError(f"{len(preds)} predicted sequences vs {len(golds)} gold sequences")
    for i, (p, g) in enumerate(zip(preds, golds)):
        if len(p) != len(g):
            raise ValueError(f"call {i}: prediction length {len(p)} != gold length {len(g)}")


def confusion_matrix(preds, golds, n_classes: int) -> np.ndarray:
    """``m[gold, pred]`` step counts pooled over calls."""
    _check(preds, golds)
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    for p, g in zip(preds, golds):
        np.add.at(m, (np.asarray(g, np.int64), np.asarray(p, np.int64)), 1)
    return m


def timestep_prf(preds, golds, n_classes: int) -> PrfReport:
    m = confusion_matrix(preds, golds, n_classes)
    rows = []
    present = set()
    for k in range(n_classes):
        tp = int(m[k, k])
        fp = int(m[:, k].sum() - tp)
        fn = int(m[k, :].sum() - tp)
        if tp + fp + fn:
            present.add(k)
        p, r = _safe_div(tp, tp + fp), _safe_div(tp, tp + fn)
        rows.append(ClassPrf(k, p, r, _f1(p, r), tp, fp, fn, tp + fn))
    return _macro("timestep", rows, present)


@dataclass
class _InstanceCounts:
    gold: int = 0
    gold_found: int = 0
    pred: int = 0
    pred_matched: int = 0


def instance_matches(pred: np.ndarray, gold: np.ndarray, label: int, min_run: int = MIN_RUN):
    """``(gold_segments, found_flags, pred_runs, matched_flags)`` for one class in one call."""
    pred = np.asarray(pred)
    gold = np.asarray(gold)
    correct = (pred == label) & (gold == label)
    gsegs = [s for s in segments(gold) if s.label == label]
    found = [longest_run(correct[s.start:s.stop]) >= min_run for s in gsegs]
    psegs = [s for s in segments(pred) if s.label == label and s.length >= min_run]
    matched = [longest_run(correct[s.start:s.stop]) >= min_run for s in psegs]
    return gsegs, found, psegs, matched


def instance_prf(preds, golds, n_classes: int, min_run: int = MIN_RUN) -> PrfReport:
    """INSTANCE P/R/F1 over classes ``1..n_classes-1``.

    Precision counts matched predicted runs, recall counts found gold runs;
    a question labelled as another question therefore costs both an FN and
    an FP.  ``tp`` in the report is the number of found gold runs.
    """
    _check(preds, golds)
    counts = {k: _InstanceCounts() for k in range(1, n_classes)}
    for p, g in zip(preds, golds):
        for k in range(1, n_classes):
            gsegs, found, psegs, matched = instance_matches(p, g, k, min_run)
            c = counts[k]
            c.gold += len(gsegs)
            c.gold_found += sum(found)
            c.pred += len(psegs)
            c.pred_matched += sum(matched)
    rows = []
    present = set()
    for k, c in counts.items():
        if c.gold or c.pred:
            present.add(k)
        p, r = _safe_div(c.pred_matched, c.pred), _safe_div(c.gold_found, c.gold)
        rows.append(ClassPrf(k, p, r, _f1(p, r), c.gold_found, c.pred - c.pred_matched,
                             c.gold - c.gold_found, c.gold))
    return _macro("instance", rows, present)


@dataclass
class ConfusionReport:
    matrix: np.ndarray
    errors: int
    question_to_question: float   # share of wrong steps that swap two question classes
    none_to_question: float       # gold None predicted as a question
    question_to_none: float       # gold question predicted as None

    def table(self, names: Sequence[str] | None = None) -> str:
        k = self.matrix.shape[0]
        names = list(names) if names else [str(i) for i in range(k)]
        w = max(8, max(len(n) for n in names) + 1)
        lines = ["gold\\pred".ljust(w) + "".join(n[:w - 1].rjust(w) for n in names)]
        for i in range(k):
            lines.append(names[i].ljust(w) + "".join(str(v).rjust(w) for v in self.matrix[i]))
        lines.append(f"errors={self.errors} q->q={self.question_to_question:.3f} "
                     f"none->q={self.none_to_question:.3f} q->none={self.question_to_none:.3f}")
        return "\n".join(lines)


def confusion(preds, golds, n_classes: int) -> ConfusionReport:
    m = confusion_matrix(preds, golds, n_classes)
    errors = int(m.sum() - np.trace(m))
    qq = int(m[1:, 1:].sum() - np.trace(m[1:, 1:]))
    nq = int(m[0, 1:].sum())
    qn = int(m[1:, 0].sum())
    return ConfusionReport(m, errors, _safe_div(qq, errors), _safe_div(nq, errors), _safe_div(qn, errors))


@dataclass
class MarginReport:
    start_errors: list[float]   # seconds; positive = prediction starts before the gold span
    stop_errors: list[float]    # seconds; positive = prediction ends after the gold span

    def summary(self) -> dict:
        def stats(v):
            if not v:
                return {"n": 0}
            a = np.asarray(v)
            return {"n": len(v), "mean": float(a.mean()), "median": float(np.median(a)), "std": float(a.std())}
        return {"start": stats(self.start_errors), "stop": stats(self.stop_errors)}


def margin_stats(preds, golds, n_classes: int, min_run: int = MIN_RUN) -> MarginReport:
    """Signed boundary errors of every INSTANCE-matched gold/prediction pair.

    A found gold run is paired with the predicted run of its label that holds
    the longest correct stretch inside it.
    """
    _check(preds, golds)
    starts, stops = [], []
    for p, g in zip(preds, golds):
        p = np.asarray(p)
        g = np.asarray(g)
        for k in range(1, n_classes):
            gsegs, found, _, _ = instance_matches(p, g, k, min_run)
            runs = [s for s in segments(p) if s.label == k]
            for gs, ok in zip(gsegs, found):
                if not ok:
                    continue
                best = max(runs, key=lambda s: longest_run(
                    (p[max(s.start, gs.start):min(s.stop, gs.stop)] == k)))
                starts.append((gs.start - best.start) * STEP_SECONDS)
                stops.append((best.stop - gs.stop) * STEP_SECONDS)
    return MarginReport(starts, stops)


def micro_prf_questions(preds, golds, n_classes: int) -> tuple[float, float, float]:
    """Micro-averaged TIMESTEP P/R/F1 pooled over the question classes only."""
    m = confusion_matrix(preds, golds, n_classes)
    tp = int(np.trace(m[1:, 1:]))
    pred_q = int(m[:, 1:].sum())
    gold_q = int(m[1:, :].sum())
    p, r = _safe_div(tp, pred_q), _safe_div(tp, gold_q)
    return p, r, _f1(p, r)


# -- model evaluation ---------------------------------------------------------

def permuted(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return x[rng.permutation(x.shape[0])]


def predict_calls(model, calls, permute: str | None = None, seed: int = 0) -> list[np.ndarray]:
    """Argmax labels for each call; ``permute`` in {None, "audio", "text"}
    shuffles that modality's time axis before inference."""
    from .model import argmax_labels, forward

    rng = np.random.default_rng(seed)
    out = []
    for call in calls:
        xa, xs = call.x_a, call.x_s
        if permute == "audio":
            xa = permuted(xa, rng)
        elif permute == "text":
            xs = permuted(xs, rng)
        elif permute not in (None, "none"):
            raise ValueError(f"permute must be audio, text or None, got {permute!r}")
        res = forward(model, [xa], [xs], training=False)
        out.append(argmax_labels(res.logits))
    return out


@dataclass
class EvalReport:
    timestep: PrfReport
    instance: PrfReport
    n_calls: int

    def summary(self) -> dict:
        return {
            "n_calls": self.n_calls,
            "timestep_p": self.timestep.macro_p, "timestep_r": self.timestep.macro_r,
            "timestep_f1": self.timestep.macro_f1,
            "instance_p": self.instance.macro_p, "instance_r": self.instance.macro_r,
            "instance_f1": self.instance.macro_f1,
        }


def evaluate_labels(preds, golds, n_classes: int) -> EvalReport:
    return EvalReport(timestep_prf(preds, golds, n_classes), instance_prf(preds, golds, n_classes), len(golds))


def evaluate(model, calls, permute: str | None = None, seed: int = 0) -> EvalReport:
    preds = predict_calls(model, calls, permute, seed)
    return evaluate_labels(preds, [c.labels for c in calls], model.config.n_classes)


@dataclass
class NoiseBin:
    low: float
    high: float
    n_calls: int
    precision: float | None
    recall: float | None
    f1: float | None
    note: str = ""


def bin_calls(calls, edges: Sequence[float]) -> list[list]:
    """Group calls by corruption level into half-open bins ``[e_i, e_{i+1})``."""
    out = [[] for _ in range(len(edges) - 1)]
    for call in calls:
        for i in range(len(edges) - 1):
            if edges[i] <= call.corruption < edges[i + 1]:
                out[i].append(call)
                break
    return out


def eval_by_noise_bin(model, calls, edges: Sequence[float], preds=None) -> list[NoiseBin]:
    """Question-class micro F1 per corruption bin; empty bins carry a note."""
    if preds is None:
        preds = predict_calls(model, calls)
    by_id = {c.call_id: p for c, p in zip(calls, preds)}
    k = model.config.n_classes
    out = []
    for (lo, hi), group in zip(zip(edges[:-1], edges[1:]), bin_calls(calls, edges)):
        if not group:
            out.append(NoiseBin(lo, hi, 0, None, None, None, "empty bin omitted"))
            continue
        p, r, f = micro_prf_questions([by_id[c.call_id] for c in group], [c.labels for c in group], k)
        out.append(NoiseBin(lo, hi, len(group), p, r, f))
    return out
