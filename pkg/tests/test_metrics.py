"""TIMESTEP and INSTANCE metrics against loop-only reference counters."""
import json
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multiqt.metrics import (
    STEP_SECONDS,
    bin_calls,
    confusion,
    eval_by_noise_bin,
    evaluate_labels,
    instance_prf,
    margin_stats,
    micro_prf_questions,
    segments,
    timestep_prf,
)
from oracles import instance_oracle, random_fixture, timestep_oracle

K = 6


def seq(*runs):
    """seq((label, length), ...) -> label array."""
    return np.concatenate([np.full(n, lab, np.int32) for lab, n in runs])


def test_segments_are_maximal_runs():
    s = segments(np.array([0, 0, 2, 2, 2, 0, 1]))
    assert [(x.label, x.start, x.stop) for x in s] == [(0, 0, 2), (2, 2, 5), (0, 5, 6), (1, 6, 7)]
    assert s[1].seconds() == pytest.approx((0.16, 0.40))


# -- TIMESTEP ----------------------------------------------------------------

def test_timestep_perfect():
    g = [seq((0, 5), (1, 7), (0, 3)), seq((2, 9))]
    assert timestep_prf(g, g, K).macro_f1 == 1.0


def test_timestep_all_none_gives_zero_question_recall():
    g = [seq((0, 5), (1, 7), (3, 3))]
    rep = timestep_prf([np.zeros(15, np.int32)], g, K)
    assert all(c.recall == 0 for c in rep.per_class if c.label > 0)


def test_timestep_two_call_fixture():
    g = [seq((0, 4), (1, 6)), seq((2, 5), (0, 5))]
    p = [seq((0, 3), (1, 5), (0, 2)), seq((2, 7), (1, 3))]
    rep = timestep_prf(p, g, K)
    counts, macro = timestep_oracle(p, g, K)
    for c in rep.per_class:
        assert (c.tp, c.fp, c.fn) == counts[c.label]
    assert (rep.macro_p, rep.macro_r, rep.macro_f1) == pytest.approx(macro, abs=0)
    # by hand: None tp=3 fp=2 fn=6; Q1 tp=4 fp=4 fn=2; Q2 tp=5 fp=2 fn=0
    assert counts[0] == (3, 2, 6) and counts[1] == (4, 4, 2) and counts[2] == (5, 2, 0)


def test_length_mismatch_raises():
    with pytest.raises(ValueError, match="length"):
        timestep_prf([np.zeros(3, int)], [np.zeros(4, int)], K)
    with pytest.raises(ValueError, match="length"):
        instance_prf([np.zeros(3, int)], [np.zeros(4, int)], K)


# -- INSTANCE ----------------------------------------------------------------

def test_instance_misaligned_prediction_is_true_positive():
    g = seq((0, 5), (1, 10), (0, 5))
    p = seq((0, 7), (1, 5), (0, 8))         # steps 3-7 of the gold span
    rep = instance_prf([p], [g], K)
    assert rep.f1_of(1) == 1.0


def test_instance_short_prediction_is_ignored():
    g = np.zeros(20, np.int32)
    p = seq((0, 8), (1, 4), (0, 8))
    rep = instance_prf([p], [g], K)
    assert rep.per_class[0].fp == 0 and rep.counted == []


def test_instance_perfect_matches_restricted_timestep():
    g = [seq((0, 5), (1, 10), (0, 5), (3, 6)), seq((4, 8), (0, 2))]
    inst = instance_prf(g, g, K)
    ts = timestep_prf(g, g, K)
    assert inst.macro_f1 == 1.0
    assert [ts.f1_of(k) for k in inst.counted] == [1.0] * len(inst.counted)


def test_question_swap_counts_as_fp_and_fn():
    g = seq((0, 3), (1, 8), (0, 3))
    p = seq((0, 3), (2, 8), (0, 3))
    rep = instance_prf([p], [g], K)
    assert rep.per_class[0].fn == 1 and rep.per_class[1].fp == 1


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_metrics_match_oracles(seed):
    preds, golds = random_fixture(np.random.default_rng(seed))
    preds = [np.array(p) for p in preds]
    golds = [np.array(g) for g in golds]
    ts, inst = timestep_prf(preds, golds, K), instance_prf(preds, golds, K)
    tc, tm = timestep_oracle(preds, golds, K)
    ic, im = instance_oracle(preds, golds, K)
    assert all((c.tp, c.fp, c.fn) == tc[c.label] for c in ts.per_class)
    assert all((c.tp, c.support, c.fp) == (ic[c.label][0], ic[c.label][1], ic[c.label][3] - ic[c.label][2])
               for c in inst.per_class)
    assert (ts.macro_p, ts.macro_r, ts.macro_f1) == tm
    assert (inst.macro_p, inst.macro_r, inst.macro_f1) == im


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_metrics_are_permutation_invariant_over_calls(seed):
    rng = np.random.default_rng(seed)
    preds, golds = random_fixture(rng)
    order = rng.permutation(len(preds))
    a = evaluate_labels(preds, golds, K).summary()
    b = evaluate_labels([preds[i] for i in order], [golds[i] for i in order], K).summary()
    assert a == pytest.approx(b, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(length=st.integers(5, 30), data=st.data())
def test_instance_forgives_boundary_jitter(length, data):
    slack = length - 5
    left = data.draw(st.integers(-slack, slack))
    right = data.draw(st.integers(-(slack - max(left, 0)), slack - max(left, 0)))
    pad = 40
    g = seq((0, pad), (2, length), (0, pad))
    start, stop = pad + left, pad + length - right
    p = np.zeros_like(g)
    p[start:stop] = 2
    if stop - start < 5:
        return
    assert instance_prf([p], [g], K).macro_f1 == 1.0


@given(seed=st.integers(0, 1000))
def test_f1_never_nan(seed):
    preds, golds = random_fixture(np.random.default_rng(seed))
    preds = [[0] * len(g) for g in golds]
    for rep in (timestep_prf(preds, golds, K), instance_prf(preds, golds, K)):
        assert all(np.isfinite([c.f1 for c in rep.per_class])) and np.isfinite(rep.macro_f1)


# -- confusion, margins, noise bins ------------------------------------------

def test_confusion_perfect_and_all_none():
    g = [seq((0, 3), (1, 4), (4, 2))]
    m = confusion(g, g, K).matrix
    assert np.count_nonzero(m - np.diag(np.diag(m))) == 0
    m = confusion([np.zeros(9, int)], g, K).matrix
    assert np.flatnonzero(m.sum(0)).tolist() == [0]


def test_confusion_shares_oracle():
    g = [seq((0, 4), (1, 4), (2, 4))]
    p = [seq((1, 2), (0, 4), (2, 6))]
    rep = confusion(p, g, K)
    # errors: 2 None->Q1, 2 Q1->None, 2 Q1->Q2
    assert rep.errors == 6
    assert rep.question_to_question == pytest.approx(2 / 6)
    assert rep.none_to_question == pytest.approx(2 / 6)
    assert rep.question_to_none == pytest.approx(2 / 6)


def test_margins():
    g = seq((0, 10), (3, 10), (0, 10))
    assert margin_stats([g], [g], K).summary()["start"]["mean"] == 0.0
    p = seq((0, 9), (3, 12), (0, 9))
    rep = margin_stats([p], [g], K)
    assert rep.start_errors == pytest.approx([STEP_SECONDS]) and rep.stop_errors == pytest.approx([0.08])


def test_noise_bins_half_open_and_empty():
    calls = [SimpleNamespace(corruption=c, call_id=str(i), labels=seq((0, 3), (1, 6)))
             for i, c in enumerate([0.0, 0.1, 0.2, 0.2])]
    groups = bin_calls(calls, [0.0, 0.2, 0.4, 0.6])
    assert [len(g) for g in groups] == [2, 2, 0]
    model = SimpleNamespace(config=SimpleNamespace(n_classes=K))
    bins = eval_by_noise_bin(model, calls, [0.0, 0.2, 0.4, 0.6], preds=[c.labels for c in calls])
    assert bins[0].f1 == 1.0 and bins[2].f1 is None and "empty" in bins[2].note


def test_micro_questions_excludes_none():
    g = [seq((0, 10), (1, 4))]
    p = [seq((0, 10), (1, 2), (0, 2))]
    assert micro_prf_questions(p, g, K) == pytest.approx((1.0, 0.5, 2 / 3))


def test_report_serialisation():
    g = [seq((0, 5), (1, 10))]
    rep = timestep_prf(g, g, K)
    recs = [json.loads(line) for line in rep.to_jsonl().splitlines()]
    assert recs[-1]["cls"] == "macro" and recs[0]["version"] == 1
    assert "macro" in rep.table()
