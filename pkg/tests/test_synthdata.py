"""Synthetic call generator, ASR simulator and on-disk format."""
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multiqt import synthdata as S
from multiqt.metrics import instance_prf
from multiqt.synthdata import GenConfig, InfeasibleConfig, call_rngs, gen_call, gen_script

SHORT = GenConfig.desk(duration_mean=20.0, duration_std=2.0)


@pytest.fixture(scope="module")
def short_calls():
    return S.generate(replace(SHORT, n_calls=6, seed=3))


# -- structure ---------------------------------------------------------------

def test_lengths_and_distributions(short_calls):
    for c in short_calls:
        t_a = c.x_a.shape[0]
        assert t_a % 8 == 0 and c.x_s.shape == (t_a // 2, 29) and c.labels.shape == (t_a // 8,)
        assert c.x_a.shape[1] == 40
        np.testing.assert_allclose(c.x_s.sum(axis=1), 1.0, atol=1e-6)
        assert (c.x_s >= 0).all()


def test_labels_lie_inside_scripted_questions(short_calls):
    for c in short_calls:
        centres = (np.arange(len(c.labels)) + 0.5) * S.STEP_S
        spans = [(u.label_span, u.label) for u in c.script if u.label > 0]
        for t, lab in zip(centres, c.labels):
            if lab:
                assert any(a <= t <= b and lab == k for (a, b), k in spans)
        for (a, b), k in spans:
            inside = (centres >= a) & (centres <= b)
            assert (c.labels[inside] == k).all()


def test_label_center_rule_prefers_earlier_start():
    u1 = S.Utterance("question", "taker", 1, ["a"], [(0.0, 0.2)], True, 1, 1.0, (0.0, 0.2))
    u2 = S.Utterance("question", "taker", 2, ["b"], [(0.2, 0.5)], True, 2, 1.0, (0.2, 0.5))
    # step 2 has centre 0.2, covered by both closed spans
    assert S.label_steps([u2, u1], 4).tolist() == [1, 1, 1, 2]


def test_seed_determinism_and_per_call_streams():
    cfg = replace(SHORT, n_calls=3, seed=9)
    a, b = S.generate(cfg), S.generate(cfg)
    tail = S.generate(replace(cfg, n_calls=1), start=2)
    for x, y in zip(a, b):
        assert S.encode_call(x) == S.encode_call(y)
    assert S.encode_call(tail[0]) == S.encode_call(a[2])


def test_infeasible_config():
    with pytest.raises(InfeasibleConfig):
        gen_call(GenConfig(duration_mean=3.0, duration_min=2.0, max_question_s=4.0))
    with pytest.raises(ValueError):
        GenConfig(corruption=1.5)


def test_default_statistics():
    cfg = GenConfig()
    counts = np.zeros(6)
    q_seconds = total = 0.0
    for i in range(1000):
        script, dur = gen_script(cfg, call_rngs(0, i)[0])
        total += dur
        for u in script:
            if u.label:
                counts[u.label] += 1
                q_seconds += u.stop - u.start
    share = counts[1:] / counts[1:].sum()
    np.testing.assert_allclose(share, S.QUESTION_WEIGHTS, atol=0.03)
    assert 0.01 < q_seconds / total < 0.03        # roughly 2% of the audio
    assert abs(total / 1000 - 166) < 10


# -- acoustic templates ------------------------------------------------------

def _utterance_pattern(call, u):
    a0, a1 = int(round(u.start * S.AUDIO_FPS)), int(round(u.stop * S.AUDIO_FPS))
    return call.x_a[a0:a1, 8:28].mean(axis=0)


def _template_accuracy(calls, ids):
    temps = np.stack([S.class_template(i) for i in ids])
    hits = n = 0
    for c in calls:
        for u in c.script:
            if u.label:
                v = _utterance_pattern(c, u)
                hits += ids[int(np.argmax(temps @ v))] == u.pattern
                n += 1
    return hits / n


def test_clean_question_patterns_recovered_by_template_matching():
    calls = S.generate(replace(SHORT, n_calls=20, noise_sigma=0.0, corruption=0.0))
    assert _template_accuracy(calls, list(range(1, 7))) == 1.0


def test_symptom_audio_is_weaker_than_question_audio():
    q = S.generate(replace(SHORT, n_calls=30, seed=1))
    s = S.symptom_variant(replace(SHORT, n_calls=30, seed=1))
    acc_q = _template_accuracy(q, list(range(1, 12)))
    acc_s = _template_accuracy(s, list(range(1, 12)))
    assert acc_q > acc_s + 0.2


def test_symptom_text_matcher_at_zero_corruption():
    calls = S.symptom_variant(replace(SHORT, n_calls=30, seed=2, corruption=0.0))
    preds = []
    for c in calls:
        words = S.decode_words(c.x_s)
        toks = [w for w, _, _ in words]
        pred = np.zeros_like(c.labels)
        centres = (np.arange(len(pred)) + 0.5) * S.STEP_S
        for k, phrases in S.SYMPTOMS.items():
            for ph in phrases:
                ph = ph.split()
                for i in range(len(toks) - len(ph) + 1):
                    if toks[i:i + len(ph)] == ph:
                        t0, t1 = words[i][1], words[i + len(ph) - 1][2]
                        pred[(centres >= t0) & (centres <= t1)] = k
        preds.append(pred)
    assert instance_prf(preds, [c.labels for c in calls], 6).macro_f1 > 0.95


# -- ASR simulator -----------------------------------------------------------

def test_zero_corruption_decodes_exactly():
    for i in range(10):
        r = call_rngs(0, i)
        script, dur = gen_script(GenConfig(), r[0])
        xs, words = S.simulate_asr(script, 0.0, r[2], S.n_audio_frames(dur) // 2)
        assert S.decode_argmax(xs) == S.script_text(script)
        assert [w for w, _, _ in S.decode_words(xs)] == [w for w, _, _ in words]


def test_medium_corruption_cer_band():
    cers = []
    for i in range(100):
        r = call_rngs(0, i)
        script, dur = gen_script(GenConfig(), r[0])
        xs, _ = S.simulate_asr(script, 0.3, r[2], S.n_audio_frames(dur) // 2)
        cers.append(S.character_error_rate(S.script_text(script), S.decode_argmax(xs)))
    assert 0.2 <= np.mean(cers) <= 0.4


def test_edit_distance_examples():
    assert S.edit_distance("kitten", "sitting") == 3
    assert S.edit_distance("", "abc") == 3
    assert S.edit_distance("abc", "abc") == 0


@settings(max_examples=200, deadline=None)
@given(a=st.text("abc ", max_size=12), b=st.text("abc ", max_size=12))
def test_edit_distance_matches_recursive_definition(a, b):
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    assert S.edit_distance(a, b) == prev[-1]


# -- on-disk format ----------------------------------------------------------

def test_dataset_round_trip(tmp_path, short_calls):
    digest = S.write_dataset(short_calls, tmp_path, gen_config=SHORT)
    ds = S.read_dataset(tmp_path)
    assert ds.digest == digest and GenConfig.from_dict(ds.config) == SHORT
    for a, b in zip(short_calls, ds.calls):
        assert S.encode_call(a) == S.encode_call(b)


def test_fold_counts_balanced():
    folds = S.stratified_folds([i % 4 for i in range(53)], 5)
    counts = np.bincount(folds, minlength=5)
    assert counts.max() - counts.min() <= 1


def test_corrupt_files_rejected(tmp_path, short_calls):
    S.write_dataset(short_calls[:2], tmp_path)
    f = tmp_path / f"{short_calls[0].call_id}.mqtd"
    data = f.read_bytes()
    f.write_bytes(data[:-10])
    with pytest.raises(S.DatasetError, match="hash"):
        S.read_dataset(tmp_path)
    with pytest.raises(S.DatasetError):
        S.decode_call(data[:-10])
    bumped = bytearray(data)
    bumped[4] = 99                                   # version field
    with pytest.raises(S.DatasetError, match="version"):
        S.decode_call(bytes(bumped))


def test_manifest_file_disagreement(tmp_path, short_calls):
    S.write_dataset(short_calls[:2], tmp_path)
    (tmp_path / f"{short_calls[1].call_id}.mqtd").unlink()
    with pytest.raises(S.DatasetError, match="missing"):
        S.read_dataset(tmp_path)


def test_dump_call(short_calls):
    text = S.dump_call(short_calls[0], max_steps=50)
    assert "task=questions" in text and "labels:" in text and "asr:" in text
