"""Synthetic emergency-call corpus.

Each call is a latent *script* of alternating call-taker / caller utterances.
The script is rendered into two time-aligned modalities:

* ``x_a`` -- 40 surrogate "log-mel" channels at 100 frames/s.  These are not
  real spectra.  Channel groups carry speaker identity (0-7), a per-utterance
  acoustic pattern that is weakly class-dependent (8-27), pitch / intonation
  (28-31) and background only (32-39).
* ``x_s`` -- a 29-way CTC-style character posterior at 50 frames/s produced
  by :func:`simulate_asr`, with per-character corruption rate ``c``.

Labels are emitted at the model output rate (one step per 80 ms of audio).
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import records

AUDIO_FPS = 100
TEXT_FPS = 50
AUDIO_PER_STEP = 8
STEP_S = AUDIO_PER_STEP / AUDIO_FPS
N_AUDIO = 40
BLANK = 0
ALPHABET = "_ '" + "abcdefghijklmnopqrstuvwxyz"  # index 0 is the CTC blank
N_TEXT = len(ALPHABET)
CHAR_INDEX = {ch: i for i, ch in enumerate(ALPHABET)}
LETTERS = np.arange(3, N_TEXT)

# per-channel std of utterance-level acoustic variation, relative to noise_sigma
ACOUSTIC_SPREAD = 0.8

DATASET_MAGIC = b"MQTD"
MANIFEST = "manifest.tsv"
MANIFEST_HEADER = "# multiqt-dataset v1"

QUESTION_NAMES = ("None", "Q1-address", "Q2-problem", "Q3-age", "Q4-breathing", "Q5-conscious")
SYMPTOM_NAMES = ("None", "S1-consciousness", "S2-breathing", "S3-pain", "S4-trauma", "S5-hemorrhage")
# share of each question class among labelled questions
QUESTION_WEIGHTS = (0.263, 0.216, 0.213, 0.116, 0.192)

QUESTIONS = {
    1: ["what is the address", "what's the address of the emergency", "where are you right now",
        "where is the patient", "what's the exact address", "where is the emergency"],
    2: ["what's the problem", "tell me exactly what happened", "what is going on there",
        "what happened", "what's the emergency", "what's wrong with him"],
    3: ["how old is she", "how old is he", "how old is the patient", "what is his age",
        "what's her age", "how old is your husband"],
    4: ["is she breathing", "is he breathing normally", "is the patient breathing in a normal pattern",
        "is she breathing okay", "can he breathe", "is his breathing normal"],
    5: ["is he conscious", "is she awake", "is the patient conscious and awake", "is he responding to you",
        "is she alert", "is he conscious now"],
}
OTHER_QUESTIONS = [
    "do you have a defibrillator", "are you with the patient now", "can you unlock the front door",
    "what is your phone number", "is there anyone else with you", "did she take any medication",
    "is the door open", "are there any pets in the house", "what is your name",
]
TAKER_STATEMENTS = [
    "okay", "help is on the way", "stay on the line with me", "i'm sending an ambulance now",
    "okay i have the address", "listen carefully", "alright", "the ambulance is coming",
    "i understand", "okay stay calm",
]
CALLER_ANSWERS = [
    "yes", "no", "i don't know", "please hurry", "she fell down in the kitchen", "my husband collapsed",
    "twelve main street", "she is seventy two", "he is sixty", "we are at home", "he is not moving",
    "yes she is", "okay", "thank you", "i'm with her now",
]
# caller statements that reuse the question keywords
CALLER_DISTRACTORS = {
    1: ["the address is twelve main street", "we are at the address on main street"],
    2: ["the problem is his chest", "i don't know what happened"],
    3: ["she is eighty years old", "i don't know how old he is"],
    4: ["she is not breathing", "he is breathing but slowly"],
    5: ["he is awake now", "i think she is conscious"],
}
SYMPTOMS = {
    1: ["he is unconscious", "she passed out", "he fainted"],
    2: ["she can't breathe", "he is gasping for air", "she has trouble breathing"],
    3: ["he has chest pain", "she is in a lot of pain", "it hurts really bad"],
    4: ["he fell down the stairs", "she hit her head", "he was hit by a car"],
    5: ["there is a lot of blood", "he is bleeding badly", "she is bleeding from the head"],
}
SYMPTOM_PREFIXES = ["", "", "please hurry", "i think", "yes", "oh my god", "i don't know"]
SYMPTOM_WEIGHTS = (0.22, 0.22, 0.2, 0.18, 0.18)


def _unit(rng, n):
    v = rng.normal(size=n)
    return v / np.linalg.norm(v)


def _world():
    """Speaker and acoustic-pattern templates shared by every call and dataset."""
    rng = np.random.default_rng(20200705)
    common = _unit(rng, 20)
    specific = np.stack([_unit(rng, 20) for _ in range(12)])
    speakers = {
        "taker": np.array([1.0, 0.9, 0.7, 0.5, 0.2, 0.1, 0.1, 0.0]),
        "caller": np.array([0.1, 0.2, 0.4, 0.5, 0.8, 0.9, 0.7, 0.6]),
    }
    return common, specific, speakers


_COMMON, _SPECIFIC, _SPEAKERS = _world()


def class_template(pattern: int) -> np.ndarray:
    """Mean acoustic pattern (channels 8-27) for pattern id 1..5 (question
    classes), 6 (other questions) or 7..11 (symptom classes).  Id 0 has none."""
    if pattern == 0:
        return np.zeros(20)
    if pattern <= 6:
        v = 0.8 * _COMMON + 0.6 * _SPECIFIC[pattern - 1]
    else:
        v = _SPECIFIC[pattern - 1]
    return v / np.linalg.norm(v)


@dataclass(frozen=True)
class GenConfig:
    n_calls: int = 200
    duration_mean: float = 166.0
    duration_std: float = 65.0
    duration_min: float = 20.0
    task: str = "questions"                       # or "symptoms"
    class_weights: tuple[float, ...] = QUESTION_WEIGHTS
    question_prob: float = 0.065                  # P(call-taker turn is a labelled question)
    other_question_prob: float = 0.15
    distractor_prob: float = 0.12                 # P(caller turn reuses a class keyword)
    symptom_prob: float = 0.06                    # P(caller turn mentions a symptom)
    max_question_s: float = 4.0
    char_seconds: tuple[float, float] = (0.055, 0.075)
    gap_seconds: tuple[float, float] = (0.2, 1.4)
    rising_prob_question: float = 0.85
    rising_prob_statement: float = 0.05
    pattern_gain: float = 1.0
    symptom_pattern_gain: float = 0.35
    distractor_pattern_gain: float = 0.5
    noise_sigma: float = 0.5
    corruption: float = 0.3
    corruption_spread: float = 0.0               # per-call c ~ U(c - spread, c + spread)
    asr_peak: float = 6.0
    asr_temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.task not in ("questions", "symptoms"):
            raise ValueError(f"task must be 'questions' or 'symptoms', got {self.task!r}")
        if not 0.0 <= self.corruption <= 1.0:
            raise ValueError("corruption must be in [0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if len(self.class_weights) != 5:
            raise ValueError("class_weights needs one weight per class (5)")

    @classmethod
    def desk(cls, **kw) -> "GenConfig":
        """Shorter, question-denser calls sized for single-core training runs."""
        base = dict(duration_mean=32.0, duration_std=6.0, duration_min=16.0,
                    question_prob=0.45, other_question_prob=0.2, distractor_prob=0.3,
                    symptom_prob=0.35)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        d = dict(d)
        for key in ("class_weights", "char_seconds", "gap_seconds"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class Utterance:
    kind: str              # question | other_question | statement | answer | distractor | symptom
    speaker: str           # taker | caller
    label: int             # gold class id, 0 = None
    words: list[str]
    word_times: list[tuple[float, float]]
    rising: bool
    pattern: int           # acoustic template id, see class_template
    gain: float
    label_span: tuple[float, float] | None = None

    @property
    def start(self) -> float:
        return self.word_times[0][0]

    @property
    def stop(self) -> float:
        return self.word_times[-1][1]


@dataclass
class SyntheticCall:
    call_id: str
    x_a: np.ndarray
    x_s: np.ndarray
    labels: np.ndarray
    words: list[tuple[str, float, float]]
    corruption: float
    noise_sigma: float
    task: str
    script: list[Utterance] = field(default_factory=list)

    @property
    def duration(self) -> float:
        return self.x_a.shape[0] / AUDIO_FPS

    @property
    def n_questions(self) -> int:
        return sum(1 for u in self.script if u.label > 0)

    @property
    def text(self) -> str:
        return " ".join(w for w, _, _ in self.words)


class InfeasibleConfig(ValueError):
    pass


# -- script ------------------------------------------------------------------

def _place_words(text: str, t0: float, char_s: float) -> list[tuple[float, float]]:
    times = []
    t = t0
    for w in text.split():
        d = len(w) * char_s
        times.append((round(t, 4), round(t + d, 4)))
        t += d + char_s  # one character slot for the space
    return times


def _choice(rng, items):
    return items[int(rng.integers(len(items)))]


def gen_script(cfg: GenConfig, rng: np.random.Generator) -> tuple[list[Utterance], float]:
    """Sample utterances until the call duration is filled."""
    if cfg.max_question_s > max(cfg.duration_min, cfg.duration_mean):
        raise InfeasibleConfig(
            f"question duration {cfg.max_question_s}s exceeds call duration {cfg.duration_mean}s"
        )
    duration = max(cfg.duration_min, rng.normal(cfg.duration_mean, cfg.duration_std))
    weights = np.asarray(cfg.class_weights if cfg.task == "questions" else SYMPTOM_WEIGHTS, float)
    weights = weights / weights.sum()
    out: list[Utterance] = []
    t = float(rng.uniform(*cfg.gap_seconds))
    speaker = "taker"
    while True:
        char_s = float(rng.uniform(*cfg.char_seconds))
        u = _sample_utterance(cfg, rng, speaker, weights)
        text = " ".join(u[1])
        u_dur = len(text) * char_s
        if t + u_dur + 0.3 > duration:
            break
        kind, words, label, pattern, gain, rising = u
        times = _place_words(text, t, char_s)
        utt = Utterance(kind, speaker, label, words, times, rising, pattern, gain)
        if label > 0:
            if kind == "symptom":
                n_prefix = len(words) - len(_choice_len(words, label))
                span_times = times[n_prefix:]
                utt.label_span = (span_times[0][0], span_times[-1][1])
            else:
                utt.label_span = (utt.start, utt.stop)
        out.append(utt)
        t = utt.stop + float(rng.uniform(*cfg.gap_seconds))
        speaker = "caller" if speaker == "taker" else "taker"
    return out, duration


def _choice_len(words, label):
    # the symptom phrase is the suffix of the utterance that matches a bank entry
    text = " ".join(words)
    for phrase in SYMPTOMS[label]:
        if text.endswith(phrase):
            return phrase.split()
    raise AssertionError("symptom phrase not found")


def _sample_utterance(cfg, rng, speaker, weights):
    r = rng.random()
    if speaker == "taker":
        if cfg.task == "questions" and r < cfg.question_prob:
            label = int(rng.choice(5, p=weights)) + 1
            text = _choice(rng, QUESTIONS[label])
            rising = rng.random() < cfg.rising_prob_question
            return "question", text.split(), label, label, cfg.pattern_gain, rising
        r -= cfg.question_prob if cfg.task == "questions" else 0.0
        if r < cfg.other_question_prob:
            rising = rng.random() < cfg.rising_prob_question
            pool = OTHER_QUESTIONS if cfg.task == "questions" else OTHER_QUESTIONS + sum(QUESTIONS.values(), [])
            return "other_question", _choice(rng, pool).split(), 0, 6, cfg.pattern_gain, rising
        rising = rng.random() < cfg.rising_prob_statement
        return "statement", _choice(rng, TAKER_STATEMENTS).split(), 0, 0, 0.0, rising
    rising = rng.random() < cfg.rising_prob_statement
    if cfg.task == "symptoms" and r < cfg.symptom_prob:
        label = int(rng.choice(5, p=weights)) + 1
        phrase = _choice(rng, SYMPTOMS[label])
        prefix = _choice(rng, SYMPTOM_PREFIXES)
        text = f"{prefix} {phrase}".strip()
        return "symptom", text.split(), label, 6 + label, cfg.symptom_pattern_gain, rising
    r -= cfg.symptom_prob if cfg.task == "symptoms" else 0.0
    if r < cfg.distractor_prob:
        k = int(rng.integers(1, 6))
        text = _choice(rng, CALLER_DISTRACTORS[k])
        pattern = k if cfg.task == "questions" else 0
        return "distractor", text.split(), 0, pattern, cfg.distractor_pattern_gain, rising
    return "answer", _choice(rng, CALLER_ANSWERS).split(), 0, 0, 0.0, rising


# -- rendering ---------------------------------------------------------------

def n_audio_frames(duration: float) -> int:
    """Frames for ``duration`` seconds, rounded up to a whole output step."""
    n = int(math.ceil(duration * AUDIO_FPS))
    return int(math.ceil(n / AUDIO_PER_STEP) * AUDIO_PER_STEP)


def render_audio(script: Sequence[Utterance], n_frames: int, sigma: float,
                 rng: np.random.Generator) -> np.ndarray:
    x = np.zeros((n_frames, N_AUDIO))
    # slowly varying line noise on the background channels
    drift = np.cumsum(rng.normal(0, 0.02, size=(n_frames, 8)), axis=0)
    x[:, 32:40] = np.clip(drift, -1, 1) * 0.5
    for u in script:
        a0 = int(round(u.start * AUDIO_FPS))
        a1 = min(int(round(u.stop * AUDIO_FPS)), n_frames)
        if a1 <= a0:
            continue
        n = a1 - a0
        env = np.full(n, 0.3)
        for w0, w1 in u.word_times:
            i0 = max(int(round(w0 * AUDIO_FPS)) - a0, 0)
            i1 = min(int(round(w1 * AUDIO_FPS)) - a0, n)
            if i1 > i0:
                # syllable-rate modulation inside each word
                ph = rng.uniform(0, 2 * np.pi)
                k = np.arange(i1 - i0)
                env[i0:i1] = 0.75 + 0.25 * np.sin(2 * np.pi * k / rng.uniform(12, 20) + ph)
        spk = _SPEAKERS[u.speaker] * rng.uniform(0.8, 1.2) + rng.normal(0, 0.1, 8)
        x[a0:a1, 0:8] += env[:, None] * spk[None, :]
        pattern = u.gain * class_template(u.pattern)
        # utterance-level acoustic variability grows with the noise level
        pattern = pattern + sigma * ACOUSTIC_SPREAD * rng.normal(0, 1, 20)
        x[a0:a1, 8:28] += env[:, None] * pattern[None, :]
        pitch = np.full(n, rng.uniform(0.2, 0.5))
        if u.rising:
            start = int(n * 0.45)
            pitch[start:] += np.linspace(0, 1.2, n - start)
        else:
            pitch -= np.linspace(0, 0.2, n)
        x[a0:a1, 28:32] += (env * pitch)[:, None] * np.array([1.0, 0.8, 0.6, 0.4])[None, :]
    if sigma > 0:
        x += rng.normal(0, sigma, size=x.shape)
    return x.astype(np.float32)


def text_symbols(script: Sequence[Utterance], n_frames: int) -> np.ndarray:
    """Target symbol per text frame: one peak frame per character, blanks between."""
    sym = np.full(n_frames, BLANK, dtype=np.int64)
    spans = [(w, t) for u in script for w, t in zip(u.words, u.word_times)]
    for wi, (word, (w0, w1)) in enumerate(spans):
        per = (w1 - w0) / len(word)
        for ci, ch in enumerate(word):
            f = int((w0 + (ci + 0.5) * per) * TEXT_FPS)
            if 0 <= f < n_frames:
                sym[f] = CHAR_INDEX.get(ch, BLANK)
        # word separator, also between utterances
        if wi + 1 < len(spans):
            f = int((w1 + per / 2) * TEXT_FPS)
            if 0 <= f < n_frames and sym[f] == BLANK:
                sym[f] = CHAR_INDEX[" "]
    return sym


def simulate_asr(script: Sequence[Utterance], corruption: float, rng: np.random.Generator,
                 n_frames: int, peak: float = 6.0, temperature: float = 1.0):
    """Render the script as a CTC-like character posterior ``[n_frames, 29]``.

    Each non-blank frame is corrupted with probability ``corruption``:
    substituted by a random letter, deleted (becomes blank) or smeared
    (blank wins but the true character keeps a visible second peak).
    Returns ``(x_s, word_spans)`` with the true words and their times.
    """
    sym = text_symbols(script, n_frames)
    # bounded background so that an uncorrupted peak always wins the argmax
    logits = np.clip(rng.normal(0, 1.0, size=(n_frames, N_TEXT)), -0.4 * peak, 0.4 * peak)
    chars = np.flatnonzero(sym != BLANK)
    hit = rng.random(len(chars)) < corruption
    kind = rng.integers(0, 3, size=len(chars))
    target = sym.copy()
    for f, h, k in zip(chars, hit, kind):
        if not h:
            continue
        if k == 0:
            choices = LETTERS[LETTERS != sym[f]]
            target[f] = choices[int(rng.integers(len(choices)))]
        elif k == 1:
            target[f] = BLANK
        else:
            target[f] = BLANK
            logits[f, sym[f]] += peak * 0.6
    logits[np.arange(n_frames), target] += peak
    z = logits / temperature
    z -= z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    words = [(w, t0, t1) for u in script for w, (t0, t1) in zip(u.words, u.word_times)]
    return p.astype(np.float32), words


def label_steps(script: Sequence[Utterance], n_steps: int) -> np.ndarray:
    """Class of the labelled span covering each step's centre time.

    Spans are closed intervals; when two cover the same centre the one that
    starts earlier wins.
    """
    labels = np.zeros(n_steps, dtype=np.int32)
    spans = sorted((u.label_span[0], u.label_span[1], u.label) for u in script if u.label > 0)
    centres = np.arange(n_steps) * STEP_S + STEP_S / 2
    for start, stop, label in reversed(spans):
        labels[(centres >= start) & (centres <= stop)] = label
    return labels


def call_rngs(seed: int, index: int):
    return [np.random.default_rng([seed, index, stream]) for stream in range(4)]


def gen_call(cfg: GenConfig, index: int = 0, rng: np.random.Generator | None = None) -> SyntheticCall:
    """Generate call ``index`` of the dataset defined by ``cfg``.

    Script, audio, ASR and corruption draws use separate streams derived from
    ``(cfg.seed, index)`` so serial and parallel generation agree exactly and
    re-rendering the same script at another corruption level keeps the words.
    """
    r_script, r_audio, r_asr, r_level = call_rngs(cfg.seed, index) if rng is None else [rng] * 4
    script, duration = gen_script(cfg, r_script)
    n_a = n_audio_frames(duration)
    c = cfg.corruption
    if cfg.corruption_spread > 0:
        c = float(np.clip(r_level.uniform(c - cfg.corruption_spread, c + cfg.corruption_spread), 0, 1))
    x_a = render_audio(script, n_a, cfg.noise_sigma, r_audio)
    x_s, words = simulate_asr(script, c, r_asr, n_a // 2, cfg.asr_peak, cfg.asr_temperature)
    labels = label_steps(script, n_a // AUDIO_PER_STEP)
    return SyntheticCall(f"{cfg.task[0]}{cfg.seed:04d}-{index:05d}", x_a, x_s, labels, words,
                         c, cfg.noise_sigma, cfg.task, script)


def generate(cfg: GenConfig, start: int = 0) -> list[SyntheticCall]:
    return [gen_call(cfg, i) for i in range(start, start + cfg.n_calls)]


def symptom_variant(cfg: GenConfig) -> list[SyntheticCall]:
    """Same machinery with symptom mentions as the positive segments."""
    return generate(replace(cfg, task="symptoms"))


# -- decoding / error rates --------------------------------------------------

def decode_argmax(x_s: np.ndarray) -> str:
    """Greedy CTC decoding: collapse repeats, drop blanks."""
    best = x_s.argmax(axis=1)
    out = []
    prev = -1
    for s in best:
        if s != prev and s != BLANK:
            out.append(ALPHABET[s])
        prev = s
    return "".join(out)


def decode_words(x_s: np.ndarray) -> list[tuple[str, float, float]]:
    """Greedy decoding with per-word times taken from the emitting frames."""
    best = x_s.argmax(axis=1)
    words: list[tuple[str, float, float]] = []
    cur: list[str] = []
    t0 = t1 = 0.0
    prev = -1
    for f, s in enumerate(best):
        if s != prev and s != BLANK:
            ch = ALPHABET[s]
            if ch == " ":
                if cur:
                    words.append(("".join(cur), t0, t1))
                    cur = []
            else:
                if not cur:
                    t0 = f / TEXT_FPS
                cur.append(ch)
                t1 = (f + 1) / TEXT_FPS
        prev = s
    if cur:
        words.append(("".join(cur), t0, t1))
    return words


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Levenshtein distance; one numpy pass per row of ``a``."""
    codes = {v: i for i, v in enumerate(set(a) | set(b))}
    bv = np.array([codes[y] for y in b], dtype=np.int64)
    prev = np.arange(len(b) + 1)
    ramp = np.arange(len(b) + 1)
    for i, x in enumerate(a, 1):
        best = np.empty_like(prev)
        best[0] = i
        best[1:] = np.minimum(prev[1:] + 1, prev[:-1] + (bv != codes[x]))
        # insertions chain left to right: cur[j] = min_k (best[k] + j - k)
        prev = np.minimum.accumulate(best - ramp) + ramp
    return int(prev[-1])


def character_error_rate(reference: str, hypothesis: str) -> float:
    return edit_distance(reference, hypothesis) / max(len(reference), 1)


def script_text(script: Iterable[Utterance]) -> str:
    return " ".join(" ".join(u.words) for u in script)


# -- on-disk format ----------------------------------------------------------

class DatasetError(records.FormatError):
    pass


def _utt_to_dict(u: Utterance) -> dict:
    return asdict(u)


def _utt_from_dict(d: dict) -> Utterance:
    d = dict(d)
    d["word_times"] = [tuple(t) for t in d["word_times"]]
    if d.get("label_span") is not None:
        d["label_span"] = tuple(d["label_span"])
    return Utterance(**d)


def encode_call(call: SyntheticCall) -> bytes:
    header = {
        "call_id": call.call_id,
        "corruption": call.corruption,
        "noise_sigma": call.noise_sigma,
        "task": call.task,
        "words": [list(w) for w in call.words],
        "script": [_utt_to_dict(u) for u in call.script],
    }
    tensors = {"x_a": call.x_a, "x_s": call.x_s, "labels": call.labels.astype(np.int32)}
    return records.encode(DATASET_MAGIC, header, tensors)


def decode_call(data: bytes, source: str = "<bytes>") -> SyntheticCall:
    try:
        header, t = records.decode(data, DATASET_MAGIC, source)
        x_a, x_s, labels = t["x_a"], t["x_s"], t["labels"]
        call = SyntheticCall(
            header["call_id"], x_a, x_s, labels, [tuple(w) for w in header["words"]],
            header["corruption"], header["noise_sigma"], header["task"],
            [_utt_from_dict(u) for u in header["script"]],
        )
    except records.FormatError as exc:
        raise DatasetError(str(exc)) from None
    except (KeyError, TypeError) as exc:
        raise DatasetError(f"{source}: missing or malformed field {exc}") from None
    if x_a.shape[0] != 2 * x_s.shape[0] or x_a.shape[0] != AUDIO_PER_STEP * labels.shape[0]:
        raise DatasetError(f"{source}: inconsistent lengths {x_a.shape[0]}/{x_s.shape[0]}/{labels.shape[0]}")
    return call


def stratified_folds(question_counts: Sequence[int], k: int = 5) -> list[int]:
    """Fold id per call, dealt round-robin after sorting by question count."""
    order = sorted(range(len(question_counts)), key=lambda i: (question_counts[i], i))
    folds = [0] * len(question_counts)
    for rank, i in enumerate(order):
        folds[i] = rank % k
    return folds


def write_dataset(calls: Sequence[SyntheticCall], directory: str | Path, k_folds: int = 5,
                  gen_config: GenConfig | None = None) -> str:
    """Write one ``.mqtd`` file per call plus the manifest.  Returns the dataset hash."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    folds = stratified_folds([c.n_questions for c in calls], k_folds)
    lines = [MANIFEST_HEADER]
    if gen_config is not None:
        lines.append("# config " + json.dumps(gen_config.to_dict(), sort_keys=True))
    lines.append("call_id\tfile\tduration_s\tn_questions\tfold\tcorruption\tsha256")
    for call, fold in zip(calls, folds):
        data = encode_call(call)
        name = f"{call.call_id}.mqtd"
        (directory / name).write_bytes(data)
        lines.append("\t".join([
            call.call_id, name, f"{call.duration:.2f}", str(call.n_questions), str(fold),
            f"{call.corruption:.4f}", hashlib.sha256(data).hexdigest(),
        ]))
    text = "\n".join(lines) + "\n"
    (directory / MANIFEST).write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


@dataclass
class Dataset:
    calls: list[SyntheticCall]
    folds: list[int]
    digest: str
    config: dict | None = None

    def split(self, test_fold: int) -> tuple[list[SyntheticCall], list[SyntheticCall]]:
        train = [c for c, f in zip(self.calls, self.folds) if f != test_fold]
        test = [c for c, f in zip(self.calls, self.folds) if f == test_fold]
        return train, test


def read_manifest(directory: str | Path) -> tuple[list[dict], dict | None, str]:
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.exists():
        raise FileNotFoundError(str(path))
    text = path.read_text()
    lines = text.splitlines()
    if not lines or lines[0] != MANIFEST_HEADER:
        raise DatasetError(f"{path}: unknown manifest header {lines[0] if lines else ''!r}")
    config = None
    rows = []
    cols = None
    for n, line in enumerate(lines[1:], 2):
        if line.startswith("# config "):
            config = json.loads(line[len("# config "):])
        elif cols is None:
            cols = line.split("\t")
        elif line.strip():
            parts = line.split("\t")
            if len(parts) != len(cols):
                raise DatasetError(f"{path}:{n}: expected {len(cols)} fields, got {len(parts)}")
            rows.append(dict(zip(cols, parts)))
    return rows, config, hashlib.sha256(text.encode()).hexdigest()


def read_dataset(directory: str | Path) -> Dataset:
    directory = Path(directory)
    rows, config, digest = read_manifest(directory)
    calls, folds = [], []
    for row in rows:
        path = directory / row["file"]
        if not path.exists():
            raise DatasetError(f"manifest lists {row['file']} but {path} is missing")
        data = path.read_bytes()
        if hashlib.sha256(data).hexdigest() != row["sha256"]:
            raise DatasetError(f"{path}: content hash disagrees with manifest")
        call = decode_call(data, str(path))
        if call.call_id != row["call_id"]:
            raise DatasetError(f"{path}: call id {call.call_id} != manifest {row['call_id']}")
        calls.append(call)
        folds.append(int(row["fold"]))
    return Dataset(calls, folds, digest, config)


def dump_call(call: SyntheticCall, max_steps: int | None = None) -> str:
    """Human-readable rendering of a call."""
    names = QUESTION_NAMES if call.task == "questions" else SYMPTOM_NAMES
    lines = [
        f"call {call.call_id}  task={call.task}  duration={call.duration:.2f}s  "
        f"T_a={call.x_a.shape[0]} T_s={call.x_s.shape[0]} T_m={call.labels.shape[0]}  "
        f"corruption={call.corruption:.3f} sigma={call.noise_sigma}",
        "script:",
    ]
    for u in call.script:
        tag = names[u.label] if u.label else "-"
        lines.append(f"  {u.start:7.2f}-{u.stop:7.2f}  {u.speaker:6s} {u.kind:14s} "
                     f"{'rising ' if u.rising else '       '}{tag:18s} {' '.join(u.words)}")
    lines.append(f"asr: {decode_argmax(call.x_s)}")
    steps = call.labels if max_steps is None else call.labels[:max_steps]
    lines.append("labels: " + "".join("." if v == 0 else str(v) for v in steps))
    return "\n".join(lines)
