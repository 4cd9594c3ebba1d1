"""Incremental chunked inference equivalent to the offline forward pass.

Offline, each encoder input is zero-padded once and then run through an
unpadded conv chain.  A session reproduces that exactly: it is primed with
the left zero padding, every conv layer keeps only the rows its next window
still needs, and :func:`finalize` appends the right zero padding.  An output
step is emitted as soon as its whole receptive field has arrived, which for
the default audio encoder means about 1.02 s of look-ahead.
"""
from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import MultiQT, _ACTIVATIONS, forward, fuse
from .numcore import (
    ShapeError,
    _im2col,
    batchnorm_infer_forward,
    chain_geometry,
    dense_forward,
    half_fields,
    softmax,
)

REFERENCE_GPU_STREAM_RTF = 161      # GPU, 166 one-second chunks
REFERENCE_GPU_OFFLINE_RTF = 15000   # GPU, whole call in one pass


class StreamError(RuntimeError):
    pass


class _Conv:
    """One conv layer's pending input rows."""

    def __init__(self, kernel: int, stride: int, channels: int, dtype):
        self.kernel = kernel
        self.stride = stride
        self.buf = np.zeros((0, channels), dtype)

    def take(self, x: np.ndarray) -> np.ndarray:
        """Append rows and return im2col rows for every window now complete."""
        buf = np.concatenate([self.buf, x]) if len(self.buf) else x
        k, s = self.kernel, self.stride
        n = (buf.shape[0] - k) // s + 1 if buf.shape[0] >= k else 0
        if n == 0:
            self.buf = buf
            return np.zeros((0, k * buf.shape[1]), buf.dtype)
        cols = _im2col(buf[: s * (n - 1) + k], k, s)
        self.buf = buf[s * n:].copy()
        return cols


class _Branch:
    """Streaming state of one encoder: input padding bookkeeping plus layers."""

    def __init__(self, model: MultiQT, name: str):
        cfg = model.config
        layers = cfg.audio_layers if name == "audio" else cfg.text_layers
        c_in = cfg.audio_features if name == "audio" else cfg.text_features
        self.name = name
        self.stride, self.field = chain_geometry([(k, s) for k, _, s in layers])
        r_l, _ = half_fields(self.field)
        left = r_l - self.stride + 1
        self.skip = max(-left, 0)      # raw frames the offline padding crops away
        self.frames = 0                # raw frames received
        self.fed = 0                   # padded rows passed to the first layer
        self.emitted = 0               # encoder rows produced
        dtype = model.params[f"{name}.0.w"].dtype
        self.convs = []
        chans = c_in
        for i, (k, f, s) in enumerate(layers):
            self.convs.append(_Conv(k, s, chans, dtype))
            chans = f
        self.out_dim = chans
        self.queue = np.zeros((0, chans), dtype)
        self.prime = np.zeros((max(left, 0), c_in), dtype)

    def state_floats(self) -> int:
        return sum(c.buf.size for c in self.convs) + self.queue.size

    def padded_len(self, n_out: int) -> int:
        """Total padded input length the offline pass would consume for ``n_out`` steps."""
        return self.stride * (n_out - 1) + self.field if n_out > 0 else 0


@dataclass
class StreamSession:
    model: MultiQT
    branches: dict[str, _Branch] = field(default_factory=dict)
    steps_emitted: int = 0
    finalized: bool = False

    def state_floats(self) -> int:
        """Buffered values held by the session; bounded by the receptive fields."""
        return sum(b.state_floats() for b in self.branches.values())


def open_session(model: MultiQT) -> StreamSession:
    cfg = model.config
    sess = StreamSession(model)
    if cfg.uses_audio:
        sess.branches["audio"] = _Branch(model, "audio")
    if cfg.uses_text:
        sess.branches["text"] = _Branch(model, "text")
    return sess


def _conv_post(model: MultiQT, prefix: str, y: np.ndarray) -> np.ndarray:
    p, cfg = model.params, model.config
    y += p[f"{prefix}.b"]
    y, _ = batchnorm_infer_forward(y, p[f"{prefix}.bn.gamma"], p[f"{prefix}.bn.beta"],
                                   p[f"{prefix}.bn.mean"], p[f"{prefix}.bn.var"], cfg.bn_eps)
    y, _ = _ACTIVATIONS[cfg.activation][0](y)
    return y


def _stack(parts: list[np.ndarray]) -> tuple[np.ndarray, list[int]]:
    lens = [p.shape[0] for p in parts]
    return (np.concatenate(parts) if len(parts) > 1 else parts[0]), lens


def _split(x: np.ndarray, lens: list[int]) -> list[np.ndarray]:
    return np.split(x, np.cumsum(lens)[:-1]) if len(lens) > 1 else [x]


def _feed_branch(model: MultiQT, name: str, branches: list[_Branch], xs: list[np.ndarray]) -> None:
    """Push raw frames through one encoder of one or more sessions."""
    hs = []
    for br, x in zip(branches, xs):
        if br.skip:
            drop = min(br.skip, x.shape[0])
            x = x[drop:]
            br.skip -= drop
        br.fed += x.shape[0]
        hs.append(x)
    for i, _ in enumerate(branches[0].convs):
        prefix = f"{name}.{i}"
        w = model.params[f"{prefix}.w"]
        wm = w.reshape(-1, w.shape[-1])
        cols, lens = _stack([br.convs[i].take(h) for br, h in zip(branches, hs)])
        y = _conv_post(model, prefix, cols @ wm)
        hs = _split(y, lens)
    for br, h in zip(branches, hs):
        br.queue = np.concatenate([br.queue, h]) if len(br.queue) else h
        br.emitted += h.shape[0]


def _head(model: MultiQT, sessions: list[StreamSession]) -> list[np.ndarray]:
    """Fuse ready encoder rows, run trunk and head, return probabilities per session."""
    cfg, p = model.config, model.params
    zs = []
    for s in sessions:
        qs = [s.branches[n].queue for n in ("audio", "text") if n in s.branches]
        n = min(q.shape[0] for q in qs)
        parts = []
        for b in s.branches.values():
            parts.append(b.queue[:n])
            b.queue = b.queue[n:]
        zs.append(fuse(parts[0], parts[1], cfg.fusion) if len(parts) == 2 else parts[0])
    z, lens = _stack(zs)
    if z.shape[0] == 0:
        return [np.zeros((0, cfg.n_classes), z.dtype) for _ in sessions]
    act = _ACTIVATIONS[cfg.activation][0]
    for i in range(len(cfg.trunk)):
        prefix = f"trunk.{i}"
        y, _ = dense_forward(z, p[f"{prefix}.w"], p[f"{prefix}.b"])
        y, _ = batchnorm_infer_forward(y, p[f"{prefix}.bn.gamma"], p[f"{prefix}.bn.beta"],
                                       p[f"{prefix}.bn.mean"], p[f"{prefix}.bn.var"], cfg.bn_eps)
        z, _ = act(y)
    logits, _ = dense_forward(z, p["head.w"], p["head.b"])
    out = _split(softmax(logits), lens)
    for s, o in zip(sessions, out):
        s.steps_emitted += o.shape[0]
    return out


def _check_chunk(sess: StreamSession, a_chunk, s_chunk) -> None:
    if sess.finalized:
        raise StreamError("push after finalize")
    cfg = sess.model.config
    if cfg.uses_audio:
        if a_chunk is None or a_chunk.ndim != 2 or a_chunk.shape[1] != cfg.audio_features:
            raise ShapeError(f"audio chunk must be [t_a, {cfg.audio_features}]")
        if a_chunk.shape[0] % 2:
            raise ShapeError(f"audio chunk length must be even, got {a_chunk.shape[0]}")
    if cfg.uses_text:
        if s_chunk is None or s_chunk.ndim != 2 or s_chunk.shape[1] != cfg.text_features:
            raise ShapeError(f"text chunk must be [t_s, {cfg.text_features}]")
    if cfg.modality == "both" and a_chunk.shape[0] != 2 * s_chunk.shape[0]:
        raise ShapeError(f"text chunk must be half the audio chunk: t_a={a_chunk.shape[0]}, "
                         f"t_s={s_chunk.shape[0]}")


def _push_many(sessions: list[StreamSession], a_chunks, s_chunks) -> list[np.ndarray]:
    model = sessions[0].model
    for name, chunks in (("audio", a_chunks), ("text", s_chunks)):
        if name not in sessions[0].branches:
            continue
        brs = [s.branches[name] for s in sessions]
        xs = []
        for br, x in zip(brs, chunks):
            x = np.asarray(x, dtype=br.prime.dtype)
            if br.frames == 0 and x.shape[0]:
                x = np.concatenate([br.prime, x])
                br.frames -= br.prime.shape[0]
            br.frames += x.shape[0]
            xs.append(x)
        _feed_branch(model, name, brs, xs)
    return _head(model, sessions)


def push_chunk(sess: StreamSession, a_chunk: np.ndarray | None, s_chunk: np.ndarray | None) -> np.ndarray:
    """Feed the next chunk; returns probabilities for newly completed steps."""
    _check_chunk(sess, a_chunk, s_chunk)
    return _push_many([sess], [a_chunk], [s_chunk])[0]


def _tail(sess: StreamSession) -> tuple[np.ndarray | None, np.ndarray | None]:
    """Right zero padding that completes exactly the offline output length."""
    cfg = sess.model.config
    if cfg.uses_audio:
        n_out = sess.branches["audio"].frames // cfg.audio_geometry[0]
    else:
        n_out = sess.branches["text"].frames // cfg.text_geometry[0]
    tails = {}
    for name, br in sess.branches.items():
        need = br.padded_len(n_out) if br.frames else 0
        tails[name] = np.zeros((max(need - br.fed, 0), br.prime.shape[1]), br.prime.dtype)
    return tails.get("audio"), tails.get("text")


def finalize(sess: StreamSession) -> np.ndarray:
    """Flush the right context; total emitted then equals the offline ``T_m``."""
    k = sess.model.config.n_classes
    if sess.finalized:
        return np.zeros((0, k), np.float32)
    ta, ts = _tail(sess)
    for name, t in (("audio", ta), ("text", ts)):
        if t is not None:
            _feed_branch(sess.model, name, [sess.branches[name]], [t])
    out = _head(sess.model, [sess])[0]
    sess.finalized = True
    return out


def stream_call(model: MultiQT, x_a, x_s, chunk_frames) -> np.ndarray:
    """Stream a whole call; ``chunk_frames`` is an int or a list of audio chunk lengths."""
    sess = open_session(model)
    cfg = model.config
    total = x_a.shape[0] if cfg.uses_audio else 2 * x_s.shape[0]
    sizes = chunk_frames if isinstance(chunk_frames, (list, tuple)) else \
        [chunk_frames] * (total // chunk_frames) + ([total % chunk_frames] if total % chunk_frames else [])
    outs = []
    pos = 0
    for n in sizes:
        a = x_a[pos:pos + n] if cfg.uses_audio else None
        s = x_s[pos // 2:(pos + n) // 2] if cfg.uses_text else None
        outs.append(push_chunk(sess, a, s))
        pos += n
    outs.append(finalize(sess))
    return np.concatenate(outs)


class MultiStreamBatcher:
    """Advance many independent sessions per tick on a thread pool.

    Each session runs exactly the computation it would run alone, so every
    call's output is bit-identical to unbatched streaming.  Stacking the
    sessions into one matrix multiply was rejected: BLAS blocking then
    depends on the stacked row count and perturbs results in the last bit.
    """

    def __init__(self, model: MultiQT, n_streams: int, workers: int | None = None):
        self.model = model
        self.sessions = [open_session(model) for _ in range(n_streams)]
        workers = workers or min(n_streams, os.cpu_count() or 1)
        self._pool = ThreadPoolExecutor(workers) if workers > 1 else None

    def _map(self, fn, *args) -> list:
        if self._pool is None:
            return list(map(fn, *args))
        return list(self._pool.map(fn, *args))

    def push(self, a_chunks: list, s_chunks: list) -> list[np.ndarray]:
        if len(a_chunks) != len(self.sessions) or len(s_chunks) != len(self.sessions):
            raise ValueError(f"expected {len(self.sessions)} chunks per modality")
        return self._map(push_chunk, self.sessions, a_chunks, s_chunks)

    def finalize(self) -> list[np.ndarray]:
        out = self._map(finalize, self.sessions)
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None
        return out


# -- benchmarking ------------------------------------------------------------

@dataclass
class RtfReport:
    mode: str
    audio_seconds: float
    wall_seconds: float
    chunk_s: float
    n_parallel_streams: int
    latency_ms_p50: float = 0.0
    latency_ms_p90: float = 0.0
    latency_ms_p99: float = 0.0

    @property
    def rtf(self) -> float:
        return self.audio_seconds / self.wall_seconds

    def to_line(self) -> str:
        d = asdict(self)
        d["rtf"] = self.rtf
        return " ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in d.items())

    def table(self) -> str:
        return (f"{self.mode:<8} streams={self.n_parallel_streams} chunk={self.chunk_s:g}s  "
                f"audio={self.audio_seconds:.1f}s wall={self.wall_seconds:.3f}s  RTF={self.rtf:.1f}  "
                f"latency p50/p90/p99 = {self.latency_ms_p50:.2f}/{self.latency_ms_p90:.2f}/"
                f"{self.latency_ms_p99:.2f} ms")


def bench_inputs(duration_s: float, seed: int = 0, model: MultiQT | None = None):
    """Synthetic call features of exactly ``duration_s`` seconds."""
    from .synthdata import GenConfig, gen_call
    cfg = GenConfig(n_calls=1, duration_mean=duration_s, duration_std=0.0,
                    duration_min=min(duration_s, 20.0), seed=seed)
    call = gen_call(cfg, 0)
    n = int(round(duration_s * 100)) // 8 * 8
    return call.x_a[:n], call.x_s[: n // 2]


def _percentiles(lat: list[float]) -> tuple[float, float, float]:
    if not lat:
        return 0.0, 0.0, 0.0
    p = np.percentile(np.asarray(lat) * 1e3, [50, 90, 99])
    return float(p[0]), float(p[1]), float(p[2])


def bench_rtf(model: MultiQT, call_duration_s: float = 166.0, chunk_s: float = 1.0,
              n_streams: int = 1, seed: int = 0) -> RtfReport:
    """Wall-clock streaming of ``n_streams`` simultaneous calls in fixed chunks."""
    x_a, x_s = bench_inputs(call_duration_s, seed)
    step = int(round(chunk_s * 100)) // 2 * 2
    batcher = MultiStreamBatcher(model, n_streams)
    lat = []
    t0 = time.perf_counter()
    for pos in range(0, x_a.shape[0], step):
        a = x_a[pos:pos + step]
        s = x_s[pos // 2:(pos + a.shape[0]) // 2]
        t = time.perf_counter()
        batcher.push([a] * n_streams, [s] * n_streams)
        lat.append(time.perf_counter() - t)
    batcher.finalize()
    wall = time.perf_counter() - t0
    return RtfReport("stream", n_streams * x_a.shape[0] / 100.0, wall, chunk_s, n_streams,
                     *_percentiles(lat))


def bench_offline(model: MultiQT, call_duration_s: float = 166.0, seed: int = 0, repeats: int = 3) -> RtfReport:
    """Whole-call forward pass; the best of ``repeats`` runs."""
    x_a, x_s = bench_inputs(call_duration_s, seed)
    best = np.inf
    for _ in range(repeats):
        t = time.perf_counter()
        forward(model, [x_a], [x_s], training=False)
        best = min(best, time.perf_counter() - t)
    return RtfReport("offline", x_a.shape[0] / 100.0, best, call_duration_s, 1, best * 1e3, best * 1e3, best * 1e3)
