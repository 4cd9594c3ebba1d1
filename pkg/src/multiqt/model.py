"""The MultiQT network.

Two strided 1-D conv encoders (audio log-mel frames, ASR character softmax),
per-timestep fusion, a dense trunk and a softmax head.  Inputs are zero-padded
once by half the encoder's receptive field; the conv stacks themselves are
unpadded, so output step ``t`` of the audio encoder depends on exactly the
frames ``s_a*t - r_l .. s_a*t + r_r``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import records
from .numcore import (
    DTYPE,
    ShapeError,
    batchnorm_infer_backward,
    batchnorm_infer_forward,
    batchnorm_train_backward,
    batchnorm_train_forward,
    chain_geometry,
    check_finite,
    conv1d_valid,
    conv1d_valid_backward,
    dense_backward,
    dense_forward,
    dropout_backward,
    dropout_forward,
    half_fields,
    pad_same,
    relu_backward,
    relu_forward,
    softmax,
)

MAGIC = b"MQTM"
MODALITIES = ("audio", "text", "both")
FUSIONS = ("concat", "tensor")


@dataclass(frozen=True)
class ModelConfig:
    audio_features: int = 40
    text_features: int = 29
    # (kernel, filters, stride) per conv layer
    audio_layers: tuple[tuple[int, int, int], ...] = ((10, 64, 2), (20, 128, 2), (40, 128, 2))
    text_layers: tuple[tuple[int, int, int], ...] = ((20, 128, 2), (40, 128, 2))
    modality: str = "both"
    fusion: str = "concat"
    trunk: tuple[int, ...] = (256, 256, 256)
    n_classes: int = 6
    multitask: bool = False
    conv_dropout: float = 0.2
    trunk_dropout: float = 0.4
    bn_momentum: float = 0.99
    bn_eps: float = 1e-5
    activation: str = "relu"

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(_ACTIVATIONS)}")
        if self.modality == "both":
            sa, _ = self.audio_geometry
            ss, _ = self.text_geometry
            if sa != 2 * ss:
                raise ValueError(f"audio stride {sa} must be twice the text stride {ss} (T_a = 2 T_s)")

    @property
    def uses_audio(self) -> bool:
        return self.modality in ("audio", "both")

    @property
    def uses_text(self) -> bool:
        return self.modality in ("text", "both")

    @property
    def audio_geometry(self) -> tuple[int, int]:
        return chain_geometry([(k, s) for k, _, s in self.audio_layers])

    @property
    def text_geometry(self) -> tuple[int, int]:
        return chain_geometry([(k, s) for k, _, s in self.text_layers])

    @property
    def audio_stride(self) -> int:
        return self.audio_geometry[0]

    @property
    def fused_dim(self) -> int:
        za = self.audio_layers[-1][1]
        zs = self.text_layers[-1][1]
        if self.modality == "audio":
            return za
        if self.modality == "text":
            return zs
        return za + zs if self.fusion == "concat" else (za + 1) * (zs + 1)

    def output_length(self, t_audio: int) -> int:
        return t_audio // self.audio_stride

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("audio_layers", "text_layers"):
            d[key] = tuple(tuple(x) for x in d[key])
        d["trunk"] = tuple(d["trunk"])
        return cls(**d)

    @classmethod
    def tiny(cls, **kw) -> "ModelConfig":
        """A few-hundred-parameter network for gradient checks and unit tests."""
        base = dict(
            audio_features=3, text_features=4,
            audio_layers=((3, 4, 2), (4, 5, 2)), text_layers=((3, 5, 2),),
            trunk=(6, 5), n_classes=3,
        )
        base.update(kw)
        return cls(**base)

    @classmethod
    def desk(cls, **kw) -> "ModelConfig":
        """Full-size kernels and strides at reduced width for CPU-only training."""
        base = dict(
            audio_layers=((10, 16, 2), (20, 32, 2), (40, 32, 2)),
            text_layers=((20, 32, 2), (40, 32, 2)),
            trunk=(64, 64, 64),
            # dropout scaled down with the width; 8x narrower layers do not
            # tolerate the full-size rates within a desk-sized training budget
            conv_dropout=0.05, trunk_dropout=0.1,
        )
        base.update(kw)
        return cls(**base)


def _tanh_forward(x):
    y = np.tanh(x)
    return y, y


def _tanh_backward(dy, y):
    return dy * (1 - y * y)


_ACTIVATIONS = {
    "relu": (relu_forward, relu_backward),
    "tanh": (_tanh_forward, _tanh_backward),
}


def _conv_names(cfg: ModelConfig) -> list[tuple[str, int, int, int, int]]:
    """``(prefix, kernel, c_in, c_out, stride)`` for every conv layer in use."""
    out = []
    if cfg.uses_audio:
        c = cfg.audio_features
        for i, (k, f, s) in enumerate(cfg.audio_layers):
            out.append((f"audio.{i}", k, c, f, s))
            c = f
    if cfg.uses_text:
        c = cfg.text_features
        for i, (k, f, s) in enumerate(cfg.text_layers):
            out.append((f"text.{i}", k, c, f, s))
            c = f
    return out


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}

    def bn(prefix, c):
        shapes[f"{prefix}.bn.gamma"] = (c,)
        shapes[f"{prefix}.bn.beta"] = (c,)
        shapes[f"{prefix}.bn.mean"] = (c,)
        shapes[f"{prefix}.bn.var"] = (c,)

    for prefix, k, c_in, c_out, _ in _conv_names(cfg):
        shapes[f"{prefix}.w"] = (k, c_in, c_out)
        shapes[f"{prefix}.b"] = (c_out,)
        bn(prefix, c_out)
    d = cfg.fused_dim
    for i, units in enumerate(cfg.trunk):
        shapes[f"trunk.{i}.w"] = (d, units)
        shapes[f"trunk.{i}.b"] = (units,)
        bn(f"trunk.{i}", units)
        d = units
    shapes["head.w"] = (d, cfg.n_classes)
    shapes["head.b"] = (cfg.n_classes,)
    if cfg.multitask:
        shapes["head_bin.w"] = (d, 2)
        shapes["head_bin.b"] = (2,)
    return shapes


def is_trainable(name: str) -> bool:
    return not (name.endswith(".bn.mean") or name.endswith(".bn.var"))


@dataclass
class MultiQT:
    """Config plus named parameter arrays (running BN statistics included)."""

    config: ModelConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, dtype=DTYPE) -> "MultiQT":
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in param_shapes(config).items():
            if name.endswith(".w"):
                fan_in = int(np.prod(shape[:-1]))
                limit = np.sqrt(3.0 / fan_in)
                params[name] = rng.uniform(-limit, limit, shape).astype(dtype)
            elif name.endswith(".bn.gamma") or name.endswith(".bn.var"):
                params[name] = np.ones(shape, dtype)
            else:
                params[name] = np.zeros(shape, dtype)
        return cls(config, params)

    def trainable(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.params.items() if is_trainable(k)}

    def astype(self, dtype) -> "MultiQT":
        return MultiQT(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    def with_params(self, updates: dict[str, np.ndarray]) -> "MultiQT":
        p = dict(self.params)
        p.update(updates)
        return MultiQT(self.config, p)


# -- forward / backward ------------------------------------------------------

@dataclass
class ForwardResult:
    logits: np.ndarray                # [sum T_m, K], rows of all examples stacked
    lengths: list[int]
    logits_bin: np.ndarray | None = None
    bn_stats: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    tape: list = field(default_factory=list)

    def split(self, arr: np.ndarray | None = None) -> list[np.ndarray]:
        arr = self.logits if arr is None else arr
        return np.split(arr, np.cumsum(self.lengths)[:-1]) if self.lengths else []


def _block_forward(x, params, prefix, cfg, training, rng, rate, stats):
    act_f, _ = _ACTIVATIONS[cfg.activation]
    gamma, beta = params[f"{prefix}.bn.gamma"], params[f"{prefix}.bn.beta"]
    if training:
        y, bn_cache, mean, var = batchnorm_train_forward(x, gamma, beta, cfg.bn_eps)
        stats[prefix] = (mean, var)
    else:
        y, bn_cache = batchnorm_infer_forward(
            x, gamma, beta, params[f"{prefix}.bn.mean"], params[f"{prefix}.bn.var"], cfg.bn_eps
        )
    a, act_cache = act_f(y)
    d, mask = dropout_forward(a, rate, training, rng)
    return d, (training, bn_cache, act_cache, mask)


def _block_backward(dd, cache, cfg, prefix, grads):
    training, bn_cache, act_cache, mask = cache
    _, act_b = _ACTIVATIONS[cfg.activation]
    da = dropout_backward(dd, mask)
    dy = act_b(da, act_cache)
    if training:
        dx, dg, db = batchnorm_train_backward(dy, bn_cache)
    else:
        dx, dg, db = batchnorm_infer_backward(dy, bn_cache)
    grads[f"{prefix}.bn.gamma"] = dg
    grads[f"{prefix}.bn.beta"] = db
    return dx


def _encode(model: MultiQT, branch: str, xs: list[np.ndarray], t_ms: list[int],
            training: bool, rng, stats, tape) -> np.ndarray:
    cfg, params = model.config, model.params
    layers = cfg.audio_layers if branch == "audio" else cfg.text_layers
    stride, rf = chain_geometry([(k, s) for k, _, s in layers])
    h = [pad_same(x, t, stride, rf) for x, t in zip(xs, t_ms)]
    for i, (_, _, s) in enumerate(layers):
        prefix = f"{branch}.{i}"
        w, b = params[f"{prefix}.w"], params[f"{prefix}.b"]
        outs, caches = [], []
        for x in h:
            y, c = conv1d_valid(x, w, b, s)
            outs.append(y)
            caches.append(c)
        lens = [o.shape[0] for o in outs]
        cat = np.concatenate(outs) if len(outs) > 1 else outs[0]
        cat, bcache = _block_forward(cat, params, prefix, cfg, training, rng, cfg.conv_dropout, stats)
        tape.append(("conv", prefix, caches, lens, bcache))
        h = np.split(cat, np.cumsum(lens)[:-1]) if len(lens) > 1 else [cat]
    assert [x.shape[0] for x in h] == t_ms, "encoder output length mismatch"
    return np.concatenate(h) if len(h) > 1 else h[0]


def fuse(za: np.ndarray, zs: np.ndarray, mode: str) -> np.ndarray:
    """Per-timestep fusion of equal-length ``[T, Da]`` and ``[T, Ds]`` encodings."""
    if za.shape[0] != zs.shape[0]:
        raise ShapeError(f"fuse: audio length {za.shape[0]} != text length {zs.shape[0]}")
    if mode == "concat":
        return np.concatenate([za, zs], axis=1)
    if mode == "tensor":
        one = np.ones((za.shape[0], 1), za.dtype)
        a1 = np.concatenate([one, za], axis=1)
        s1 = np.concatenate([one, zs], axis=1)
        return (a1[:, :, None] * s1[:, None, :]).reshape(za.shape[0], a1.shape[1] * s1.shape[1])
    raise ValueError(f"unknown fusion mode {mode!r}")


def fuse_backward(dz: np.ndarray, za: np.ndarray, zs: np.ndarray, mode: str):
    da_dim = za.shape[1]
    if mode == "concat":
        return dz[:, :da_dim], dz[:, da_dim:]
    one = np.ones((za.shape[0], 1), za.dtype)
    a1 = np.concatenate([one, za], axis=1)
    s1 = np.concatenate([one, zs], axis=1)
    d3 = dz.reshape(za.shape[0], da_dim + 1, zs.shape[1] + 1)
    da = np.einsum("tij,tj->ti", d3, s1)[:, 1:]
    ds = np.einsum("tij,ti->tj", d3, a1)[:, 1:]
    return da, ds


def check_lengths(cfg: ModelConfig, x_a: np.ndarray | None, x_s: np.ndarray | None) -> int:
    """Validate one example's inputs and return its output length ``T_m``."""
    if cfg.uses_audio:
        if x_a is None or x_a.ndim != 2 or x_a.shape[1] != cfg.audio_features:
            raise ShapeError(f"audio input must be [T_a, {cfg.audio_features}], got "
                             f"{None if x_a is None else x_a.shape}")
    if cfg.uses_text:
        if x_s is None or x_s.ndim != 2 or x_s.shape[1] != cfg.text_features:
            raise ShapeError(f"text input must be [T_s, {cfg.text_features}], got "
                             f"{None if x_s is None else x_s.shape}")
    if cfg.modality == "both":
        if x_a.shape[0] != 2 * x_s.shape[0]:
            raise ShapeError(f"length mismatch: T_a={x_a.shape[0]} must equal 2*T_s (T_s={x_s.shape[0]})")
    if cfg.uses_audio:
        t_m = x_a.shape[0] // cfg.audio_geometry[0]
    else:
        t_m = x_s.shape[0] // cfg.text_geometry[0]
    if t_m < 1:
        raise ShapeError("input too short: need at least one output step")
    return t_m


def forward(model: MultiQT, xs_a: list, xs_s: list, training: bool = False,
            rng: np.random.Generator | None = None) -> ForwardResult:
    """Run a batch of whole calls.  Rows of all examples are stacked in the
    result; batch-norm statistics in training mode pool every row."""
    cfg, params = model.config, model.params
    n = len(xs_a) if xs_a is not None else len(xs_s)
    xs_a = list(xs_a) if xs_a is not None else [None] * n
    xs_s = list(xs_s) if xs_s is not None else [None] * n
    if training and rng is None:
        rng = np.random.default_rng(0)
    t_ms = [check_lengths(cfg, a, s) for a, s in zip(xs_a, xs_s)]
    stats: dict = {}
    tape: list = []
    za = _encode(model, "audio", xs_a, t_ms, training, rng, stats, tape) if cfg.uses_audio else None
    zs = _encode(model, "text", xs_s, t_ms, training, rng, stats, tape) if cfg.uses_text else None
    if cfg.modality == "both":
        z = fuse(za, zs, cfg.fusion)
    else:
        z = za if za is not None else zs
    tape.append(("fuse", za, zs))
    for i in range(len(cfg.trunk)):
        prefix = f"trunk.{i}"
        y, dcache = dense_forward(z, params[f"{prefix}.w"], params[f"{prefix}.b"])
        z, bcache = _block_forward(y, params, prefix, cfg, training, rng, cfg.trunk_dropout, stats)
        tape.append(("dense", prefix, dcache, bcache))
    logits, hcache = dense_forward(z, params["head.w"], params["head.b"])
    tape.append(("head", hcache))
    logits_bin = None
    if cfg.multitask:
        logits_bin, bcache = dense_forward(z, params["head_bin.w"], params["head_bin.b"])
        tape.append(("head_bin", bcache))
    check_finite("forward logits", logits)
    return ForwardResult(logits, t_ms, logits_bin, stats, tape)


def backward(model: MultiQT, result: ForwardResult, dlogits: np.ndarray,
             dlogits_bin: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every trainable parameter."""
    cfg = model.config
    grads: dict[str, np.ndarray] = {}
    tape = list(result.tape)
    if tape[-1][0] == "head_bin":
        _, bcache = tape.pop()
        if dlogits_bin is None:
            dlogits_bin = np.zeros_like(result.logits_bin)
        dz_bin, grads["head_bin.w"], grads["head_bin.b"] = dense_backward(dlogits_bin, bcache)
    else:
        dz_bin = None
    _, hcache = tape.pop()
    dz, grads["head.w"], grads["head.b"] = dense_backward(dlogits, hcache)
    if dz_bin is not None:
        dz = dz + dz_bin
    while tape[-1][0] == "dense":
        _, prefix, dcache, bcache = tape.pop()
        dy = _block_backward(dz, bcache, cfg, prefix, grads)
        dz, grads[f"{prefix}.w"], grads[f"{prefix}.b"] = dense_backward(dy, dcache)
    _, za, zs = tape.pop()
    if cfg.modality == "both":
        dza, dzs = fuse_backward(dz, za, zs, cfg.fusion)
    elif cfg.modality == "audio":
        dza, dzs = dz, None
    else:
        dza, dzs = None, dz
    upstream = {"audio": dza, "text": dzs}
    for entry in reversed(tape):
        _, prefix, caches, lens, bcache = entry
        branch = prefix.split(".")[0]
        dcat = _block_backward(upstream[branch], bcache, cfg, prefix, grads)
        parts = np.split(dcat, np.cumsum(lens)[:-1]) if len(lens) > 1 else [dcat]
        first = prefix.endswith(".0")
        dws, dbs, dxs = [], [], []
        for dy, c in zip(parts, caches):
            dx, dw, db = conv1d_valid_backward(dy, c, need_dx=not first)
            dxs.append(dx)
            dws.append(dw)
            dbs.append(db)
        grads[f"{prefix}.w"] = sum(dws[1:], dws[0])
        grads[f"{prefix}.b"] = sum(dbs[1:], dbs[0])
        if not first:
            upstream[branch] = np.concatenate(dxs) if len(dxs) > 1 else dxs[0]
    return grads


def predict(model: MultiQT, x_a: np.ndarray | None, x_s: np.ndarray | None) -> np.ndarray:
    """Inference-mode class probabilities ``[T_m, K]`` for one call."""
    res = forward(model, [x_a], [x_s], training=False)
    return softmax(res.logits)


def predict_both(model: MultiQT, x_a, x_s) -> tuple[np.ndarray, np.ndarray | None]:
    res = forward(model, [x_a], [x_s], training=False)
    pb = softmax(res.logits_bin) if res.logits_bin is not None else None
    return softmax(res.logits), pb


def argmax_labels(probs: np.ndarray) -> np.ndarray:
    """Predicted classes; ``np.argmax`` already breaks ties toward the lowest id."""
    return probs.argmax(axis=-1).astype(np.int32)


def receptive_fields(cfg: ModelConfig) -> dict[str, tuple[int, int, int]]:
    """``{branch: (field, left_half, right_half)}`` in input frames."""
    out = {}
    for branch, layers in (("audio", cfg.audio_layers), ("text", cfg.text_layers)):
        _, rf = chain_geometry([(k, s) for k, _, s in layers])
        out[branch] = (rf, *half_fields(rf))
    return out


# -- checkpoints -------------------------------------------------------------

class CheckpointError(records.FormatError):
    pass


def save(model: MultiQT, path: str | Path, extra: dict | None = None) -> None:
    header = {"config": model.config.to_dict(), "format": "multiqt-checkpoint"}
    if extra:
        header["extra"] = extra
    records.write_file(path, MAGIC, header, model.params)


def load(path: str | Path, expected_classes: int | None = None) -> MultiQT:
    try:
        header, tensors = records.read_file(path, MAGIC)
    except records.FormatError as exc:
        raise CheckpointError(str(exc)) from None
    try:
        cfg = ModelConfig.from_dict(header["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad config in header ({exc})") from None
    expected = param_shapes(cfg)
    if set(expected) != set(tensors):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise CheckpointError(f"{path}: parameter set does not match config (missing {missing}, extra {extra})")
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise CheckpointError(f"{path}: {name} has shape {tensors[name].shape}, config implies {shape}")
    if expected_classes is not None and cfg.n_classes != expected_classes:
        raise CheckpointError(f"{path}: checkpoint has K={cfg.n_classes}, expected K={expected_classes}")
    params = {name: tensors[name] for name in expected}
    return MultiQT(cfg, params)


def checkpoint_extra(path: str | Path) -> dict:
    header, _ = records.read_file(path, MAGIC)
    return header.get("extra", {})


def config_hash(cfg: ModelConfig) -> str:
    import hashlib
    return hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def unimodal(cfg: ModelConfig, modality: str) -> ModelConfig:
    return replace(cfg, modality=modality)
