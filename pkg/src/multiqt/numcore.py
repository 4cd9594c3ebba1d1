"""Dense layer arithmetic with hand-written forward and backward rules.

Arrays are plain ``numpy.ndarray`` values laid out time-major (``[T, C]``).
Every forward function that participates in training returns ``(out, cache)``
and has a matching ``*_backward(dout, cache)``.  Nothing here mutates its
inputs; batch-norm running statistics are returned, not updated in place.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def check_finite(name: str, x: np.ndarray) -> np.ndarray:
    if not np.isfinite(x).all():
        raise NonFiniteError(f"{name}: non-finite values in output of shape {x.shape}")
    return x


@dataclass(frozen=True)
class ConvSpec:
    kernel: int
    stride: int
    in_channels: int
    out_channels: int

    def __post_init__(self):
        for field in ("kernel", "stride", "in_channels", "out_channels"):
            if getattr(self, field) < 1:
                raise ValueError(f"ConvSpec.{field} must be >= 1, got {getattr(self, field)}")

    def out_length(self, t_in: int) -> int:
        return t_in // self.stride


def half_fields(field: int) -> tuple[int, int]:
    """Left/right half receptive fields ``floor((r-1)/2)``, ``ceil((r-1)/2)``."""
    return (field - 1) // 2, field // 2


def chain_geometry(layers: list[tuple[int, int]]) -> tuple[int, int]:
    """Overall ``(stride, receptive_field)`` of stacked ``(kernel, stride)`` convs."""
    stride, field = 1, 1
    for kernel, s in layers:
        field += (kernel - 1) * stride
        stride *= s
    return stride, field


def pad_same(x: np.ndarray, n_out: int, stride: int, field: int) -> np.ndarray:
    """Zero-pad (or crop) ``x`` so a valid conv chain yields exactly ``n_out`` steps.

    Output step ``t`` (1-indexed) then covers input frames
    ``stride*t - r_l .. stride*t + r_r``.  Padding applies to the raw input
    only; internal representations are never padded.
    """
    r_l, r_r = half_fields(field)
    left = r_l - stride + 1
    need = stride * (n_out - 1) + field if n_out > 0 else 0
    if left < 0:
        x = x[-left:]
        left = 0
    right = need - left - x.shape[0]
    if right < 0:
        x = x[: x.shape[0] + right]
        right = 0
    if left == 0 and right == 0:
        return x
    return np.concatenate(
        [np.zeros((left, x.shape[1]), x.dtype), x, np.zeros((right, x.shape[1]), x.dtype)]
    )


# -- convolution -------------------------------------------------------------

def _im2col(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    windows = sliding_window_view(x, kernel, axis=0)[::stride]  # [T_out, C, k]
    # contiguous copy so the matmul goes through BLAS
    return np.ascontiguousarray(windows.transpose(0, 2, 1)).reshape(windows.shape[0], -1)


def conv1d_valid(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int):
    """Unpadded strided convolution. ``w`` is ``[k, C_in, C_out]``."""
    kernel, c_in, c_out = w.shape
    if x.ndim != 2 or x.shape[1] != c_in:
        raise ShapeError(f"conv1d: input channels {x.shape[-1]} != kernel in_channels {c_in}")
    if b.shape != (c_out,):
        raise ShapeError(f"conv1d: bias length {b.shape} != out_channels {c_out}")
    if x.shape[0] < kernel:
        return np.zeros((0, c_out), x.dtype), (None, x.shape, w, stride)
    cols = _im2col(x, kernel, stride)
    y = cols @ w.reshape(kernel * c_in, c_out)
    y += b
    return y, (cols, x.shape, w, stride)


def conv1d_valid_backward(dy: np.ndarray, cache, need_dx: bool = True):
    cols, x_shape, w, stride = cache
    kernel, c_in, c_out = w.shape
    if cols is None:
        return np.zeros(x_shape, dy.dtype), np.zeros_like(w), np.zeros(c_out, dy.dtype)
    dw = (cols.T @ dy).reshape(w.shape)
    db = dy.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dx = np.zeros(x_shape, dy.dtype)
    dcols = (dy @ w.reshape(kernel * c_in, c_out).T).reshape(dy.shape[0], kernel, c_in)
    n = dy.shape[0]
    span = stride * (n - 1) + 1
    for i in range(kernel):
        dx[i : i + span : stride] += dcols[:, i, :]
    return dx, dw, db


def conv1d(x: np.ndarray, w: np.ndarray, b: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Strided conv with "same" padding: ``floor(T / stride)`` output steps."""
    if x.ndim != 2:
        raise ShapeError(f"conv1d: expected [T, C] input, got rank {x.ndim}")
    if x.shape[0] < 1:
        raise ShapeError("conv1d: time dimension T must be >= 1")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"conv1d: input channels {x.shape[1]} != spec in_channels {spec.in_channels}")
    if w.shape != (spec.kernel, spec.in_channels, spec.out_channels):
        raise ShapeError(
            f"conv1d: kernel shape {w.shape} != (kernel, in, out) "
            f"{(spec.kernel, spec.in_channels, spec.out_channels)}"
        )
    n_out = spec.out_length(x.shape[0])
    if n_out == 0:
        return np.zeros((0, spec.out_channels), x.dtype)
    xp = pad_same(x, n_out, spec.stride, spec.kernel)
    y, _ = conv1d_valid(xp, w, b, spec.stride)
    return check_finite("conv1d", y)


# -- dense -------------------------------------------------------------------

def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"dense: input features {x.shape[-1]} != weight rows {w.shape[0]}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"dense: bias length {b.shape} != weight cols {w.shape[1]}")
    y = x @ w
    y += b
    return y, (x, w)


def dense_backward(dy: np.ndarray, cache):
    x, w = cache
    return dy @ w.T, x.T @ dy, dy.sum(axis=0)


def dense(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    y, _ = dense_forward(x, w, b)
    return check_finite("dense", y)


# -- batch normalization -----------------------------------------------------

@dataclass
class BNState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.99
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, dtype=DTYPE, momentum: float = 0.99, eps: float = 1e-5):
        return cls(
            np.ones(channels, dtype), np.zeros(channels, dtype),
            np.zeros(channels, dtype), np.ones(channels, dtype), momentum, eps,
        )


def batchnorm_train_forward(x, gamma, beta, eps):
    """Normalize with statistics of ``x`` over axis 0 (all rows of the batch).

    Returns ``(y, cache, batch_mean, batch_var)``; the variance is the biased
    estimate, which is also what the running average accumulates.
    """
    mean = x.mean(axis=0)
    xc = x - mean
    var = (xc * xc).mean(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    y = xhat * gamma + beta
    return y, (xhat, inv_std, gamma), mean, var


def batchnorm_train_backward(dy, cache):
    xhat, inv_std, gamma = cache
    n = dy.shape[0]
    dbeta = dy.sum(axis=0)
    dgamma = (dy * xhat).sum(axis=0)
    dxhat = dy * gamma
    dx = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    return dx, dgamma, dbeta


def batchnorm_infer_forward(x, gamma, beta, mean, var, eps):
    scale = gamma / np.sqrt(var + eps)
    y = (x - mean) * scale + beta
    return y, ((x - mean) / np.sqrt(var + eps), scale)


def batchnorm_infer_backward(dy, cache):
    xhat, scale = cache
    return dy * scale, (dy * xhat).sum(axis=0), dy.sum(axis=0)


def update_running(running: np.ndarray, batch: np.ndarray, momentum: float) -> np.ndarray:
    return (momentum * running + (1.0 - momentum) * batch).astype(running.dtype)


def batchnorm(x: np.ndarray, state: BNState, training: bool) -> np.ndarray:
    """Batch norm over the time axis.  In training mode ``state``'s running
    statistics are advanced by one momentum step (the only in-place update
    in this module, kept here for the standalone op)."""
    if x.ndim != 2 or x.shape[1] != state.gamma.shape[0]:
        raise ShapeError(f"batchnorm: channels {x.shape[-1]} != state channels {state.gamma.shape[0]}")
    if training:
        y, _, mean, var = batchnorm_train_forward(x, state.gamma, state.beta, state.eps)
        state.running_mean = update_running(state.running_mean, mean, state.momentum)
        state.running_var = update_running(state.running_var, var, state.momentum)
    else:
        y, _ = batchnorm_infer_forward(
            x, state.gamma, state.beta, state.running_mean, state.running_var, state.eps
        )
    return check_finite("batchnorm", y)


# -- activations, dropout ----------------------------------------------------

def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dy, mask):
    return dy * mask


def dropout_forward(x, rate: float, training: bool, rng: np.random.Generator | None):
    """Inverted dropout; returns ``(y, mask)`` where ``mask`` is None when inactive."""
    if not training or rate <= 0.0:
        return x, None
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = rng.random(x.shape, dtype=np.float64) >= rate
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
    return x * mask, mask


def dropout_backward(dy, mask):
    return dy if mask is None else dy * mask


def dropout(x, rate: float, training: bool, rng: np.random.Generator | None = None):
    return dropout_forward(x, rate, training, rng)[0]


# -- softmax / cross-entropy -------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_xent(logits: np.ndarray, target: np.ndarray):
    """Time-averaged categorical cross-entropy.

    ``target`` is one-hot ``[T, K]``.  Returns ``(loss, probs)``; the gradient
    w.r.t. logits is ``(probs - target) / T``.
    """
    if logits.ndim != 2:
        raise ShapeError(f"softmax_xent: expected [T, K] logits, got rank {logits.ndim}")
    if logits.shape[1] < 2:
        raise ValueError(f"softmax_xent: need K >= 2 classes, got {logits.shape[1]}")
    if target.shape != logits.shape:
        raise ShapeError(f"softmax_xent: target shape {target.shape} != logits shape {logits.shape}")
    logp = log_softmax(logits)
    t = max(logits.shape[0], 1)
    loss = float(-(target * logp).sum() / t)
    return loss, np.exp(logp)


def one_hot(labels: np.ndarray, k: int, dtype=DTYPE) -> np.ndarray:
    out = np.zeros((len(labels), k), dtype)
    out[np.arange(len(labels)), labels] = 1
    return out


# -- optimizer ---------------------------------------------------------------

class Adam:
    """Bias-corrected Adam over a dict of named arrays."""

    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        self.step_count += 1
        t = self.step_count
        out = dict(params)
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, g in grads.items():
            p = params[name]
            m = self.m.get(name)
            v = self.v.get(name)
            if m is None:
                m = np.zeros_like(p)
                v = np.zeros_like(p)
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            self.m[name], self.v[name] = m.astype(p.dtype), v.astype(p.dtype)
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            out[name] = (p - update).astype(p.dtype)
        return out

    def state_dict(self) -> dict:
        return {"step": self.step_count, "m": dict(self.m), "v": dict(self.v)}


def adam_step(params, grads, state: Adam | None = None, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    """Functional form: returns ``(new_params, state)``."""
    if state is None:
        state = Adam(lr, beta1, beta2, eps)
    return state.step(params, grads), state


# -- gradient checking -------------------------------------------------------

def numerical_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-4, max_entries: int | None = None,
                   rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of ``f`` w.r.t. entries of ``x`` (perturbed in place).

    Returns ``(flat_indices, values)``; with ``max_entries`` a random subset
    of entries is probed.
    """
    flat = x.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        idx = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False))
    vals = np.empty(len(idx))
    for n, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        vals[n] = (fp - fm) / (2 * h)
    return idx, vals


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> float:
    """``max|a - n| / max(max|a|, max|n|, floor)``.

    The floor keeps tensors whose true gradient is identically zero (a conv
    bias feeding batch norm) from turning difference noise into a ratio of 1.
    """
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max() / scale)


def grad_check(loss_and_grads: Callable[[dict[str, np.ndarray]], tuple[float, dict[str, np.ndarray]]],
               inputs: dict[str, np.ndarray], h: float = 1e-4, max_entries: int | None = None,
               seed: int = 0, loss: Callable[[dict[str, np.ndarray]], float] | None = None) -> float:
    """Compare analytic gradients with central finite differences in float64.

    ``loss_and_grads(inputs)`` must be deterministic.  The error per tensor is
    :func:`relative_error`; the maximum over tensors is returned.  An optional
    cheaper ``loss(inputs)`` is used for the finite-difference probes.
    """
    loss = loss or (lambda p: loss_and_grads(p)[0])
    work = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    _, analytic = loss_and_grads(work)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, g in analytic.items():
        x = work[name]
        idx, num = numerical_grad(lambda: loss(work), x, h, max_entries, rng)
        worst = max(worst, relative_error(np.asarray(g, np.float64).reshape(-1)[idx], num))
    return worst
