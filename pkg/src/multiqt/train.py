"""Objectives, modality-permutation augmentation and the training loop."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .metrics import evaluate
from .model import MultiQT, backward, forward, is_trainable
from .numcore import Adam, NonFiniteError, log_softmax, update_running

log = logging.getLogger(__name__)

# permutation probabilities used for the robustness-trained models
ABLATION_PA = 0.1
ABLATION_PS = 0.5


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 6
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    l2: float = 0.1
    multitask_beta: float = 0.5
    p_a: float = 0.0
    p_s: float = 0.0
    epochs: int = 20
    seed: int = 0
    select_metric: str = "instance_f1"   # validation metric for checkpoint selection
    precise_bn: bool = True              # re-estimate BN statistics before evaluation

    def __post_init__(self):
        if not 0.0 <= self.multitask_beta <= 1.0:
            raise ValueError("multitask_beta must be in [0, 1]")
        for name in ("p_a", "p_s"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        """Settings for the reduced-width desk model: a few thousand steps
        instead of long GPU runs, so a larger step and a weaker penalty."""
        base = dict(lr=3e-3, l2=1e-3, epochs=20)
        base.update(kw)
        return cls(**base)


class TrainingDiverged(RuntimeError):
    pass


# -- losses ------------------------------------------------------------------

def sequence_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Time-averaged cross-entropy of one example and its gradient w.r.t. logits."""
    logp = log_softmax(logits)
    t = len(labels)
    rows = np.arange(t)
    loss = float(-logp[rows, labels].sum() / t)
    d = np.exp(logp)
    d[rows, labels] -= 1
    return loss, d / t


def multitask_loss(loss_k: float, loss_bin: float, beta: float) -> float:
    return beta * loss_bin + (1.0 - beta) * loss_k


def binary_targets(labels: np.ndarray) -> np.ndarray:
    """1 wherever the gold label is any positive class."""
    return (np.asarray(labels) != 0).astype(np.int64)


def example_loss(model: MultiQT, x_a, x_s, y, beta: float = 0.0) -> float:
    """Inference-mode loss of one call (no dropout, frozen batch norm)."""
    res = forward(model, [x_a], [x_s], training=False)
    loss, _ = sequence_xent(res.logits, y)
    if res.logits_bin is not None:
        loss_b, _ = sequence_xent(res.logits_bin, binary_targets(y))
        loss = multitask_loss(loss, loss_b, beta)
    return loss


def l2_penalty(params: dict[str, np.ndarray], coeff: float) -> float:
    return 0.5 * coeff * float(sum(np.sum(v.astype(np.float64) ** 2)
                                   for k, v in params.items() if is_trainable(k)))


@dataclass
class StepResult:
    loss: float            # data loss, mean over examples
    total: float           # including the l2 term
    grads: dict[str, np.ndarray]
    bn_stats: dict
    example_losses: list[float]


def batch_loss_and_grads(model: MultiQT, xs_a, xs_s, ys, beta: float = 0.0, l2: float = 0.0,
                         training: bool = True, rng: np.random.Generator | None = None,
                         with_grads: bool = True) -> StepResult:
    """Mean over examples of their time-averaged losses, plus ``l2 / 2 * |theta|^2``.

    ``with_grads=False`` skips the backward pass and returns empty gradients.
    """
    res = forward(model, xs_a, xs_s, training=training, rng=rng)
    m = len(ys)
    dl = np.empty_like(res.logits)
    dlb = np.empty_like(res.logits_bin) if res.logits_bin is not None else None
    losses = []
    offset = 0
    mt = res.logits_bin is not None
    for i, (t, y) in enumerate(zip(res.lengths, ys)):
        if len(y) != t:
            raise ValueError(f"example {i}: {len(y)} labels for {t} output steps")
        sl = slice(offset, offset + t)
        loss_k, d_k = sequence_xent(res.logits[sl], y)
        if mt:
            loss_b, d_b = sequence_xent(res.logits_bin[sl], binary_targets(y))
            losses.append(multitask_loss(loss_k, loss_b, beta))
            dl[sl] = d_k * ((1.0 - beta) / m)
            dlb[sl] = d_b * (beta / m)
        else:
            losses.append(loss_k)
            dl[sl] = d_k / m
        offset += t
    grads = backward(model, res, dl, dlb) if with_grads else {}
    data_loss = float(np.mean(losses))
    total = data_loss
    if l2 > 0:
        total += l2_penalty(model.params, l2)
        for k in grads:
            grads[k] = grads[k] + l2 * model.params[k]
    return StepResult(data_loss, total, grads, res.bn_stats, losses)


# -- augmentation ------------------------------------------------------------

@dataclass
class Example:
    x_a: np.ndarray | None
    x_s: np.ndarray | None
    y: np.ndarray
    permuted_audio: bool = False
    permuted_text: bool = False


def permute_augment(batch: Sequence[Example], p_a: float, p_s: float,
                    rng: np.random.Generator) -> list[Example]:
    """Independently shuffle each example's audio (prob ``p_a``) and text
    (prob ``p_s``) along the whole time axis.  Labels are never touched."""
    out = []
    for ex in batch:
        xa, xs = ex.x_a, ex.x_s
        pa = pt = False
        # draw both coins for every example so the stream does not depend on p
        ua, us = rng.random(), rng.random()
        if xa is not None and ua < p_a:
            xa = xa[rng.permutation(xa.shape[0])]
            pa = True
        if xs is not None and us < p_s:
            xs = xs[rng.permutation(xs.shape[0])]
            pt = True
        out.append(Example(xa, xs, ex.y, pa, pt))
    return out


# -- training loop -----------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    split: str
    loss: float
    timestep_f1: float | None = None
    instance_f1: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class FitResult:
    model: MultiQT
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    step_losses: list[float] = field(default_factory=list)

    def write_log(self, path: str | Path) -> None:
        Path(path).write_text("".join(r.to_json() + "\n" for r in self.history))


def apply_bn_stats(params: dict[str, np.ndarray], stats: dict, momentum: float) -> dict[str, np.ndarray]:
    out = dict(params)
    for prefix, (mean, var) in stats.items():
        out[f"{prefix}.bn.mean"] = update_running(params[f"{prefix}.bn.mean"], mean, momentum)
        out[f"{prefix}.bn.var"] = update_running(params[f"{prefix}.bn.var"], var, momentum)
    return out


def recalibrate_bn(model: MultiQT, calls, batch_size: int = 6, p_a: float = 0.0, p_s: float = 0.0,
                   seed: int = 0) -> MultiQT:
    """Replace running BN statistics with population estimates over ``calls``.

    Each batch runs in batch-statistics mode with dropout disabled; per-layer
    first and second moments are averaged over batches.  Short runs need this
    because the weights (and hence activation scales) keep moving faster than
    a 0.99 moving average can follow.  With ``p_a``/``p_s`` the inputs are
    permuted as in training, so the estimates match what a moving average
    over training batches would converge to.
    """
    if not calls:
        return model
    quiet = MultiQT(replace(model.config, conv_dropout=0.0, trunk_dropout=0.0), model.params)
    m1: dict[str, np.ndarray] = {}
    m2: dict[str, np.ndarray] = {}
    n = 0
    data = _examples(calls)
    rng = np.random.default_rng(seed)
    for b0 in range(0, len(data), batch_size):
        batch = data[b0:b0 + batch_size]
        if p_a > 0 or p_s > 0:
            batch = permute_augment(batch, p_a, p_s, rng)
        res = forward(quiet, [e.x_a for e in batch], [e.x_s for e in batch], training=True)
        for k, (mean, var) in res.bn_stats.items():
            m1[k] = m1.get(k, 0.0) + mean.astype(np.float64)
            m2[k] = m2.get(k, 0.0) + var.astype(np.float64) + mean.astype(np.float64) ** 2
        n += 1
    params = dict(model.params)
    for k in m1:
        mean = m1[k] / n
        dtype = params[f"{k}.bn.mean"].dtype
        params[f"{k}.bn.mean"] = mean.astype(dtype)
        params[f"{k}.bn.var"] = np.maximum(m2[k] / n - mean ** 2, 0.0).astype(dtype)
    return MultiQT(model.config, params)


def _examples(calls) -> list[Example]:
    return [Example(c.x_a, c.x_s, c.labels) for c in calls]


def fit(model: MultiQT, train_calls, val_calls=None, cfg: TrainConfig = TrainConfig(),
        max_steps: int | None = None) -> FitResult:
    """Mini-batch Adam on whole calls.

    Examples are not padded: a batch runs as one stacked forward pass whose
    batch-norm statistics pool every timestep of every example.  With
    ``val_calls`` the parameters of the best validation epoch are returned.
    """
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    data = _examples(train_calls)
    result = FitResult(model)
    best_score = -1.0
    beta = cfg.multitask_beta if model.config.multitask else 0.0
    steps = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(data))
        epoch_losses = []
        for b0 in range(0, len(order), cfg.batch_size):
            batch = [data[i] for i in order[b0:b0 + cfg.batch_size]]
            if cfg.p_a > 0 or cfg.p_s > 0:
                batch = permute_augment(batch, cfg.p_a, cfg.p_s, rng)
            try:
                step = batch_loss_and_grads(
                    model, [e.x_a for e in batch], [e.x_s for e in batch], [e.y for e in batch],
                    beta, cfg.l2, training=True, rng=rng)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"epoch {epoch} step {steps}: {exc}") from None
            if not np.isfinite(step.total):
                norms = {k: float(np.linalg.norm(v)) for k, v in model.params.items()}
                raise TrainingDiverged(f"epoch {epoch} step {steps}: loss {step.total}; param norms {norms}")
            new = opt.step(model.trainable(), step.grads)
            new = apply_bn_stats({**model.params, **new}, step.bn_stats, model.config.bn_momentum)
            model = MultiQT(model.config, new)
            epoch_losses.append(step.loss)
            result.step_losses.append(step.loss)
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        rec = EpochRecord(epoch, "train", float(np.mean(epoch_losses)))
        result.history.append(rec)
        log.info(rec.to_json())
        if cfg.precise_bn:
            model = recalibrate_bn(model, train_calls, cfg.batch_size, cfg.p_a, cfg.p_s, cfg.seed)
        if val_calls:
            ev = evaluate(model, val_calls).summary()
            vloss = float(np.mean([example_loss(model, c.x_a, c.x_s, c.labels, beta) for c in val_calls]))
            vrec = EpochRecord(epoch, "val", vloss, ev["timestep_f1"], ev["instance_f1"])
            result.history.append(vrec)
            log.info(vrec.to_json())
            score = ev[cfg.select_metric]
            if score > best_score:
                best_score = score
                result.model = model
                result.best_epoch = epoch
        else:
            result.model = model
            result.best_epoch = epoch
        if max_steps is not None and steps >= max_steps:
            break
    if cfg.epochs == 0:
        result.model = model
    return result


def select_validation(calls, fraction: float = 0.1, seed: int = 0):
    """Deterministic train/validation split of a training fold."""
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(calls))
    n_val = max(1, int(round(len(calls) * fraction))) if len(calls) > 1 else 0
    val = sorted(idx[:n_val])
    val_set = set(val)
    return [c for i, c in enumerate(calls) if i not in val_set], [calls[i] for i in val]
