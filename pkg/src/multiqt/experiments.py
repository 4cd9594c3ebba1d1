"""Reusable experiment drivers: modality grid, permutation ablation, symptoms,
baseline comparison.  Used by the ``ablate`` command and the acceptance suite.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .baseline import FnnConfig, train_baseline
from .metrics import EvalReport, evaluate, evaluate_labels
from .model import ModelConfig, MultiQT
from .synthdata import GenConfig, generate, symptom_variant
from .train import ABLATION_PA, ABLATION_PS, FitResult, TrainConfig, fit, select_validation

log = logging.getLogger(__name__)

MODALITY_LABELS = {"audio": "A", "text": "T", "both": "A+T"}
TEST_PERMUTATIONS = ("none", "text", "audio")


@dataclass(frozen=True)
class DeskSetup:
    """Sizes and presets for single-machine runs."""

    n_train: int = 200
    n_test: int = 50
    gen: GenConfig = field(default_factory=GenConfig.desk)
    model: ModelConfig = field(default_factory=ModelConfig.desk)
    train: TrainConfig = field(default_factory=TrainConfig.desk)
    val_fraction: float = 0.1


def make_split(setup: DeskSetup, seed: int, gen: GenConfig | None = None):
    """``n_train + n_test`` calls from one generator seed, split in order."""
    gen = replace(gen or setup.gen, n_calls=setup.n_train + setup.n_test, seed=seed)
    calls = symptom_variant(gen) if gen.task == "symptoms" else generate(gen)
    return calls[: setup.n_train], calls[setup.n_train:]


def train_model(setup: DeskSetup, train_calls, modality: str = "both", seed: int = 0,
                model_cfg: ModelConfig | None = None, **train_overrides) -> FitResult:
    cfg = replace(model_cfg or setup.model, modality=modality)
    tcfg = replace(setup.train, seed=seed, **train_overrides)
    if cfg.fusion == "tensor":
        tcfg = replace(tcfg, batch_size=1)
    fit_calls, val_calls = select_validation(train_calls, setup.val_fraction, seed)
    t = time.perf_counter()
    res = fit(MultiQT.init(cfg, seed=seed), fit_calls, val_calls, tcfg)
    log.info("trained %s seed=%d in %.1fs (best epoch %d)", modality, seed, time.perf_counter() - t,
             res.best_epoch)
    return res


@dataclass
class GridResult:
    # scores[modality] -> list over seeds of EvalReport summaries
    scores: dict[str, list[dict]] = field(default_factory=dict)
    forgiving: list[bool] = field(default_factory=list)   # instance F1 >= timestep F1 per run

    def mean(self, modality: str, key: str = "instance_f1") -> float:
        return float(np.mean([s[key] for s in self.scores[modality]]))

    def table(self) -> str:
        lines = [f"{'model':<6} {'TIMESTEP F1':>12} {'INSTANCE F1':>12}  runs"]
        for m, rows in self.scores.items():
            lines.append(f"{MODALITY_LABELS.get(m, m):<6} {100 * self.mean(m, 'timestep_f1'):12.1f} "
                         f"{100 * self.mean(m):12.1f}  {len(rows)}")
        return "\n".join(lines)


def modality_grid(setup: DeskSetup, seeds=(0, 1, 2), modalities=("audio", "text", "both"),
                  gen: GenConfig | None = None, keep_models: bool = False):
    """Train and test every modality on the same split for each seed.

    Returns the grid and, with ``keep_models``, ``{(modality, seed): model}``.
    """
    grid = GridResult({m: [] for m in modalities})
    models = {}
    for seed in seeds:
        train_calls, test_calls = make_split(setup, seed, gen)
        for m in modalities:
            res = train_model(setup, train_calls, m, seed)
            s = evaluate(res.model, test_calls).summary()
            grid.scores[m].append(s)
            grid.forgiving.append(s["instance_f1"] >= s["timestep_f1"])
            if keep_models:
                models[(m, seed)] = res.model
    return grid, models


@dataclass
class AblationResult:
    # f1[(trained_with_permutation, test_permutation)] -> (timestep F1, instance F1)
    f1: dict[tuple[bool, str], tuple[float, float]] = field(default_factory=dict)

    def table(self) -> str:
        lines = [f"{'training':<14} {'test perm':<10} {'TIMESTEP F1':>12} {'INSTANCE F1':>12}"]
        for (perm, test), (ts, inst) in sorted(self.f1.items()):
            name = f"p_a={ABLATION_PA},p_s={ABLATION_PS}" if perm else "vanilla"
            lines.append(f"{name:<14} {test:<10} {100 * ts:12.1f} {100 * inst:12.1f}")
        return "\n".join(lines)


def ablation_grid(models: dict[bool, MultiQT], test_calls, seed: int = 0) -> AblationResult:
    """Evaluate vanilla (False) and permutation-trained (True) models under
    every test-time permutation."""
    out = AblationResult()
    for perm, model in models.items():
        for test in TEST_PERMUTATIONS:
            s = evaluate(model, test_calls, None if test == "none" else test, seed).summary()
            out.f1[(perm, test)] = (s["timestep_f1"], s["instance_f1"])
    return out


def run_ablation(setup: DeskSetup, seed: int = 0, vanilla: MultiQT | None = None):
    train_calls, test_calls = make_split(setup, seed)
    if vanilla is None:
        vanilla = train_model(setup, train_calls, "both", seed).model
    permuted = train_model(setup, train_calls, "both", seed, p_a=ABLATION_PA, p_s=ABLATION_PS).model
    return ablation_grid({False: vanilla, True: permuted}, test_calls, seed)


def baseline_report(setup: DeskSetup, train_calls, test_calls, window_s: float = 6.0,
                    cfg: FnnConfig | None = None) -> EvalReport:
    cfg = cfg or FnnConfig.desk()
    k = setup.model.n_classes
    base = train_baseline(train_calls, k, cfg, window_s)
    return evaluate_labels([base.predict_call(c) for c in test_calls], [c.labels for c in test_calls], k)
