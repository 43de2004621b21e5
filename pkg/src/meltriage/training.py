"""Aggregator training: AdamW with decoupled weight decay, a step-halving
learning-rate schedule, gradient accumulation across single-case iterations,
cross-section dropout augmentation, and periodic validation with
best-checkpoint selection.

One iteration processes one uniformly sampled training case. Gradients are
accumulated in a 64-bit buffer and applied as their mean every
``accumulation_steps`` iterations, so the effective batch size is the
accumulation window. Optimizer moments are kept in 64-bit regardless of the
parameter dtype.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import seeds
from .aggregator import AggregatorConfig, eval_loss, init_params, loss_and_grad
from .errors import NumericError, ValidationError
from .records import CaseRecord, FeatureBag
from .splits import SplitAssignment, fold_cases


@dataclass(frozen=True)
class TrainConfig:
    """Bag-training hyperparameters.

    Defaults are sized for a desk-scale run: 20,000 single-case iterations
    with 10-step accumulation gives 2,000 optimizer steps, the rate halves
    every 2,000 iterations, and validation runs every 200 iterations.
    """

    total_iterations: int = 20_000
    accumulation_steps: int = 10
    base_lr: float = 5e-4
    lr_halving_period: int = 2_000
    validation_period: int = 200
    weight_decay: float = 0.01
    section_dropout_p: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.total_iterations < 0:
            raise ValidationError(
                f"total_iterations must be non-negative, got {self.total_iterations}"
            )
        if self.accumulation_steps < 1:
            raise ValidationError(
                f"accumulation_steps must be at least 1, got {self.accumulation_steps}"
            )
        if not self.base_lr > 0.0:
            raise ValidationError(f"base_lr must be positive, got {self.base_lr}")
        if self.lr_halving_period < 1:
            raise ValidationError(
                f"lr_halving_period must be at least 1, got {self.lr_halving_period}"
            )
        if self.validation_period < 1:
            raise ValidationError(
                f"validation_period must be at least 1, got {self.validation_period}"
            )
        if self.weight_decay < 0.0:
            raise ValidationError(
                f"weight_decay must be non-negative, got {self.weight_decay}"
            )
        if not 0.0 <= self.section_dropout_p < 1.0:
            raise ValidationError(
                f"section_dropout_p must be in [0,1), got {self.section_dropout_p}"
            )
        if self.seed < 0:
            raise ValidationError(f"seed must be non-negative, got {self.seed}")

    def to_dict(self) -> dict:
        return {
            "total_iterations": self.total_iterations,
            "accumulation_steps": self.accumulation_steps,
            "base_lr": self.base_lr,
            "lr_halving_period": self.lr_halving_period,
            "validation_period": self.validation_period,
            "weight_decay": self.weight_decay,
            "section_dropout_p": self.section_dropout_p,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = cls().to_dict().keys()
        unknown = set(data) - set(known)
        if unknown:
            raise ValidationError(
                f"unknown TrainConfig fields: {sorted(unknown)}"
            )
        return cls(**data)


def lr_at(iteration: int, base_lr: float, halving_period: int) -> float:
    """Learning rate for a 0-based iteration index: halves every period."""
    if iteration < 0:
        raise ValidationError(f"iteration must be non-negative, got {iteration}")
    return base_lr * 0.5 ** (iteration // halving_period)


@dataclass
class AdamWState:
    """First/second moment estimates, always float64."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def fresh(cls, n_params: int) -> "AdamWState":
        return cls(
            m=np.zeros(n_params, dtype=np.float64),
            v=np.zeros(n_params, dtype=np.float64),
        )


def adamw_step(
    params: np.ndarray,
    grad: np.ndarray,
    state: AdamWState,
    lr: float,
    weight_decay: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> np.ndarray:
    """One decoupled-weight-decay Adam update; returns the new parameters.

    ``state`` is advanced in place. Decay multiplies the pre-update weights,
    so with a zero gradient the update is exactly ``w * (1 - lr * wd)``.
    A non-finite gradient raises before the state is touched.
    """
    g = np.asarray(grad, dtype=np.float64)
    if g.shape != params.shape:
        raise ValidationError(
            f"gradient shape {g.shape} does not match parameters {params.shape}"
        )
    if not np.isfinite(g).all():
        raise NumericError("non-finite gradient reached the optimizer")
    state.m *= beta1
    state.m += (1.0 - beta1) * g
    state.v *= beta2
    state.v += (1.0 - beta2) * np.square(g)
    state.step += 1
    m_hat = state.m / (1.0 - beta1 ** state.step)
    v_hat = state.v / (1.0 - beta2 ** state.step)
    w = params.astype(np.float64)
    new_w = w - lr * (m_hat / (np.sqrt(v_hat) + eps)) - (lr * weight_decay) * w
    return new_w.astype(params.dtype)


def cross_section_dropout(
    bag: FeatureBag, p: float, rng: np.random.Generator
) -> FeatureBag:
    """Randomly drop whole tissue cross-sections from a bag.

    Each (slide, section) unit is dropped independently with probability
    ``p``; if every unit is dropped, one uniformly chosen unit is restored
    so the bag never empties. Bags with a single unit, or ``p`` of zero,
    pass through untouched without consuming random draws.
    """
    if p <= 0.0:
        return bag
    units = bag.sections()
    if len(units) < 2:
        return bag
    dropped = rng.random(len(units)) < p
    if dropped.all():
        keep = {units[int(rng.integers(len(units)))]}
    else:
        keep = {u for u, d in zip(units, dropped) if not d}
    idx = [
        i
        for i in range(bag.n_tiles)
        if (bag.slide_ids[i], int(bag.section_ids[i])) in keep
    ]
    return bag.take(np.asarray(idx, dtype=np.int64))


@dataclass
class ValidationPoint:
    iteration: int   # 1-based iteration count at which validation ran
    loss: float
    lr: float


@dataclass
class TrainResult:
    fold_id: int
    params: np.ndarray             # snapshot with the best validation loss
    history: list[ValidationPoint] = field(default_factory=list)
    best_iteration: int | None = None
    best_loss: float | None = None


def validation_loss(
    params: np.ndarray,
    config: AggregatorConfig,
    cases: list[CaseRecord],
    bags: dict[str, FeatureBag],
) -> float:
    """Mean eval-mode cross-entropy over a case list."""
    if not cases:
        raise ValidationError("validation requires at least one case")
    total = 0.0
    for case in cases:
        total += eval_loss(params, config, bags[case.case_id], case.label)
    return total / len(cases)


def train_fold(
    cases: list[CaseRecord],
    bags: dict[str, FeatureBag],
    split: SplitAssignment,
    fold_id: int,
    agg_config: AggregatorConfig,
    train_config: TrainConfig,
) -> TrainResult:
    """Train one cross-validation member: hold out ``fold_id``, train on the
    other development folds.

    Random streams (parameter init, case sampling, section dropout,
    attention dropout) are derived independently from the config seed and
    the fold id, so folds are reproducible in isolation. The returned
    parameters are the snapshot with the lowest validation loss, earliest
    iteration winning ties; if validation never ran, the final parameters.
    Leftover gradients from a trailing partial accumulation window are
    discarded.
    """
    cfg = train_config
    train_cases = fold_cases(cases, split, fold_id, complement=True)
    val_cases = fold_cases(cases, split, fold_id)
    if not train_cases:
        raise ValidationError(f"fold {fold_id} has no training cases")
    if not val_cases:
        raise ValidationError(f"fold {fold_id} has no validation cases")
    for case in train_cases + val_cases:
        if case.case_id not in bags:
            raise ValidationError(f"no feature bag loaded for case {case.case_id}")

    params = init_params(agg_config, seeds.derive(cfg.seed, "init", fold_id))
    sample_rng = seeds.generator(cfg.seed, "sample", fold_id)
    section_rng = seeds.generator(cfg.seed, "section-dropout", fold_id)
    attn_rng = seeds.generator(cfg.seed, "attn-dropout", fold_id)

    opt = AdamWState.fresh(params.size)
    accum = np.zeros(params.size, dtype=np.float64)
    pending = 0
    history: list[ValidationPoint] = []
    best: tuple[float, int, np.ndarray] | None = None

    for i in range(cfg.total_iterations):
        case = train_cases[int(sample_rng.integers(len(train_cases)))]
        bag = cross_section_dropout(
            bags[case.case_id], cfg.section_dropout_p, section_rng
        )
        _, grad = loss_and_grad(params, agg_config, bag, case.label, rng=attn_rng)
        accum += grad
        pending += 1
        if pending == cfg.accumulation_steps:
            lr = lr_at(i, cfg.base_lr, cfg.lr_halving_period)
            params = adamw_step(
                params, accum / pending, opt, lr, cfg.weight_decay
            )
            accum[:] = 0.0
            pending = 0
        if (i + 1) % cfg.validation_period == 0:
            vloss = validation_loss(params, agg_config, val_cases, bags)
            history.append(
                ValidationPoint(
                    iteration=i + 1,
                    loss=vloss,
                    lr=lr_at(i, cfg.base_lr, cfg.lr_halving_period),
                )
            )
            if best is None or vloss < best[0]:
                best = (vloss, i + 1, params.copy())

    if best is None:
        return TrainResult(fold_id=fold_id, params=params, history=history)
    return TrainResult(
        fold_id=fold_id,
        params=best[2],
        history=history,
        best_iteration=best[1],
        best_loss=best[0],
    )


def train_ensemble(
    cases: list[CaseRecord],
    bags: dict[str, FeatureBag],
    split: SplitAssignment,
    agg_config: AggregatorConfig,
    train_config: TrainConfig,
) -> list[TrainResult]:
    """Train one member per fold present in the split, ascending fold id."""
    if not split.folds:
        raise ValidationError("split carries no fold assignment")
    fold_ids = sorted(set(split.folds.values()))
    return [
        train_fold(cases, bags, split, fold_id, agg_config, train_config)
        for fold_id in fold_ids
    ]


def write_history(
    path: str | Path, history: list[ValidationPoint], run_config: dict | None = None
) -> None:
    """Validation-history CSV: ``iteration,validation_loss,lr`` with optional
    ``# key=value`` run-config comment lines before the header."""
    with open(path, "w", newline="") as fh:
        if run_config:
            for key in sorted(run_config):
                fh.write(f"# {key}={run_config[key]}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iteration", "validation_loss", "lr"])
        for point in history:
            writer.writerow([point.iteration, repr(point.loss), repr(point.lr)])
