"""Monte Carlo case-assignment experiment.

Each iteration samples a fixed-size caseload with replacement from a scored
pool and distributes it two ways: uniformly at random (baseline) and by
descending predicted probability, experts taking the top block (triage).
The prevented statistic counts high-complexity cases that the triage policy
kept away from general pathologists, paired on the same sampled caseload.

Pathologist indexing is experts first, then generals, in both policies.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import seeds
from .errors import ValidationError
from .evaluation import ScoredSet


@dataclass(frozen=True)
class SimConfig:
    n_pathologists: int = 5
    n_experts: int = 1
    cases_per_iteration: int = 500
    cases_per_pathologist: int = 100
    iterations: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if self.n_pathologists < 2:
            raise ValidationError(
                f"need at least 2 pathologists, got {self.n_pathologists}"
            )
        if not 1 <= self.n_experts < self.n_pathologists:
            raise ValidationError(
                f"n_experts must be in [1, n_pathologists), got "
                f"{self.n_experts} of {self.n_pathologists}"
            )
        if self.cases_per_pathologist < 1:
            raise ValidationError(
                "cases_per_pathologist must be at least 1, got "
                f"{self.cases_per_pathologist}"
            )
        if self.cases_per_iteration != self.n_pathologists * self.cases_per_pathologist:
            raise ValidationError(
                f"cases_per_iteration must equal n_pathologists * "
                f"cases_per_pathologist = "
                f"{self.n_pathologists * self.cases_per_pathologist}, got "
                f"{self.cases_per_iteration}"
            )
        if self.iterations < 1:
            raise ValidationError(
                f"iterations must be at least 1, got {self.iterations}"
            )
        if self.seed < 0:
            raise ValidationError(f"seed must be non-negative, got {self.seed}")

    @property
    def n_generals(self) -> int:
        return self.n_pathologists - self.n_experts

    def to_dict(self) -> dict:
        return {
            "n_pathologists": self.n_pathologists,
            "n_experts": self.n_experts,
            "cases_per_iteration": self.cases_per_iteration,
            "cases_per_pathologist": self.cases_per_pathologist,
            "iterations": self.iterations,
            "seed": self.seed,
        }


@dataclass
class AssignmentOutcome:
    """High-complexity counts per pathologist for one iteration."""

    expert_high: np.ndarray    # (n_experts,) int64
    general_high: np.ndarray   # (n_generals,) int64

    @property
    def total_high(self) -> int:
        return int(self.expert_high.sum() + self.general_high.sum())


def _check_labels(labels, config: SimConfig) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1 or y.shape[0] != config.cases_per_iteration:
        raise ValidationError(
            f"expected exactly {config.cases_per_iteration} sampled cases, "
            f"got shape {y.shape}"
        )
    if ((y != 0) & (y != 1)).any():
        raise ValidationError("labels must be 0 or 1")
    return y.astype(np.int64)


def _block_counts(y: np.ndarray, order: np.ndarray, config: SimConfig) -> AssignmentOutcome:
    per = config.cases_per_pathologist
    counts = y[order].reshape(config.n_pathologists, per).sum(axis=1)
    return AssignmentOutcome(
        expert_high=counts[: config.n_experts],
        general_high=counts[config.n_experts :],
    )


def assign_baseline(
    labels, config: SimConfig, rng: np.random.Generator
) -> AssignmentOutcome:
    """Uniformly random assignment: one permutation cut into equal blocks."""
    y = _check_labels(labels, config)
    return _block_counts(y, rng.permutation(y.shape[0]), config)


def assign_triage(
    labels, scores, config: SimConfig, rng: np.random.Generator
) -> AssignmentOutcome:
    """Score-ranked assignment: experts take the highest-scored block.

    Ties are broken uniformly at random. Cases below the expert block are
    redistributed at random among the general pathologists.
    """
    y = _check_labels(labels, config)
    s = np.asarray(scores, dtype=np.float64)
    if s.shape != y.shape:
        raise ValidationError(
            f"scores shape {s.shape} does not match {y.shape} sampled cases"
        )
    if not np.isfinite(s).all():
        raise ValidationError("scores must be finite")
    n = y.shape[0]
    # primary key: descending score; secondary: a uniform tiebreak permutation
    order = np.lexsort((rng.permutation(n), -s))
    cut = config.n_experts * config.cases_per_pathologist
    remainder = order[cut:]
    shuffled = remainder[rng.permutation(remainder.shape[0])]
    return _block_counts(y, np.concatenate([order[:cut], shuffled]), config)


@dataclass
class RoleSummary:
    """Pooled per-iteration per-pathologist high counts for one role."""

    mean: float
    lower: float
    upper: float

    def to_dict(self) -> dict:
        return {"mean": self.mean, "lower": self.lower, "upper": self.upper}


@dataclass
class SimulationReport:
    baseline_expert: RoleSummary
    baseline_general: RoleSummary
    triage_expert: RoleSummary
    triage_general: RoleSummary
    prevented_mean: float
    prevented_lower: float
    prevented_upper: float
    iterations: int
    seed: int
    baseline_counts: np.ndarray   # (iterations, n_pathologists) int64
    triage_counts: np.ndarray     # (iterations, n_pathologists) int64
    prevented: np.ndarray         # (iterations,) int64

    def to_dict(self) -> dict:
        return {
            "baseline": {
                "expert": self.baseline_expert.to_dict(),
                "general": self.baseline_general.to_dict(),
            },
            "triage": {
                "expert": self.triage_expert.to_dict(),
                "general": self.triage_general.to_dict(),
            },
            "prevented": {
                "mean": self.prevented_mean,
                "lower": self.prevented_lower,
                "upper": self.prevented_upper,
            },
            "iterations": self.iterations,
            "seed": self.seed,
        }


def _summarize(counts: np.ndarray) -> RoleSummary:
    flat = counts.reshape(-1).astype(np.float64)
    lo, hi = np.quantile(flat, [0.025, 0.975])
    return RoleSummary(mean=float(flat.mean()), lower=float(lo), upper=float(hi))


def simulate(pool: ScoredSet, config: SimConfig) -> SimulationReport:
    """Run the full experiment against a scored case pool.

    Every iteration draws its own random stream from (seed, iteration), so
    results do not depend on execution order. Baseline and triage see the
    identical sampled caseload; the prevented count is their paired
    difference in general-pathologist high totals.
    """
    n_pool = pool.n
    P = config.n_pathologists
    E = config.n_experts
    baseline_counts = np.empty((config.iterations, P), dtype=np.int64)
    triage_counts = np.empty((config.iterations, P), dtype=np.int64)
    for t in range(config.iterations):
        rng = np.random.default_rng(seeds.derive(config.seed, t))
        sample = rng.integers(n_pool, size=config.cases_per_iteration)
        y = pool.labels[sample]
        s = pool.scores[sample]
        base = assign_baseline(y, config, rng)
        tri = assign_triage(y, s, config, rng)
        baseline_counts[t, :E] = base.expert_high
        baseline_counts[t, E:] = base.general_high
        triage_counts[t, :E] = tri.expert_high
        triage_counts[t, E:] = tri.general_high
    prevented = baseline_counts[:, E:].sum(axis=1) - triage_counts[:, E:].sum(axis=1)
    plo, phi = np.quantile(prevented.astype(np.float64), [0.025, 0.975])
    return SimulationReport(
        baseline_expert=_summarize(baseline_counts[:, :E]),
        baseline_general=_summarize(baseline_counts[:, E:]),
        triage_expert=_summarize(triage_counts[:, :E]),
        triage_general=_summarize(triage_counts[:, E:]),
        prevented_mean=float(prevented.mean()),
        prevented_lower=float(plo),
        prevented_upper=float(phi),
        iterations=config.iterations,
        seed=config.seed,
        baseline_counts=baseline_counts,
        triage_counts=triage_counts,
        prevented=prevented,
    )


def write_counts(
    path: str | Path, report: SimulationReport, run_config: dict | None = None
) -> None:
    """Per-iteration count CSV for histogram plotting.

    Columns: iteration, one baseline and one triage column per pathologist
    (experts first), then the prevented count.
    """
    P = report.baseline_counts.shape[1]
    with open(path, "w", newline="") as fh:
        if run_config:
            for key in sorted(run_config):
                fh.write(f"# {key}={run_config[key]}\n")
        writer = csv.writer(fh, lineterminator="\n")
        header = (
            ["iteration"]
            + [f"baseline_p{i}" for i in range(P)]
            + [f"triage_p{i}" for i in range(P)]
            + ["prevented"]
        )
        writer.writerow(header)
        for t in range(report.iterations):
            writer.writerow(
                [t]
                + [int(c) for c in report.baseline_counts[t]]
                + [int(c) for c in report.triage_counts[t]]
                + [int(report.prevented[t])]
            )
