"""Scored-case evaluation: ranking metrics, operating points, calibration,
and stratified bootstrap confidence intervals.

The ranking metrics (``auroc``, ``auprc``, the curve emissions, and the
operating-point scan) are free functions over raw score/label arrays so they
apply to any real-valued scores; ``ScoredSet`` is the artifact-facing
container and additionally pins scores to [0, 1], since there they are
predicted probabilities. A positive label means high complexity throughout.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import seeds
from .errors import FormatError, MetricUndefinedError, ValidationError
from .records import Label


def _as_scores_labels(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim != 1 or y.ndim != 1:
        raise ValidationError("scores and labels must be 1-D")
    if s.shape[0] != y.shape[0]:
        raise ValidationError(
            f"{s.shape[0]} scores but {y.shape[0]} labels"
        )
    if s.shape[0] < 1:
        raise ValidationError("need at least one scored case")
    if not np.isfinite(s).all():
        raise ValidationError("scores must be finite")
    y = y.astype(np.int8)
    if not np.isin(y, (0, 1)).all():
        raise ValidationError("labels must be 0 or 1")
    return s, y


@dataclass
class ScoredSet:
    """Parallel per-case arrays: id, predicted probability of high
    complexity, binary label (1 = high), and tag sets."""

    case_ids: tuple[str, ...]
    scores: np.ndarray
    labels: np.ndarray
    tags: tuple[frozenset[str], ...] = ()

    def __post_init__(self):
        self.scores, self.labels = _as_scores_labels(self.scores, self.labels)
        n = self.scores.shape[0]
        if len(self.case_ids) != n:
            raise ValidationError(
                f"{len(self.case_ids)} case ids but {n} scores"
            )
        if not self.tags:
            self.tags = tuple(frozenset() for _ in range(n))
        if len(self.tags) != n:
            raise ValidationError(f"{len(self.tags)} tag sets but {n} scores")
        if (self.scores < 0.0).any() or (self.scores > 1.0).any():
            raise ValidationError("probabilities must lie in [0, 1]")

    @property
    def n(self) -> int:
        return self.scores.shape[0]

    def subset(self, indices) -> "ScoredSet":
        idx = np.asarray(indices)
        return ScoredSet(
            case_ids=tuple(self.case_ids[i] for i in idx),
            scores=self.scores[idx],
            labels=self.labels[idx],
            tags=tuple(self.tags[i] for i in idx),
        )


def _average_ranks(s: np.ndarray) -> np.ndarray:
    """1-based ranks ascending, ties receiving their group's average rank."""
    _, inverse, counts = np.unique(s, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts).astype(np.float64)
    starts = ends - counts + 1.0
    return ((starts + ends) / 2.0)[inverse]


def _class_counts(y: np.ndarray) -> tuple[int, int]:
    npos = int(y.sum())
    return npos, y.shape[0] - npos


def auroc(scores, labels) -> float:
    """Probability a random positive outscores a random negative, ties
    counting half. Equals the normalized Mann-Whitney U statistic."""
    s, y = _as_scores_labels(scores, labels)
    npos, nneg = _class_counts(y)
    if npos == 0 or nneg == 0:
        raise MetricUndefinedError(
            f"auroc needs both classes, got {npos} positive / {nneg} negative"
        )
    ranks = _average_ranks(s)
    u = ranks[y == 1].sum() - npos * (npos + 1) / 2.0
    return float(u / (npos * nneg))


def _descending_groups(s: np.ndarray, y: np.ndarray):
    """Distinct scores descending with per-group positive/total counts."""
    uniq, inverse = np.unique(s, return_inverse=True)
    tp = np.bincount(inverse, weights=y.astype(np.float64))[::-1]
    total = np.bincount(inverse).astype(np.float64)[::-1]
    return uniq[::-1], tp, total


def auprc(scores, labels) -> float:
    """Average precision by ranked step summation, equal scores grouped
    into a single step."""
    s, y = _as_scores_labels(scores, labels)
    npos, _ = _class_counts(y)
    if npos == 0:
        raise MetricUndefinedError("auprc needs at least one positive case")
    _, tp, total = _descending_groups(s, y)
    tp_cum = np.cumsum(tp)
    n_cum = np.cumsum(total)
    precision = tp_cum / n_cum
    return float(((tp / npos) * precision).sum())


@dataclass
class CurvePoints:
    """Operating-curve emission: (x, y) per threshold, threshold meaning
    "predict positive when score >= threshold"."""

    points: np.ndarray        # (k, 2) float64
    thresholds: np.ndarray    # (k,) float64, descending

    def trapezoid_area(self) -> float:
        x = self.points[:, 0]
        y = self.points[:, 1]
        return float(((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0).sum())

    def step_area(self) -> float:
        # right-constant steps starting from x = 0
        x = np.concatenate([[0.0], self.points[:, 0]])
        y = self.points[:, 1]
        return float(((x[1:] - x[:-1]) * y).sum())


def roc_points(scores, labels) -> CurvePoints:
    """ROC curve: (false positive rate, true positive rate) per distinct
    threshold, anchored at (0,0); ends at (1,1). Trapezoidal area equals
    ``auroc`` exactly up to rounding."""
    s, y = _as_scores_labels(scores, labels)
    npos, nneg = _class_counts(y)
    if npos == 0 or nneg == 0:
        raise MetricUndefinedError(
            f"roc needs both classes, got {npos} positive / {nneg} negative"
        )
    uniq_desc, tp, total = _descending_groups(s, y)
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(total - tp)
    x = np.concatenate([[0.0], fp_cum / nneg])
    yy = np.concatenate([[0.0], tp_cum / npos])
    thresholds = np.concatenate([[np.inf], uniq_desc])
    return CurvePoints(points=np.column_stack([x, yy]), thresholds=thresholds)


def pr_points(scores, labels) -> CurvePoints:
    """Precision-recall curve: (recall, precision) per distinct threshold.
    Step area (precision held right-constant from recall 0) equals
    ``auprc`` exactly up to rounding."""
    s, y = _as_scores_labels(scores, labels)
    npos, _ = _class_counts(y)
    if npos == 0:
        raise MetricUndefinedError("pr curve needs at least one positive case")
    uniq_desc, tp, total = _descending_groups(s, y)
    tp_cum = np.cumsum(tp)
    n_cum = np.cumsum(total)
    recall = tp_cum / npos
    precision = tp_cum / n_cum
    return CurvePoints(
        points=np.column_stack([recall, precision]), thresholds=uniq_desc
    )


def specificity_at_sensitivity(scores, labels, target: float) -> tuple[float, float]:
    """Highest threshold reaching sensitivity >= target, which maximizes
    specificity among all qualifying thresholds. Returns (specificity,
    threshold) of that operating point."""
    if not 0.0 < target <= 1.0:
        raise ValidationError(f"target sensitivity must be in (0,1], got {target}")
    s, y = _as_scores_labels(scores, labels)
    npos, nneg = _class_counts(y)
    if npos == 0 or nneg == 0:
        raise MetricUndefinedError(
            f"operating point needs both classes, got {npos} positive / "
            f"{nneg} negative"
        )
    uniq_desc, tp, total = _descending_groups(s, y)
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(total - tp)
    # threshold = min score reaches sensitivity 1, so a hit always exists
    hit = int(np.argmax(tp_cum / npos >= target))
    specificity = 1.0 - fp_cum[hit] / nneg
    return float(specificity), float(uniq_desc[hit])


@dataclass
class CalibrationBin:
    lower: float
    upper: float
    count: int
    mean_confidence: float | None
    empirical_frequency: float | None


@dataclass
class CalibrationReport:
    bins: list[CalibrationBin]
    ece: float
    n: int


def calibration(scores, labels, n_bins: int = 10) -> CalibrationReport:
    """Equal-width reliability bins over [0, 1], last bin right-closed.

    ECE is the count-weighted mean absolute gap between each bin's mean
    predicted probability and its positive fraction; empty bins contribute
    nothing and report no statistics.
    """
    if n_bins < 1:
        raise ValidationError(f"n_bins must be at least 1, got {n_bins}")
    s, y = _as_scores_labels(scores, labels)
    if (s < 0.0).any() or (s > 1.0).any():
        raise ValidationError("calibration requires probabilities in [0, 1]")
    idx = np.minimum((s * n_bins).astype(np.int64), n_bins - 1)
    n = s.shape[0]
    bins: list[CalibrationBin] = []
    ece = 0.0
    for b in range(n_bins):
        mask = idx == b
        count = int(mask.sum())
        if count == 0:
            bins.append(CalibrationBin(b / n_bins, (b + 1) / n_bins, 0, None, None))
            continue
        conf = float(s[mask].mean())
        freq = float(y[mask].mean())
        ece += count / n * abs(freq - conf)
        bins.append(
            CalibrationBin(b / n_bins, (b + 1) / n_bins, count, conf, freq)
        )
    return CalibrationReport(bins=bins, ece=float(ece), n=n)


def ece(scores, labels, n_bins: int = 10) -> float:
    return calibration(scores, labels, n_bins).ece


@dataclass
class BootstrapCI:
    point_estimate: float
    lower: float
    upper: float
    replicates: int
    seed: int


def stratified_bootstrap_ci(
    metric_fn, scores, labels, n_replicates: int, seed: int
) -> BootstrapCI:
    """95% percentile interval of ``metric_fn`` under within-class
    resampling.

    Each replicate redraws the positives and the negatives separately with
    replacement, preserving both class counts, so two-class metrics stay
    defined. Replicate r consumes its own stream derived from (seed, r),
    making the interval independent of evaluation order. Quantiles use
    linear interpolation; the interval is [2.5%, 97.5%].
    """
    if n_replicates < 1:
        raise ValidationError(
            f"need at least 1 bootstrap replicate, got {n_replicates}"
        )
    s, y = _as_scores_labels(scores, labels)
    point = float(metric_fn(s, y))
    pos = np.flatnonzero(y == 1)
    neg = np.flatnonzero(y == 0)
    values = np.empty(n_replicates, dtype=np.float64)
    for r in range(n_replicates):
        rng = np.random.default_rng(seeds.derive(seed, r))
        take_pos = pos[rng.integers(pos.size, size=pos.size)] if pos.size else pos
        take_neg = neg[rng.integers(neg.size, size=neg.size)] if neg.size else neg
        take = np.concatenate([take_pos, take_neg])
        values[r] = metric_fn(s[take], y[take])
    if not np.isfinite(values).all():
        raise ValidationError("bootstrap produced non-finite replicate values")
    lo, hi = np.quantile(values, [0.025, 0.975])
    return BootstrapCI(
        point_estimate=point,
        lower=float(lo),
        upper=float(hi),
        replicates=n_replicates,
        seed=seed,
    )


@dataclass(frozen=True)
class EvaluationConfig:
    bootstrap_replicates: int = 10_000
    n_bins: int = 10
    sensitivities: tuple[float, ...] = (0.95, 0.98, 0.99)
    seed: int = 0

    def __post_init__(self):
        if self.bootstrap_replicates < 1:
            raise ValidationError(
                "bootstrap_replicates must be at least 1, got "
                f"{self.bootstrap_replicates}"
            )
        if self.n_bins < 1:
            raise ValidationError(f"n_bins must be at least 1, got {self.n_bins}")
        for t in self.sensitivities:
            if not 0.0 < t <= 1.0:
                raise ValidationError(
                    f"target sensitivities must be in (0,1], got {t}"
                )
        if self.seed < 0:
            raise ValidationError(f"seed must be non-negative, got {self.seed}")


def _ci_dict(ci: BootstrapCI) -> dict:
    return {
        "point": ci.point_estimate,
        "lower": ci.lower,
        "upper": ci.upper,
    }


def evaluate(sset: ScoredSet, config: EvaluationConfig) -> dict:
    """Full metric report with bootstrap CIs, as a JSON-ready dict."""
    s, y = sset.scores, sset.labels
    npos, nneg = _class_counts(y)
    report: dict = {
        "n": sset.n,
        "n_high": npos,
        "n_low": nneg,
        "bootstrap_replicates": config.bootstrap_replicates,
        "n_bins": config.n_bins,
        "seed": config.seed,
    }
    R, seed = config.bootstrap_replicates, config.seed
    report["auroc"] = _ci_dict(stratified_bootstrap_ci(auroc, s, y, R, seed))
    report["auprc"] = _ci_dict(stratified_bootstrap_ci(auprc, s, y, R, seed))
    report["ece"] = _ci_dict(
        stratified_bootstrap_ci(
            lambda ss, yy: ece(ss, yy, config.n_bins), s, y, R, seed
        )
    )
    spec_section: dict = {}
    for target in config.sensitivities:
        spec_fn = lambda ss, yy, t=target: specificity_at_sensitivity(ss, yy, t)[0]
        ci = stratified_bootstrap_ci(spec_fn, s, y, R, seed)
        _, threshold = specificity_at_sensitivity(s, y, target)
        spec_section[repr(target)] = {
            "specificity": _ci_dict(ci),
            "threshold": threshold,
        }
    report["specificity_at_sensitivity"] = spec_section
    return report


def evaluate_partition(
    sset: ScoredSet, tag: str, config: EvaluationConfig
) -> dict:
    """Report for the subset of cases carrying ``tag``."""
    idx = [i for i in range(sset.n) if tag in sset.tags[i]]
    if not idx:
        raise ValidationError(f"partition tag {tag!r} matched no cases")
    report = evaluate(sset.subset(idx), config)
    report["partition_tag"] = tag
    return report


def write_predictions(
    path: str | Path, sset: ScoredSet, run_config: dict | None = None
) -> None:
    """Predictions CSV ``case_id,prob_high,label,tags``; tags are sorted and
    semicolon-joined; optional ``# key=value`` run-config comments first."""
    with open(path, "w", newline="") as fh:
        if run_config:
            for key in sorted(run_config):
                fh.write(f"# {key}={run_config[key]}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["case_id", "prob_high", "label", "tags"])
        for i in range(sset.n):
            label = Label.HIGH if sset.labels[i] else Label.LOW
            writer.writerow(
                [
                    sset.case_ids[i],
                    repr(float(sset.scores[i])),
                    label.value,
                    ";".join(sorted(sset.tags[i])),
                ]
            )


def read_predictions(path: str | Path) -> ScoredSet:
    """Parse a predictions CSV back into a ScoredSet."""
    case_ids: list[str] = []
    scores: list[float] = []
    labels: list[int] = []
    tags: list[frozenset[str]] = []
    with open(path, newline="") as fh:
        rows = [
            row
            for row in csv.reader(fh)
            if row and not row[0].startswith("#")
        ]
    if not rows:
        raise ValidationError(f"predictions file {path} is empty")
    header = rows[0]
    if header != ["case_id", "prob_high", "label", "tags"]:
        raise FormatError(f"unexpected predictions header {header!r} in {path}")
    if len(rows) == 1:
        raise ValidationError(f"predictions file {path} contains no cases")
    for row in rows[1:]:
        if len(row) != 4:
            raise FormatError(f"malformed predictions row {row!r} in {path}")
        case_ids.append(row[0])
        try:
            scores.append(float(row[1]))
        except ValueError as exc:
            raise FormatError(f"bad probability {row[1]!r} in {path}") from exc
        labels.append(1 if Label.from_string(row[2]) is Label.HIGH else 0)
        tags.append(frozenset(t for t in row[3].split(";") if t))
    return ScoredSet(
        case_ids=tuple(case_ids),
        scores=np.array(scores, dtype=np.float64),
        labels=np.array(labels, dtype=np.int8),
        tags=tuple(tags),
    )


def write_curve(path: str | Path, curve: CurvePoints, columns: tuple[str, str],
                run_config: dict | None = None) -> None:
    """Curve CSV: ``threshold,<x>,<y>`` rows in threshold-descending order."""
    with open(path, "w", newline="") as fh:
        if run_config:
            for key in sorted(run_config):
                fh.write(f"# {key}={run_config[key]}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["threshold", columns[0], columns[1]])
        for t, (x, yv) in zip(curve.thresholds, curve.points):
            writer.writerow([repr(float(t)), repr(float(x)), repr(float(yv))])


def write_calibration(
    path: str | Path, report: CalibrationReport, run_config: dict | None = None
) -> None:
    """Reliability-bin CSV; empty bins leave their statistics blank."""
    with open(path, "w", newline="") as fh:
        if run_config:
            for key in sorted(run_config):
                fh.write(f"# {key}={run_config[key]}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["bin_lower", "bin_upper", "count", "mean_confidence",
             "empirical_frequency"]
        )
        for b in report.bins:
            writer.writerow(
                [
                    repr(b.lower),
                    repr(b.upper),
                    b.count,
                    "" if b.mean_confidence is None else repr(b.mean_confidence),
                    "" if b.empirical_frequency is None else repr(b.empirical_frequency),
                ]
            )
