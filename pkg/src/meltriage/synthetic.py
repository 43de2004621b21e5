"""Synthetic cohort generator.

Stands in for the clinical dataset: tile features are isotropic Gaussian
noise, and high-complexity cases additionally carry a subset of "signal"
tiles whose mean is shifted along the first feature axis. That family has a
closed-form Bayes discriminant per bag, which is emitted alongside the data
so downstream metrics can be checked against an oracle that never touches
the learned model.

Generation is a pure function of the config; the same config yields the
same cohort bit for bit.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import seeds
from .errors import ValidationError
from .fbag import write_feature_bag
from .manifest import save_manifest
from .records import CaseRecord, CrossSection, FeatureBag, Label, SlideRecord


@dataclass(frozen=True)
class SyntheticConfig:
    n_patients: int = 500
    extra_case_p: float = 0.15         # chance of each case beyond the first
    max_cases_per_patient: int = 3
    prevalence_high: float = 0.134
    bag_size_min: int = 4              # log-uniform; median = sqrt(min*max)
    bag_size_max: int = 256
    max_slides_per_case: int = 2
    second_slide_p: float = 0.3
    max_sections_per_slide: int = 3
    signal_fraction: float = 0.2
    class_separation: float = 4.0
    feature_dim: int = 192
    ood_fraction: float = 0.05
    scanner_b_fraction: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.n_patients < 1:
            raise ValidationError("n_patients must be at least 1")
        if not 0.0 < self.prevalence_high < 1.0:
            raise ValidationError(
                f"prevalence_high must be in (0,1), got {self.prevalence_high}"
            )
        if self.class_separation < 0.0:
            raise ValidationError("class_separation must be non-negative")
        if not 1 <= self.bag_size_min <= self.bag_size_max:
            raise ValidationError(
                f"bag size range [{self.bag_size_min}, {self.bag_size_max}] invalid"
            )
        if not 0.0 < self.signal_fraction <= 1.0:
            raise ValidationError("signal_fraction must be in (0,1]")
        if self.feature_dim < 1:
            raise ValidationError("feature_dim must be at least 1")
        if not 0.0 <= self.extra_case_p < 1.0:
            raise ValidationError("extra_case_p must be in [0,1)")
        if self.max_cases_per_patient < 1 or self.max_slides_per_case < 1:
            raise ValidationError("per-patient and per-case maxima must be >= 1")
        if self.max_sections_per_slide < 1:
            raise ValidationError("max_sections_per_slide must be >= 1")
        if not 0.0 <= self.ood_fraction < 1.0:
            raise ValidationError("ood_fraction must be in [0,1)")
        if not 0.0 <= self.scanner_b_fraction <= 1.0:
            raise ValidationError("scanner_b_fraction must be in [0,1]")
        if self.seed < 0:
            raise ValidationError("seed must be non-negative")


@dataclass
class SyntheticDataset:
    cases: list[CaseRecord]
    bags: dict[str, FeatureBag]
    oracle_scores: dict[str, float]
    signal_masks: dict[str, np.ndarray]  # bool per tile, canonical bag order
    config: SyntheticConfig = field(repr=False, default=None)


def signal_tile_count(n_tiles: int, signal_fraction: float) -> int:
    """Signal tiles in a high bag: ceil(fraction * n), never zero."""
    return max(1, math.ceil(signal_fraction * n_tiles))


def bayes_discriminant(
    vectors: np.ndarray, n_signal: int, class_separation: float
) -> float:
    """Log likelihood ratio of the bag under the high vs low generative law.

    Low: every tile ~ N(0, I). High: a uniformly random subset S of size
    n_signal has its mean shifted by ``class_separation`` along axis 0. The
    ratio is the mean over subsets of prod_{i in S} r_i with
    r_i = exp(delta * x_i0 - delta^2 / 2), i.e. the n_signal-th elementary
    symmetric polynomial of the per-tile ratios divided by C(n, n_signal).
    Evaluated in the log domain by the standard DP over tiles.
    """
    n = vectors.shape[0]
    if not 0 < n_signal <= n:
        raise ValidationError(f"n_signal {n_signal} out of range for {n} tiles")
    delta = float(class_separation)
    log_r = delta * vectors[:, 0].astype(np.float64) - 0.5 * delta * delta
    # dp[j] = log of the j-th elementary symmetric polynomial so far
    dp = np.full(n_signal + 1, -np.inf)
    dp[0] = 0.0
    for i in range(n):
        hi = min(n_signal, i + 1)
        dp[1 : hi + 1] = np.logaddexp(dp[1 : hi + 1], dp[:hi] + log_r[i])
    log_comb = (
        math.lgamma(n + 1) - math.lgamma(n_signal + 1) - math.lgamma(n - n_signal + 1)
    )
    return float(dp[n_signal] - log_comb)


def _draw_bag_size(rng: np.random.Generator, lo: int, hi: int) -> int:
    if lo == hi:
        return lo
    size = int(round(math.exp(rng.uniform(math.log(lo), math.log(hi)))))
    return min(max(size, lo), hi)


def generate_synthetic(config: SyntheticConfig) -> SyntheticDataset:
    config.validate()
    rng = seeds.generator(config.seed, "synthetic")
    cases: list[CaseRecord] = []
    bags: dict[str, FeatureBag] = {}
    oracle: dict[str, float] = {}
    signal_masks: dict[str, np.ndarray] = {}
    case_counter = 0
    for p in range(config.n_patients):
        patient_id = f"P{p:05d}"
        is_ood = rng.random() < config.ood_fraction
        n_cases = 1 + int(
            rng.binomial(config.max_cases_per_patient - 1, config.extra_case_p)
        )
        for _ in range(n_cases):
            case_id = f"C{case_counter:05d}"
            case_counter += 1
            label = (
                Label.HIGH if rng.random() < config.prevalence_high else Label.LOW
            )
            scanner = "B" if rng.random() < config.scanner_b_fraction else "A"
            n_slides = 1
            if config.max_slides_per_case > 1 and rng.random() < config.second_slide_p:
                n_slides = 2
            sections_per_slide = [
                int(rng.integers(1, config.max_sections_per_slide + 1))
                for _ in range(n_slides)
            ]
            n_tiles = _draw_bag_size(rng, config.bag_size_min, config.bag_size_max)
            # unit u = (slide, section); every tile drawn a unit uniformly
            units = [
                (s, sec) for s in range(n_slides) for sec in range(sections_per_slide[s])
            ]
            unit_of = rng.integers(0, len(units), size=n_tiles)
            feats = rng.standard_normal((n_tiles, config.feature_dim))
            is_signal = np.zeros(n_tiles, dtype=bool)
            if label is Label.HIGH:
                k = signal_tile_count(n_tiles, config.signal_fraction)
                chosen = rng.choice(n_tiles, size=k, replace=False)
                is_signal[chosen] = True
                feats[chosen, 0] += config.class_separation
            # canonical order: slide, then section, then draw order
            order = np.argsort(unit_of, kind="stable")
            feats = feats[order]
            is_signal = is_signal[order]
            unit_sorted = unit_of[order]

            slide_records = []
            bag_slide_ids: list[str] = []
            bag_section_ids: list[int] = []
            bag_gx: list[int] = []
            bag_gy: list[int] = []
            for s in range(n_slides):
                slide_id = f"{case_id}-S{s}"
                section_records = []
                store_index = 0
                for sec in range(sections_per_slide[s]):
                    u = units.index((s, sec))
                    count = int(np.sum(unit_sorted == u))
                    if count == 0:
                        # unit drew no tiles; drop it from the metadata so
                        # every declared section is backed by stored records
                        continue
                    indices = tuple(range(store_index, store_index + count))
                    store_index += count
                    section_records.append(CrossSection(sec, indices))
                    bag_slide_ids.extend([slide_id] * count)
                    bag_section_ids.extend([sec] * count)
                for i in range(store_index):
                    bag_gx.append(i % 64)
                    bag_gy.append(i // 64)
                if not section_records:
                    continue
                slide_records.append(
                    SlideRecord(
                        slide_id=slide_id,
                        feature_file=f"features/{slide_id}.fbag",
                        sections=tuple(section_records),
                    )
                )
            tags = {"out_of_distribution" if is_ood else "in_distribution",
                    f"scanner:{scanner}"}
            case = CaseRecord(
                case_id=case_id,
                patient_id=patient_id,
                label=label,
                tags=frozenset(tags),
                slides=tuple(slide_records),
            )
            case.validate()
            bag = FeatureBag(
                case_id=case_id,
                vectors=feats.astype(np.float32),
                slide_ids=tuple(bag_slide_ids),
                section_ids=np.asarray(bag_section_ids, dtype=np.int64),
                grid_x=np.asarray(bag_gx, dtype=np.int64),
                grid_y=np.asarray(bag_gy, dtype=np.int64),
            )
            bag.validate()
            k = signal_tile_count(n_tiles, config.signal_fraction)
            score = bayes_discriminant(bag.vectors, k, config.class_separation)
            cases.append(case)
            bags[case_id] = bag
            oracle[case_id] = score
            signal_masks[case_id] = is_signal
    return SyntheticDataset(
        cases=cases,
        bags=bags,
        oracle_scores=oracle,
        signal_masks=signal_masks,
        config=config,
    )


def write_synthetic(
    dataset: SyntheticDataset,
    out_dir: str | Path,
    run_config: dict | None = None,
) -> None:
    """Persist a generated cohort: manifest, per-slide feature files, the
    oracle score table, and the signal-tile table used by sanity checks."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    save_manifest(dataset.cases, out / "manifest.json", run_config=run_config)
    for case in dataset.cases:
        bag = dataset.bags[case.case_id]
        cursor = 0
        for slide in case.slides:
            count = sum(len(sec.tile_indices) for sec in slide.sections)
            part = bag.take(np.arange(cursor, cursor + count))
            cursor += count
            write_feature_bag(part, out / slide.feature_file)
    with open(out / "oracle_scores.csv", "w", encoding="utf-8", newline="") as fh:
        if run_config is not None:
            for key in sorted(run_config):
                fh.write(f"# {key}={run_config[key]}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["case_id", "oracle_score", "label"])
        for case in dataset.cases:
            writer.writerow(
                [case.case_id, repr(dataset.oracle_scores[case.case_id]), case.label.value]
            )
    with open(out / "signal_tiles.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["case_id", "slide_id", "tile_index"])
        for case in dataset.cases:
            bag = dataset.bags[case.case_id]
            mask = dataset.signal_masks[case.case_id]
            cursor = 0
            for slide in case.slides:
                count = sum(len(sec.tile_indices) for sec in slide.sections)
                for local in range(count):
                    if mask[cursor + local]:
                        writer.writerow([case.case_id, slide.slide_id, local])
                cursor += count


def read_oracle_scores(path: str | Path) -> dict[str, tuple[float, Label]]:
    out: dict[str, tuple[float, Label]] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        rows = [line for line in fh if not line.startswith("#")]
    reader = csv.DictReader(rows)
    for row in reader:
        out[row["case_id"]] = (
            float(row["oracle_score"]),
            Label.from_string(row["label"]),
        )
    return out
