"""Patient-level dataset splitting and fold assignment.

Patients, never individual cases, are the unit of partitioning: all cases
of one patient land in the same set and the same fold. Patients with any
out-of-distribution-tagged case go straight to the test side, since such
cases are excluded from development entirely.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .records import CaseRecord

OOD_TAG = "out_of_distribution"


class Partition(enum.Enum):
    DEVELOPMENT = "development"
    TEST = "test"


@dataclass
class SplitAssignment:
    partition: dict[str, Partition]
    folds: dict[str, int] = field(default_factory=dict)

    def patients(self, side: Partition) -> list[str]:
        return [p for p, s in self.partition.items() if s is side]


def _patients_in_order(cases: list[CaseRecord]) -> list[str]:
    seen: dict[str, None] = {}
    for case in cases:
        seen.setdefault(case.patient_id)
    return list(seen)


def _patient_flags(cases: list[CaseRecord]) -> tuple[dict[str, bool], dict[str, bool]]:
    """Per patient: carries any high-labeled case / any OOD-tagged case."""
    high: dict[str, bool] = {}
    ood: dict[str, bool] = {}
    for case in cases:
        high[case.patient_id] = high.get(case.patient_id, False) or case.is_high
        ood[case.patient_id] = ood.get(case.patient_id, False) or OOD_TAG in case.tags
    return high, ood


def split_patients(
    cases: list[CaseRecord],
    test_fraction: float,
    seed,
    stratify: bool = False,
) -> SplitAssignment:
    """Partition patients into development and test sets.

    The test side receives round(n_patients * test_fraction) patients,
    clamped so both sides stay non-empty. OOD patients are forced to test
    and count toward that target; the remainder is drawn uniformly (or per
    label stratum when ``stratify`` is set) from the other patients.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValidationError(f"test_fraction must be in (0,1), got {test_fraction}")
    patients = _patients_in_order(cases)
    n = len(patients)
    if n < 2:
        raise ValidationError(f"need at least 2 patients to split, got {n}")
    high_of, ood_of = _patient_flags(cases)
    target = int(np.floor(n * test_fraction + 0.5))
    target = min(max(target, 1), n - 1)

    forced = [p for p in patients if ood_of[p]]
    free = [p for p in patients if not ood_of[p]]
    if len(forced) >= n:
        raise ValidationError("every patient is OOD-tagged; development side empty")
    rng = np.random.default_rng(seed)
    test = set(forced)
    remaining = max(target - len(forced), 0)
    remaining = min(remaining, len(free) - 1)  # keep development non-empty
    if remaining > 0:
        if stratify:
            pools = [
                [p for p in free if high_of[p]],
                [p for p in free if not high_of[p]],
            ]
            quotas = _proportional_quotas([len(pool) for pool in pools], remaining)
            for pool, quota in zip(pools, quotas):
                picked = rng.choice(len(pool), size=quota, replace=False)
                test.update(pool[i] for i in picked)
        else:
            picked = rng.choice(len(free), size=remaining, replace=False)
            test.update(free[i] for i in picked)
    partition = {
        p: Partition.TEST if p in test else Partition.DEVELOPMENT for p in patients
    }
    return SplitAssignment(partition=partition)


def _proportional_quotas(sizes: list[int], total: int) -> list[int]:
    """Largest-remainder apportionment of ``total`` across pools, capped."""
    n = sum(sizes)
    exact = [total * s / n for s in sizes]
    quotas = [min(int(e), s) for e, s in zip(exact, sizes)]
    order = sorted(
        range(len(sizes)), key=lambda i: exact[i] - int(exact[i]), reverse=True
    )
    shortfall = total - sum(quotas)
    for i in order:
        if shortfall == 0:
            break
        room = sizes[i] - quotas[i]
        add = min(room, shortfall)
        quotas[i] += add
        shortfall -= add
    return quotas


def assign_folds(
    cases: list[CaseRecord],
    split: SplitAssignment,
    k: int,
    seed,
) -> SplitAssignment:
    """Deal development patients into k folds, stratified by patient label.

    A patient counts as high when any of its cases is high. Shuffled highs
    are dealt round-robin first, shuffled lows continue at the next fold
    index, so both overall and per-class fold sizes differ by at most one.
    """
    if k < 2:
        raise ValidationError(f"fold count must be at least 2, got {k}")
    dev = [p for p in _patients_in_order(cases) if split.partition[p] is Partition.DEVELOPMENT]
    if len(dev) < k:
        raise ValidationError(f"{len(dev)} development patients cannot fill {k} folds")
    high_of, _ = _patient_flags(cases)
    rng = np.random.default_rng(seed)
    highs = [p for p in dev if high_of[p]]
    lows = [p for p in dev if not high_of[p]]
    rng.shuffle(highs)
    rng.shuffle(lows)
    folds: dict[str, int] = {}
    cursor = 0
    for group in (highs, lows):
        for patient in group:
            folds[patient] = cursor % k
            cursor += 1
    return SplitAssignment(partition=dict(split.partition), folds=folds)


def cases_on_side(
    cases: list[CaseRecord], split: SplitAssignment, side: Partition
) -> list[CaseRecord]:
    return [c for c in cases if split.partition[c.patient_id] is side]


def fold_cases(
    cases: list[CaseRecord],
    split: SplitAssignment,
    fold_id: int,
    complement: bool = False,
) -> list[CaseRecord]:
    """Development cases in (or, with ``complement``, outside) one fold."""
    out = []
    for case in cases:
        fold = split.folds.get(case.patient_id)
        if fold is None:
            continue
        if (fold == fold_id) != complement:
            out.append(case)
    return out
