"""Core data model: cases, slides, cross-sections, and feature bags.

A case is one specimen belonging to one patient. It owns one or more slides,
each slide holds one or more physical cross-sections, and every tile that
survived tessellation contributes one feature vector. The model consumes the
case as a single unordered bag of tile vectors; the slide/section structure
is kept because cross-sections are the unit of the training-time dropout
augmentation.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError


class Label(enum.Enum):
    LOW = "low"
    HIGH = "high"

    @classmethod
    def from_string(cls, text: str) -> "Label":
        for member in cls:
            if member.value == text:
                return member
        raise ValidationError(f"label must be 'low' or 'high', got {text!r}")


@dataclass(frozen=True)
class CrossSection:
    """One physical tissue piece on a slide.

    ``tile_indices`` are storage indices into the owning slide's feature
    file; lists of different sections on one slide must be disjoint.
    """

    section_id: int
    tile_indices: tuple[int, ...]


@dataclass(frozen=True)
class SlideRecord:
    slide_id: str
    feature_file: str
    sections: tuple[CrossSection, ...]

    def validate(self) -> None:
        ids = [s.section_id for s in self.sections]
        if len(set(ids)) != len(ids):
            raise ValidationError(
                f"slide {self.slide_id}: duplicate section ids {ids}"
            )
        seen: set[int] = set()
        for sec in self.sections:
            overlap = seen.intersection(sec.tile_indices)
            if overlap:
                raise ValidationError(
                    f"slide {self.slide_id}: tile indices {sorted(overlap)} "
                    f"appear in more than one section"
                )
            if len(set(sec.tile_indices)) != len(sec.tile_indices):
                raise ValidationError(
                    f"slide {self.slide_id} section {sec.section_id}: "
                    f"repeated tile index"
                )
            seen.update(sec.tile_indices)


@dataclass(frozen=True)
class CaseRecord:
    case_id: str
    patient_id: str
    label: Label
    tags: frozenset[str] = field(default_factory=frozenset)
    slides: tuple[SlideRecord, ...] = ()

    def validate(self) -> None:
        if not self.case_id:
            raise ValidationError("case_id must be non-empty")
        if not self.patient_id:
            raise ValidationError(f"case {self.case_id}: empty patient_id")
        if not self.slides:
            raise ValidationError(f"case {self.case_id}: at least one slide required")
        slide_ids = [s.slide_id for s in self.slides]
        if len(set(slide_ids)) != len(slide_ids):
            raise ValidationError(f"case {self.case_id}: duplicate slide ids")
        for slide in self.slides:
            slide.validate()

    @property
    def is_high(self) -> bool:
        return self.label is Label.HIGH


@dataclass
class FeatureBag:
    """One case's tile feature vectors with per-tile provenance.

    ``vectors`` is (n_tiles, feature_dim). The parallel metadata arrays give
    each tile's slide, cross-section, and grid position. Tile order within a
    bag is canonical (slides in case order, sections in slide order, storage
    order within a section) but the classifier treats the bag as unordered.
    """

    case_id: str
    vectors: np.ndarray
    slide_ids: tuple[str, ...]
    section_ids: np.ndarray
    grid_x: np.ndarray
    grid_y: np.ndarray

    def validate(self) -> None:
        if self.vectors.ndim != 2:
            raise ValidationError(
                f"bag {self.case_id}: vectors must be 2-D, got {self.vectors.ndim}-D"
            )
        n = self.vectors.shape[0]
        if n < 1:
            raise ValidationError(f"bag {self.case_id}: at least one tile required")
        if not np.isfinite(self.vectors).all():
            raise ValidationError(f"bag {self.case_id}: non-finite feature values")
        for name, arr in (
            ("slide_ids", self.slide_ids),
            ("section_ids", self.section_ids),
            ("grid_x", self.grid_x),
            ("grid_y", self.grid_y),
        ):
            if len(arr) != n:
                raise ValidationError(
                    f"bag {self.case_id}: {name} length {len(arr)} != n_tiles {n}"
                )

    @property
    def n_tiles(self) -> int:
        return self.vectors.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.vectors.shape[1]

    def sections(self) -> list[tuple[str, int]]:
        """Distinct (slide_id, section_id) units in first-appearance order."""
        seen: dict[tuple[str, int], None] = {}
        for sid, sec in zip(self.slide_ids, self.section_ids):
            seen.setdefault((sid, int(sec)))
        return list(seen)

    def take(self, indices: np.ndarray) -> "FeatureBag":
        """New bag restricted to the given tile positions, order preserved."""
        idx = np.asarray(indices)
        return FeatureBag(
            case_id=self.case_id,
            vectors=self.vectors[idx],
            slide_ids=tuple(self.slide_ids[i] for i in idx),
            section_ids=self.section_ids[idx],
            grid_x=self.grid_x[idx],
            grid_y=self.grid_y[idx],
        )
