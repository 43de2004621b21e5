"""Tile-grid planning over slide geometry.

Slides are partitioned into non-overlapping tiles at the target
magnification (default 4096 px at 20x). Tissue and pen-mark coverage is
measured on a low-resolution segmentation mask (default 1.25x, so one tile
footprint is a 256x256 mask window). A tile is included when its tissue
coverage reaches the minimum fraction and it touches no pen ink at all.

The inclusion comparison uses exact rational arithmetic: coverage is a
ratio of bit counts over the full nominal footprint area, and the boundary
case (e.g. 3277/65536 against 1/20) must not depend on float rounding.
Partial tiles at the slide border are judged over their full footprint with
out-of-bounds area counted as non-tissue.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError, ValidationError


@dataclass
class SegmentationMap:
    tissue: np.ndarray  # bool (H, W)
    pen: np.ndarray     # bool (H, W)
    mask_magnification: float = 1.25

    def validate(self) -> None:
        if self.tissue.shape != self.pen.shape:
            raise ValidationError(
                f"tissue plane {self.tissue.shape} and pen plane "
                f"{self.pen.shape} differ in shape"
            )
        if self.tissue.ndim != 2 or self.tissue.size == 0:
            raise ValidationError("segmentation planes must be non-empty 2-D")
        if self.mask_magnification <= 0:
            raise ValidationError("mask_magnification must be positive")

    @property
    def height(self) -> int:
        return self.tissue.shape[0]

    @property
    def width(self) -> int:
        return self.tissue.shape[1]


def _as_fraction(value) -> Fraction:
    # str() round-trip keeps decimal inputs exact: 0.05 -> 1/20, not the
    # nearest binary float
    if isinstance(value, Fraction):
        return value
    if isinstance(value, float):
        return Fraction(str(value))
    return Fraction(value)


@dataclass
class TileParams:
    tile_size: int = 4096
    target_magnification: float = 20.0
    min_coverage: Fraction = Fraction(1, 20)

    def __post_init__(self):
        self.min_coverage = _as_fraction(self.min_coverage)
        if self.tile_size <= 0:
            raise ValidationError("tile_size must be positive")
        if not 0 < self.min_coverage <= 1:
            raise ValidationError(
                f"min_coverage must be in (0,1], got {self.min_coverage}"
            )
        if self.target_magnification <= 0:
            raise ValidationError("target_magnification must be positive")

    def scale_factor(self, smap: SegmentationMap) -> int:
        """Integer downscale between target and mask magnification."""
        ratio = _as_fraction(self.target_magnification) / _as_fraction(
            smap.mask_magnification
        )
        if ratio.denominator != 1:
            raise ValidationError(
                f"target/mask magnification ratio {ratio} is not an integer"
            )
        scale = int(ratio)
        if self.tile_size % scale != 0:
            raise ValidationError(
                f"tile_size {self.tile_size} not divisible by scale factor {scale}"
            )
        return scale


class TileStatus(enum.Enum):
    INCLUDED = "included"
    EXCLUDED_LOW_COVERAGE = "excluded_low_coverage"
    EXCLUDED_PEN = "excluded_pen"


@dataclass(frozen=True)
class TileEntry:
    grid_x: int
    grid_y: int
    coverage: Fraction
    status: TileStatus


@dataclass
class TilePlan:
    slide_id: str
    tiles: list[TileEntry]

    def included(self) -> list[TileEntry]:
        return [t for t in self.tiles if t.status is TileStatus.INCLUDED]


def threshold_segment(grayscale: np.ndarray, tissue_threshold: int) -> SegmentationMap:
    """Luminance stand-in for a learned segmenter: dark pixels are tissue."""
    img = np.asarray(grayscale)
    if img.ndim != 2 or img.size == 0:
        raise ValidationError("grayscale image must be non-empty 2-D")
    if not 0 <= tissue_threshold <= 255:
        raise ValidationError(f"threshold must be in [0,255], got {tissue_threshold}")
    tissue = img < tissue_threshold
    return SegmentationMap(
        tissue=tissue, pen=np.zeros_like(tissue, dtype=bool)
    )


def _window_count(plane: np.ndarray, x0: int, y0: int, side: int) -> int:
    h, w = plane.shape
    ys, ye = max(y0, 0), min(y0 + side, h)
    xs, xe = max(x0, 0), min(x0 + side, w)
    if ys >= ye or xs >= xe:
        return 0
    return int(np.count_nonzero(plane[ys:ye, xs:xe]))


def tile_coverage(
    smap: SegmentationMap, params: TileParams, grid_x: int, grid_y: int
) -> tuple[Fraction, Fraction]:
    """Exact (tissue, pen) fractions of one tile footprint."""
    smap.validate()
    scale = params.scale_factor(smap)
    side = params.tile_size // scale
    x0, y0 = grid_x * side, grid_y * side
    if x0 >= smap.width or y0 >= smap.height or x0 + side <= 0 or y0 + side <= 0:
        raise ValidationError(
            f"tile ({grid_x},{grid_y}) lies fully outside the {smap.width}x"
            f"{smap.height} mask"
        )
    area = side * side
    return (
        Fraction(_window_count(smap.tissue, x0, y0, side), area),
        Fraction(_window_count(smap.pen, x0, y0, side), area),
    )


def tessellate(
    smap: SegmentationMap,
    slide_extent: tuple[int, int],
    params: TileParams,
    slide_id: str = "slide",
) -> TilePlan:
    """Plan the full grid over a slide extent given at target magnification.

    Grid positions run row-major (y outer, x inner) over
    ceil(extent / tile_size) cells per axis, anchored at the origin.
    """
    smap.validate()
    width, height = slide_extent
    if width <= 0 or height <= 0:
        raise ValidationError(f"slide extent must be positive, got {slide_extent}")
    scale = params.scale_factor(smap)
    side = params.tile_size // scale
    nx = -(-width // params.tile_size)
    ny = -(-height // params.tile_size)
    area = side * side

    # integral images make the per-tile window sums O(1)
    def integral(plane: np.ndarray) -> np.ndarray:
        pad = np.zeros((smap.height + 1, smap.width + 1), dtype=np.int64)
        pad[1:, 1:] = np.cumsum(plane, axis=0)
        return pad.cumsum(axis=1)

    tissue_int = integral(smap.tissue)
    pen_int = integral(smap.pen)

    def window(integral: np.ndarray, x0: int, y0: int) -> int:
        ys, ye = min(max(y0, 0), smap.height), min(max(y0 + side, 0), smap.height)
        xs, xe = min(max(x0, 0), smap.width), min(max(x0 + side, 0), smap.width)
        return int(
            integral[ye, xe] - integral[ys, xe] - integral[ye, xs] + integral[ys, xs]
        )

    num = params.min_coverage.numerator
    den = params.min_coverage.denominator
    tiles = []
    for gy in range(ny):
        for gx in range(nx):
            tissue_bits = window(tissue_int, gx * side, gy * side)
            pen_bits = window(pen_int, gx * side, gy * side)
            if pen_bits > 0:
                status = TileStatus.EXCLUDED_PEN
            elif tissue_bits * den >= area * num:
                status = TileStatus.INCLUDED
            else:
                status = TileStatus.EXCLUDED_LOW_COVERAGE
            tiles.append(
                TileEntry(gx, gy, Fraction(tissue_bits, area), status)
            )
    return TilePlan(slide_id=slide_id, tiles=tiles)


def write_mask(smap: SegmentationMap, path: str | Path) -> None:
    """8-bit PNG with 0 = background, 1 = tissue, 2 = pen (pen wins where
    both planes are set), plus a sidecar `<path>.meta` with the
    magnification."""
    smap.validate()
    values = np.zeros(smap.tissue.shape, dtype=np.uint8)
    values[smap.tissue] = 1
    values[smap.pen] = 2
    Image.fromarray(values, mode="L").save(Path(path), format="PNG")
    Path(f"{path}.meta").write_text(
        f"mask_magnification={smap.mask_magnification!r}\n", encoding="utf-8"
    )


def read_mask(path: str | Path) -> SegmentationMap:
    path = Path(path)
    values = np.asarray(Image.open(path).convert("L"))
    if values.max(initial=0) > 2:
        raise FormatError(f"{path}: mask values must be 0, 1, or 2")
    magnification = 1.25
    meta = Path(f"{path}.meta")
    if meta.exists():
        for line in meta.read_text(encoding="utf-8").splitlines():
            key, _, value = line.partition("=")
            if key.strip() == "mask_magnification":
                magnification = float(value)
    smap = SegmentationMap(
        tissue=values == 1, pen=values == 2, mask_magnification=magnification
    )
    smap.validate()
    return smap


def write_tile_plan(
    plan: TilePlan, path: str | Path, run_config: dict | None = None
) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if run_config is not None:
            for key in sorted(run_config):
                fh.write(f"# {key}={run_config[key]}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["slide_id", "grid_x", "grid_y", "coverage", "status"])
        for tile in plan.tiles:
            writer.writerow(
                [
                    plan.slide_id,
                    tile.grid_x,
                    tile.grid_y,
                    repr(float(tile.coverage)),
                    tile.status.value,
                ]
            )
