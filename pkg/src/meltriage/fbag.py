"""Binary feature-bag files.

One file holds the tile feature vectors of one slide. Layout, all
little-endian with no padding:

    magic   4 bytes  "FBAG"
    version u16      1
    n_tiles u32
    dim     u32
    then n_tiles records of:
        grid_x     u32
        grid_y     u32
        section_id u16
        reserved   u16  (must be zero)
        features   dim x float32
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError
from .records import FeatureBag

MAGIC = b"FBAG"
VERSION = 1
_HEADER = struct.Struct("<4sHII")


def _record_dtype(dim: int) -> np.dtype:
    return np.dtype(
        [
            ("grid_x", "<u4"),
            ("grid_y", "<u4"),
            ("section_id", "<u2"),
            ("reserved", "<u2"),
            ("features", "<f4", (dim,)),
        ]
    )


def write_feature_bag(bag: FeatureBag, path: str | Path) -> None:
    """Serialize one slide's tiles. The bag must not mix slides."""
    bag.validate()
    if len(set(bag.slide_ids)) > 1:
        raise ValidationError(
            f"bag {bag.case_id}: a feature file holds a single slide, "
            f"got {sorted(set(bag.slide_ids))}"
        )
    n, dim = bag.vectors.shape
    for name, arr, limit in (
        ("grid_x", bag.grid_x, 2**32),
        ("grid_y", bag.grid_y, 2**32),
        ("section_id", bag.section_ids, 2**16),
    ):
        a = np.asarray(arr)
        if a.size and (a.min() < 0 or a.max() >= limit):
            raise ValidationError(f"bag {bag.case_id}: {name} out of range for format")
    records = np.zeros(n, dtype=_record_dtype(dim))
    records["grid_x"] = bag.grid_x
    records["grid_y"] = bag.grid_y
    records["section_id"] = bag.section_ids
    records["features"] = bag.vectors.astype("<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, dim))
        fh.write(records.tobytes())


def read_feature_bag(
    path: str | Path,
    case_id: str | None = None,
    slide_id: str | None = None,
) -> FeatureBag:
    """Load a feature file back into a bag.

    The format stores neither case nor slide identity; both default to the
    file's stem and can be overridden by the caller assembling a case.
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: file shorter than header")
    magic, version, n, dim = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if n < 1 or dim < 1:
        raise FormatError(f"{path}: degenerate header n_tiles={n} dim={dim}")
    dtype = _record_dtype(dim)
    expected = _HEADER.size + n * dtype.itemsize
    if len(raw) != expected:
        raise FormatError(
            f"{path}: payload length {len(raw) - _HEADER.size} does not match "
            f"{n} records of {dtype.itemsize} bytes"
        )
    records = np.frombuffer(raw, dtype=dtype, offset=_HEADER.size, count=n)
    if (records["reserved"] != 0).any():
        raise FormatError(f"{path}: reserved field must be zero")
    vectors = np.ascontiguousarray(records["features"], dtype=np.float32)
    if not np.isfinite(vectors).all():
        raise ValidationError(f"{path}: non-finite feature values")
    name = slide_id if slide_id is not None else path.stem
    bag = FeatureBag(
        case_id=case_id if case_id is not None else path.stem,
        vectors=vectors,
        slide_ids=(name,) * n,
        section_ids=records["section_id"].astype(np.int64),
        grid_x=records["grid_x"].astype(np.int64),
        grid_y=records["grid_y"].astype(np.int64),
    )
    bag.validate()
    return bag
