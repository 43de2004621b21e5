"""Dataset manifests: the JSON index of cases, slides, and feature files.

Top-level object: {"version": 1, "cases": [...]}. Each case carries
case_id, patient_id, label ("low"|"high"), tags, and its slides; each slide
names its feature file (path relative to the manifest) and its
cross-sections with their tile indices into that file. Unknown top-level
keys (for example an embedded run_config) are ignored on load.

Validation is strict: a manifest that breaks any invariant is rejected as a
whole rather than partially loaded.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError
from .fbag import read_feature_bag
from .records import CaseRecord, CrossSection, FeatureBag, Label, SlideRecord

MANIFEST_VERSION = 1


def _require(mapping: dict, key: str, kind, where: str):
    if key not in mapping:
        raise FormatError(f"{where}: missing field {key!r}")
    value = mapping[key]
    if not isinstance(value, kind):
        raise FormatError(
            f"{where}: field {key!r} has type {type(value).__name__}"
        )
    return value


def _parse_case(obj: dict) -> CaseRecord:
    case_id = _require(obj, "case_id", str, "case")
    where = f"case {case_id}"
    patient_id = _require(obj, "patient_id", str, where)
    label = Label.from_string(_require(obj, "label", str, where))
    tags_raw = _require(obj, "tags", list, where)
    if not all(isinstance(t, str) for t in tags_raw):
        raise FormatError(f"{where}: field 'tags' must hold strings")
    slides = []
    for slide_obj in _require(obj, "slides", list, where):
        if not isinstance(slide_obj, dict):
            raise FormatError(f"{where}: field 'slides' must hold objects")
        slide_id = _require(slide_obj, "slide_id", str, where)
        swhere = f"{where} slide {slide_id}"
        feature_file = _require(slide_obj, "feature_file", str, swhere)
        sections = []
        for sec_obj in _require(slide_obj, "sections", list, swhere):
            if not isinstance(sec_obj, dict):
                raise FormatError(f"{swhere}: field 'sections' must hold objects")
            section_id = _require(sec_obj, "section_id", int, swhere)
            indices = _require(sec_obj, "tile_indices", list, swhere)
            if not all(isinstance(i, int) and i >= 0 for i in indices):
                raise FormatError(
                    f"{swhere} section {section_id}: "
                    f"field 'tile_indices' must hold non-negative integers"
                )
            sections.append(CrossSection(section_id, tuple(indices)))
        slides.append(SlideRecord(slide_id, feature_file, tuple(sections)))
    record = CaseRecord(
        case_id=case_id,
        patient_id=patient_id,
        label=label,
        tags=frozenset(tags_raw),
        slides=tuple(slides),
    )
    record.validate()
    return record


def load_manifest(path: str | Path) -> list[CaseRecord]:
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(obj, dict):
        raise FormatError(f"{path}: top level must be an object")
    version = _require(obj, "version", int, str(path))
    if version != MANIFEST_VERSION:
        raise FormatError(f"{path}: unsupported manifest version {version}")
    cases = [_parse_case(c) for c in _require(obj, "cases", list, str(path))]
    seen: set[str] = set()
    for case in cases:
        if case.case_id in seen:
            raise ValidationError(f"{path}: duplicate case_id {case.case_id}")
        seen.add(case.case_id)
    return cases


def case_to_dict(case: CaseRecord) -> dict:
    return {
        "case_id": case.case_id,
        "patient_id": case.patient_id,
        "label": case.label.value,
        "tags": sorted(case.tags),
        "slides": [
            {
                "slide_id": s.slide_id,
                "feature_file": s.feature_file,
                "sections": [
                    {
                        "section_id": sec.section_id,
                        "tile_indices": list(sec.tile_indices),
                    }
                    for sec in s.sections
                ],
            }
            for s in case.slides
        ],
    }


def save_manifest(
    cases: list[CaseRecord],
    path: str | Path,
    run_config: dict | None = None,
) -> None:
    obj: dict = {"version": MANIFEST_VERSION, "cases": [case_to_dict(c) for c in cases]}
    if run_config is not None:
        obj["run_config"] = run_config
    text = json.dumps(obj, sort_keys=True, indent=2) + "\n"
    Path(path).write_text(text, encoding="utf-8")


def load_case_bag(case: CaseRecord, root: str | Path) -> FeatureBag:
    """Assemble a case's bag from its slides' feature files.

    Tile order is canonical: slides in case order, sections in slide order,
    tile indices in listed order. Each referenced record's stored section id
    must agree with the section that references it.
    """
    root = Path(root)
    vectors = []
    slide_ids: list[str] = []
    section_ids: list[int] = []
    grid_x: list[int] = []
    grid_y: list[int] = []
    for slide in case.slides:
        fpath = Path(slide.feature_file)
        if not fpath.is_absolute():
            fpath = root / fpath
        stored = read_feature_bag(fpath, case_id=case.case_id, slide_id=slide.slide_id)
        for sec in slide.sections:
            for idx in sec.tile_indices:
                if idx >= stored.n_tiles:
                    raise ValidationError(
                        f"case {case.case_id} slide {slide.slide_id}: tile index "
                        f"{idx} out of range for {stored.n_tiles} stored tiles"
                    )
                if int(stored.section_ids[idx]) != sec.section_id:
                    raise ValidationError(
                        f"case {case.case_id} slide {slide.slide_id}: tile {idx} "
                        f"stored with section {int(stored.section_ids[idx])} but "
                        f"referenced by section {sec.section_id}"
                    )
                vectors.append(stored.vectors[idx])
                slide_ids.append(slide.slide_id)
                section_ids.append(sec.section_id)
                grid_x.append(int(stored.grid_x[idx]))
                grid_y.append(int(stored.grid_y[idx]))
    if not vectors:
        raise ValidationError(f"case {case.case_id}: no tiles referenced by any section")
    bag = FeatureBag(
        case_id=case.case_id,
        vectors=np.stack(vectors),
        slide_ids=tuple(slide_ids),
        section_ids=np.asarray(section_ids, dtype=np.int64),
        grid_x=np.asarray(grid_x, dtype=np.int64),
        grid_y=np.asarray(grid_y, dtype=np.int64),
    )
    bag.validate()
    return bag


def load_all_bags(cases: list[CaseRecord], root: str | Path) -> dict[str, FeatureBag]:
    return {case.case_id: load_case_bag(case, root) for case in cases}
