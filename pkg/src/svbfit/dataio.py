"""Dataset file format and ASL ingestion helpers.

A dataset is a pair of files sharing a base path: ``<base>.json`` holding
metadata (model, design, units, optional control/label column tags, optional
mask) and ``<base>.csv`` holding the value matrix, one series per row, no
header, decimal text at full precision.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import InvariantViolation, ParseError, TagMismatch
from .models import AslPcaslDesign, DesignGrid


@dataclass(frozen=True)
class SeriesDataset:
    model_name: str
    design: object
    values: np.ndarray  # (n_series, n_timepoints)
    units: str = ""
    column_tags: tuple | None = None  # optional "control"/"label" per column
    mask: np.ndarray | None = None
    slice_index_per_voxel: np.ndarray | None = None

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if values.ndim != 2:
            raise InvariantViolation("values must be a matrix (series x timepoints)")
        if self.column_tags is not None:
            tags = tuple(self.column_tags)
            object.__setattr__(self, "column_tags", tags)
            if len(tags) != values.shape[1]:
                raise InvariantViolation(
                    f"{len(tags)} column tags for {values.shape[1]} columns"
                )
        if self.mask is not None:
            mask = np.array(self.mask, dtype=bool)
            mask.setflags(write=False)
            object.__setattr__(self, "mask", mask)
            if mask.shape != (values.shape[0],):
                raise InvariantViolation("mask length must equal series count")
        if self.slice_index_per_voxel is not None:
            siv = np.array(self.slice_index_per_voxel, dtype=int)
            siv.setflags(write=False)
            object.__setattr__(self, "slice_index_per_voxel", siv)
            if siv.shape != (values.shape[0],):
                raise InvariantViolation(
                    "slice_index_per_voxel length must equal series count"
                )

    @property
    def n_series(self) -> int:
        return self.values.shape[0]

    @property
    def n_timepoints(self) -> int:
        return self.values.shape[1]


def _base_path(path) -> Path:
    path = Path(path)
    if path.suffix in (".json", ".csv"):
        return path.with_suffix("")
    return path


def _design_to_json(design) -> dict:
    if isinstance(design, AslPcaslDesign):
        return {
            "asl": {
                "plds": design.plds.tolist(),
                "tau": design.label_duration,
                "slice_offset": design.slice_time_offset,
                "t1": design.t1_tissue,
                "t1b": design.t1_blood,
                "m0a": design.m0a,
                "partition": design.partition_coefficient,
                "blood_decay_in_bolus": design.blood_decay_in_bolus,
            }
        }
    return {"times": design.times.tolist()}


def _design_from_json(meta: dict):
    if "asl" in meta:
        asl = meta["asl"]
        try:
            return AslPcaslDesign(
                plds=np.asarray(asl["plds"], dtype=float),
                label_duration=float(asl["tau"]),
                slice_time_offset=float(asl.get("slice_offset", 0.0452)),
                t1_tissue=float(asl.get("t1", 1.3)),
                t1_blood=float(asl.get("t1b", 1.6)),
                m0a=float(asl.get("m0a", 1.0)),
                partition_coefficient=float(asl.get("partition", 0.9)),
                blood_decay_in_bolus=bool(asl.get("blood_decay_in_bolus", False)),
            )
        except KeyError as exc:
            raise ParseError(f"asl metadata is missing field {exc}") from exc
    if "times" not in meta:
        raise ParseError("metadata needs either 'times' or 'asl'")
    return DesignGrid(times=np.asarray(meta["times"], dtype=float))


def save_dataset(dataset: SeriesDataset, path) -> None:
    base = _base_path(path)
    meta = {"model": dataset.model_name, "units": dataset.units}
    meta.update(_design_to_json(dataset.design))
    if dataset.column_tags is not None:
        meta["column_tags"] = list(dataset.column_tags)
    if dataset.mask is not None:
        meta["mask"] = [int(v) for v in dataset.mask]
    if dataset.slice_index_per_voxel is not None:
        if "asl" not in meta:
            raise InvariantViolation("slice_index_per_voxel requires an ASL design")
        meta["asl"]["slice_index_per_voxel"] = [int(v) for v in dataset.slice_index_per_voxel]
    base.with_suffix(".json").write_text(json.dumps(meta, indent=2) + "\n")
    with open(base.with_suffix(".csv"), "w") as handle:
        for row in dataset.values:
            handle.write(",".join(repr(float(v)) for v in row) + "\n")


def load_dataset(path) -> SeriesDataset:
    base = _base_path(path)
    json_path = base.with_suffix(".json")
    csv_path = base.with_suffix(".csv")
    if not json_path.exists():
        raise ParseError(f"metadata file not found: {json_path}")
    if not csv_path.exists():
        raise ParseError(f"values file not found: {csv_path}")
    try:
        meta = json.loads(json_path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{json_path}: {exc}") from exc
    if "model" not in meta:
        raise ParseError(f"{json_path}: missing 'model' field")
    design = _design_from_json(meta)

    rows = []
    width = None
    with open(csv_path) as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = [float(v) for v in line.split(",")]
            except ValueError as exc:
                raise ParseError(f"{csv_path}:{lineno}: {exc}") from exc
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise InvariantViolation(
                    f"{csv_path}: row {lineno} has {len(row)} values, expected {width}"
                )
            rows.append(row)
    if not rows:
        raise ParseError(f"{csv_path}: no data rows")
    values = np.asarray(rows)

    tags = meta.get("column_tags")
    n_design = design.n
    expected = 2 * n_design if tags else n_design
    if values.shape[1] != expected:
        raise InvariantViolation(
            f"{csv_path}: {values.shape[1]} columns but design implies {expected}"
        )
    return SeriesDataset(
        model_name=meta["model"],
        design=design,
        values=values,
        units=meta.get("units", ""),
        column_tags=tuple(tags) if tags else None,
        mask=np.asarray(meta["mask"], dtype=bool) if "mask" in meta else None,
        slice_index_per_voxel=(
            np.asarray(meta["asl"]["slice_index_per_voxel"], dtype=int)
            if "asl" in meta and "slice_index_per_voxel" in meta["asl"]
            else None
        ),
    )


def asl_differenced(raw: SeriesDataset) -> SeriesDataset:
    """Pairwise control - label differencing of a tagged ASL dataset."""
    if raw.column_tags is None:
        raise TagMismatch("dataset has no control/label column tags")
    control_idx = [i for i, t in enumerate(raw.column_tags) if t == "control"]
    label_idx = [i for i, t in enumerate(raw.column_tags) if t == "label"]
    unknown = [t for t in raw.column_tags if t not in ("control", "label")]
    if unknown:
        raise TagMismatch(f"unknown column tags: {sorted(set(unknown))}")
    if len(control_idx) != len(label_idx):
        raise TagMismatch(
            f"{len(control_idx)} control vs {len(label_idx)} label columns"
        )
    diffed = raw.values[:, control_idx] - raw.values[:, label_idx]
    if diffed.shape[1] != raw.design.n:
        raise TagMismatch(
            f"{diffed.shape[1]} differenced columns but design has {raw.design.n} timepoints"
        )
    return replace(raw, values=diffed, column_tags=None)


def expand_asl_times(design: AslPcaslDesign, slice_index: int) -> np.ndarray:
    """Effective time vector for a voxel in the given slice."""
    if slice_index < 0:
        raise InvariantViolation("slice index must be >= 0")
    return design.label_duration + design.plds + slice_index * design.slice_time_offset
