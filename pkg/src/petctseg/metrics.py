"""Foreground Dice, false-positive volume and false-negative volume.

FPvol sums the physical volume (mL) of predicted connected components that
have zero overlap with the reference mask; FNvol is the mirror image for
reference components missed entirely by the prediction. Connectivity for the
component analysis defaults to 18 and is recorded in every report.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import GeometryError
from .types import Grid3D, LabelMask

CONNECTIVITY_STRUCTS = {
    6: ndimage.generate_binary_structure(3, 1),
    18: ndimage.generate_binary_structure(3, 2),
    26: ndimage.generate_binary_structure(3, 3),
}


def _require_same_grid(pred: LabelMask, gt: LabelMask) -> None:
    if pred.grid != gt.grid:
        raise GeometryError(
            f"prediction grid {pred.grid.shape}/{pred.grid.spacing} differs from "
            f"reference grid {gt.grid.shape}/{gt.grid.spacing}"
        )


def dice(pred: LabelMask, gt: LabelMask) -> float:
    """2|P∩G| / (|P|+|G|); 1.0 when both masks are empty."""
    _require_same_grid(pred, gt)
    p = pred.values.astype(bool)
    g = gt.values.astype(bool)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def connected_components(mask: LabelMask, connectivity: int = 18) -> tuple[np.ndarray, list[int]]:
    """Label a binary mask; labels are ordered by first-voxel scan order.

    Returns (labeled volume with 0 = background, component sizes where
    sizes[k-1] is the voxel count of label k).
    """
    if connectivity not in CONNECTIVITY_STRUCTS:
        raise ValueError(f"connectivity must be one of {sorted(CONNECTIVITY_STRUCTS)}, got {connectivity}")
    raw, n = ndimage.label(mask.values, structure=CONNECTIVITY_STRUCTS[connectivity])
    if n == 0:
        return raw.astype(np.int32), []
    # relabel deterministically: order components by first occurrence in scan order
    flat = raw.ravel()
    first_seen = np.full(n + 1, flat.size, dtype=np.int64)
    nonzero = np.flatnonzero(flat)
    # reversed iteration keeps the earliest index per label
    for idx in nonzero[::-1]:
        first_seen[flat[idx]] = idx
    order = np.argsort(first_seen[1:], kind="stable")
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[1:][order] = np.arange(1, n + 1, dtype=np.int32)
    labeled = remap[raw]
    sizes = np.bincount(labeled.ravel(), minlength=n + 1)[1:]
    return labeled, [int(s) for s in sizes]


def _unmatched_component_volume(
    source: LabelMask, other: LabelMask, grid: Grid3D, connectivity: int
) -> float:
    labeled, sizes = connected_components(source, connectivity)
    if not sizes:
        return 0.0
    other_fg = other.values.astype(bool)
    overlaps = ndimage.sum_labels(other_fg, labels=labeled, index=np.arange(1, len(sizes) + 1))
    missed_voxels = sum(size for size, ov in zip(sizes, overlaps) if ov == 0)
    return missed_voxels * grid.voxel_volume_ml


def false_positive_volume(pred: LabelMask, gt: LabelMask, connectivity: int = 18) -> float:
    """Total volume (mL) of predicted components with zero reference overlap."""
    _require_same_grid(pred, gt)
    return _unmatched_component_volume(pred, gt, pred.grid, connectivity)


def false_negative_volume(pred: LabelMask, gt: LabelMask, connectivity: int = 18) -> float:
    """Total volume (mL) of reference components the prediction misses entirely."""
    _require_same_grid(pred, gt)
    return _unmatched_component_volume(gt, pred, gt.grid, connectivity)


@dataclass(frozen=True)
class StudyMetrics:
    id: str
    dice: float
    fpvol_ml: float
    fnvol_ml: float


@dataclass(frozen=True)
class MetricsReport:
    rows: tuple[StudyMetrics, ...]
    mean_dice: float
    mean_fpvol_ml: float
    mean_fnvol_ml: float
    connectivity: int
    voxel_volumes_ml: tuple[float, ...]
    # units follow the challenge convention; both-empty pairs score dice 1.0, volumes 0
    notes: str = "volumes in mL from native grid spacing; both-empty dice = 1.0"


def evaluate_pair(
    study_id: str, pred: LabelMask, gt: LabelMask, connectivity: int = 18
) -> StudyMetrics:
    return StudyMetrics(
        id=study_id,
        dice=dice(pred, gt),
        fpvol_ml=false_positive_volume(pred, gt, connectivity),
        fnvol_ml=false_negative_volume(pred, gt, connectivity),
    )


def aggregate(
    rows: Sequence[StudyMetrics],
    connectivity: int = 18,
    voxel_volumes_ml: Sequence[float] = (),
) -> MetricsReport:
    """Unweighted means across studies, in (Dice, FPvol, FNvol) column order."""
    if not rows:
        raise ValueError("aggregate requires at least one row")
    return MetricsReport(
        rows=tuple(rows),
        mean_dice=float(np.mean([r.dice for r in rows])),
        mean_fpvol_ml=float(np.mean([r.fpvol_ml for r in rows])),
        mean_fnvol_ml=float(np.mean([r.fnvol_ml for r in rows])),
        connectivity=connectivity,
        voxel_volumes_ml=tuple(voxel_volumes_ml),
    )


def write_report_csv(report: MetricsReport, path: str | Path) -> None:
    """CSV columns id, dice, fpvol_ml, fnvol_ml; the final line is the aggregate."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "dice", "fpvol_ml", "fnvol_ml"])
        for row in report.rows:
            writer.writerow([row.id, f"{row.dice:.6f}", f"{row.fpvol_ml:.6f}", f"{row.fnvol_ml:.6f}"])
        writer.writerow(
            [
                "aggregate",
                f"{report.mean_dice:.6f}",
                f"{report.mean_fpvol_ml:.6f}",
                f"{report.mean_fnvol_ml:.6f}",
            ]
        )


def write_report_metadata(report: MetricsReport, path: str | Path) -> None:
    import json

    meta = {
        "connectivity": report.connectivity,
        "voxel_volumes_ml": list(report.voxel_volumes_ml),
        "notes": report.notes,
        "n_studies": len(report.rows),
    }
    Path(path).write_text(json.dumps(meta, indent=2) + "\n")
