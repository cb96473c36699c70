"""Qualitative overlays: PET slices or projections with mask contours.

Ground truth renders in green, predictions in yellow. When a mask is
available the axial slice shown is the one with the largest ground-truth
(else predicted) foreground area, and a zoom panel is drawn around the
largest lesion component; without any lesion the zoom is skipped and noted
in the output manifest.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .errors import GeometryError
from .metrics import connected_components
from .types import LabelMask, Study

GT_COLOR = "lime"
PRED_COLOR = "yellow"


def _check_alignment(study: Study, gt: Optional[LabelMask], pred: Optional[LabelMask]) -> None:
    for mask, name in ((gt, "ground truth"), (pred, "prediction")):
        if mask is not None and mask.grid != study.pet.grid:
            raise GeometryError(f"{name} grid does not match the study grid")


def best_slice_index(mask_values: np.ndarray, axis: int = 0) -> int:
    """Index of the slice with the largest foreground area along the axis."""
    other = tuple(i for i in range(3) if i != axis)
    areas = mask_values.sum(axis=other)
    return int(np.argmax(areas))


def _pick_slice(gt: Optional[LabelMask], pred: Optional[LabelMask], shape, axis: int) -> int:
    if gt is not None and gt.foreground_count > 0:
        return best_slice_index(gt.values, axis)
    if pred is not None and pred.foreground_count > 0:
        return best_slice_index(pred.values, axis)
    return shape[axis] // 2


def _take_plane(values: np.ndarray, axis: int, index: int) -> np.ndarray:
    return np.take(values, index, axis=axis)


def _render_panel(ax, pet_plane: np.ndarray, gt_plane, pred_plane, title: str) -> None:
    vmax = np.percentile(pet_plane, 99.5) if pet_plane.size else 1.0
    ax.imshow(pet_plane, cmap="gray_r", vmax=max(vmax, 1e-6), interpolation="nearest")
    if gt_plane is not None and gt_plane.any():
        ax.contour(gt_plane, levels=[0.5], colors=GT_COLOR, linewidths=1.2)
    if pred_plane is not None and pred_plane.any():
        ax.contour(pred_plane, levels=[0.5], colors=PRED_COLOR, linewidths=1.2)
    ax.set_title(title, fontsize=8)
    ax.axis("off")


def _largest_component_bbox(mask: LabelMask) -> Optional[tuple[slice, slice, slice]]:
    labeled, sizes = connected_components(mask, connectivity=18)
    if not sizes:
        return None
    biggest = int(np.argmax(sizes)) + 1
    coords = np.argwhere(labeled == biggest)
    lo = coords.min(axis=0)
    hi = coords.max(axis=0) + 1
    margin = 4
    return tuple(
        slice(max(0, int(l) - margin), min(n, int(h) + margin))
        for l, h, n in zip(lo, hi, mask.grid.shape)
    )


def render_overlay(
    study: Study,
    gt: Optional[LabelMask],
    pred: Optional[LabelMask],
    out_dir: str | Path,
    mode: str = "slice",
) -> dict:
    """Write overlay PNGs; returns (and writes) a manifest of emitted files."""
    if mode not in ("slice", "mip"):
        raise ValueError(f"mode must be 'slice' or 'mip', got {mode!r}")
    _check_alignment(study, gt, pred)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pet = study.pet.values
    gt_vals = gt.values if gt is not None else None
    pred_vals = pred.values if pred is not None else None

    files: list[str] = []
    notes: list[str] = []
    manifest: dict = {"study_id": study.id, "mode": mode, "files": files, "notes": notes}

    views = []
    for axis, view in ((0, "axial"), (1, "coronal")):
        if mode == "mip":
            pet_plane = pet.max(axis=axis)
            gt_plane = gt_vals.max(axis=axis) if gt_vals is not None else None
            pred_plane = pred_vals.max(axis=axis) if pred_vals is not None else None
            title = f"{study.id} {view} MIP"
            index = None
        else:
            index = _pick_slice(gt, pred, pet.shape, axis)
            pet_plane = _take_plane(pet, axis, index)
            gt_plane = _take_plane(gt_vals, axis, index) if gt_vals is not None else None
            pred_plane = _take_plane(pred_vals, axis, index) if pred_vals is not None else None
            title = f"{study.id} {view} slice {index}"
        views.append((view, index, pet_plane, gt_plane, pred_plane, title))

    for view, index, pet_plane, gt_plane, pred_plane, title in views:
        fig, ax = plt.subplots(figsize=(4, 4), dpi=120)
        _render_panel(ax, pet_plane, gt_plane, pred_plane, title)
        name = f"{study.id}_{mode}_{view}.png"
        fig.savefig(out_dir / name, bbox_inches="tight")
        plt.close(fig)
        files.append(name)
        if index is not None:
            manifest[f"{view}_slice_index"] = index

    zoom_source = gt if (gt is not None and gt.foreground_count > 0) else pred
    if zoom_source is not None and zoom_source.foreground_count > 0:
        bbox = _largest_component_bbox(zoom_source)
        zoom_axis_index = best_slice_index(zoom_source.values[bbox]) + bbox[0].start
        pet_zoom = pet[bbox][zoom_axis_index - bbox[0].start]
        gt_zoom = gt_vals[bbox][zoom_axis_index - bbox[0].start] if gt_vals is not None else None
        pred_zoom = pred_vals[bbox][zoom_axis_index - bbox[0].start] if pred_vals is not None else None
        fig, ax = plt.subplots(figsize=(4, 4), dpi=120)
        _render_panel(ax, pet_zoom, gt_zoom, pred_zoom, f"{study.id} zoom (largest lesion)")
        name = f"{study.id}_{mode}_zoom.png"
        fig.savefig(out_dir / name, bbox_inches="tight")
        plt.close(fig)
        files.append(name)
    else:
        notes.append("no lesion component: zoom panels skipped")

    (out_dir / f"{study.id}_{mode}_overlay.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest
