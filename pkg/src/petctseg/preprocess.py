"""Corpus-level foreground intensity statistics and per-case normalization.

Statistics are computed once over the training corpus (foreground voxels
only, pooled across studies), serialized, and reused at inference. They are
never recomputed from test data. A per-case mode exists as an experimental
switch; the corpus mode is the default and the one the pipeline uses.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import map_coordinates

from . import io as pio
from .errors import DegenerateCorpusError, EmptyForegroundError, FormatError, GeometryError
from .types import Grid3D, LabelMask, Study, Volume

CHANNELS = ("ct", "pet")


@dataclass(frozen=True)
class ChannelStats:
    """Foreground mean/std and clipping percentiles for one channel."""

    mean: float
    std: float
    p_low: float
    p_high: float

    def __post_init__(self):
        if self.std <= 0:
            raise DegenerateCorpusError(f"channel std must be > 0, got {self.std}")
        if self.p_low > self.p_high:
            raise DegenerateCorpusError(f"p_low {self.p_low} exceeds p_high {self.p_high}")


@dataclass(frozen=True)
class NormalizationStats:
    ct: ChannelStats
    pet: ChannelStats

    def channel(self, name: str) -> ChannelStats:
        if name not in CHANNELS:
            raise KeyError(name)
        return getattr(self, name)


def _pooled_channel_stats(values: np.ndarray, channel: str) -> ChannelStats:
    if values.size == 0:
        raise EmptyForegroundError(f"no foreground voxels for channel {channel!r}")
    # sorting first makes the result bitwise independent of study order, so
    # parallel per-study merges cannot change the outcome
    values = np.sort(values.astype(np.float64))
    mean = float(values.mean())
    std = float(values.std())  # population std: a corpus-level statistic
    if std == 0.0:
        raise DegenerateCorpusError(
            f"all foreground values equal for channel {channel!r}; corpus is degenerate"
        )
    p_low, p_high = np.percentile(values, [0.5, 99.5], method="linear")
    return ChannelStats(mean=mean, std=std, p_low=float(p_low), p_high=float(p_high))


def compute_foreground_stats(studies: Sequence[Study]) -> NormalizationStats:
    """Pool voxel values at label==1 across all studies, per channel.

    Percentiles use linear interpolation between order statistics; std is the
    population standard deviation. Background voxels never contribute.
    """
    ct_parts: list[np.ndarray] = []
    pet_parts: list[np.ndarray] = []
    for study in studies:
        if study.label is None:
            raise EmptyForegroundError(f"study {study.id!r} has no label; stats need foreground")
        fg = study.label.values.astype(bool)
        if fg.any():
            ct_parts.append(study.ct.values[fg])
            pet_parts.append(study.pet.values[fg])
    if not ct_parts:
        raise EmptyForegroundError("no foreground voxels anywhere in the corpus")
    return NormalizationStats(
        ct=_pooled_channel_stats(np.concatenate(ct_parts), "ct"),
        pet=_pooled_channel_stats(np.concatenate(pet_parts), "pet"),
    )


def normalize_volume(volume: Volume, channel_stats: ChannelStats) -> Volume:
    """Clip to [p_low, p_high], subtract the mean, divide by the std.

    Not idempotent: applying the same stats twice re-clips and re-centers
    already-normalized values. Normalize exactly once per volume.
    """
    clipped = np.clip(volume.values, channel_stats.p_low, channel_stats.p_high)
    out = (clipped - channel_stats.mean) / channel_stats.std
    return Volume(grid=volume.grid, values=out.astype(np.float32))


def normalize_study(study: Study, stats: NormalizationStats) -> Study:
    """Apply per-channel normalization to both channels of a study."""
    return Study(
        id=study.id,
        tracer=study.tracer,
        ct=normalize_volume(study.ct, stats.ct),
        pet=normalize_volume(study.pet, stats.pet),
        label=study.label,
        positive=study.positive,
    )


def per_case_stats(study: Study) -> NormalizationStats:
    """Experimental alternative: statistics from a single study's own foreground."""
    return compute_foreground_stats([study])


# ---------------------------------------------------------------------------
# resampling


def _check_overlap(source: Grid3D, target: Grid3D) -> None:
    for axis in range(3):
        s_lo = source.origin[axis]
        s_hi = source.origin[axis] + (source.shape[axis] - 1) * source.spacing[axis]
        t_lo = target.origin[axis]
        t_hi = target.origin[axis] + (target.shape[axis] - 1) * target.spacing[axis]
        if t_hi < s_lo or t_lo > s_hi:
            raise GeometryError(
                f"axis {axis}: target extent [{t_lo}, {t_hi}] mm does not overlap "
                f"source extent [{s_lo}, {s_hi}] mm"
            )


def _source_coordinates(source: Grid3D, target: Grid3D) -> np.ndarray:
    axes = []
    for axis in range(3):
        positions = target.origin[axis] + np.arange(target.shape[axis]) * target.spacing[axis]
        axes.append((positions - source.origin[axis]) / source.spacing[axis])
    zz, yy, xx = np.meshgrid(*axes, indexing="ij")
    return np.stack([zz, yy, xx])


def resample_to_grid(item: Volume | LabelMask, target: Grid3D, kind: str = None) -> Volume | LabelMask:
    """Resample onto a target grid: trilinear for images, nearest for masks.

    The kind is inferred from the input type when not given; passing an
    explicit kind ('image' or 'mask') overrides it.
    """
    if kind is None:
        kind = "mask" if isinstance(item, LabelMask) else "image"
    if kind not in ("image", "mask"):
        raise ValueError(f"kind must be 'image' or 'mask', got {kind!r}")
    _check_overlap(item.grid, target)
    if item.grid == target:
        return item
    coords = _source_coordinates(item.grid, target)
    order = 1 if kind == "image" else 0
    out = map_coordinates(item.values.astype(np.float64), coords, order=order, mode="nearest")
    if kind == "mask":
        return LabelMask(grid=target, values=(out > 0.5).astype(np.uint8))
    return Volume(grid=target, values=out.astype(np.float32))


# ---------------------------------------------------------------------------
# stats serialization


def save_stats(stats: NormalizationStats, path: str | Path) -> None:
    records = []
    for name in CHANNELS:
        ch = stats.channel(name)
        records.append(
            {"channel": name, "mean": ch.mean, "std": ch.std, "p_low": ch.p_low, "p_high": ch.p_high}
        )
    pio._write_jsonl(Path(path), pio.STATS_SCHEMA, records)


def load_stats(path: str | Path) -> NormalizationStats:
    records = pio._read_jsonl(Path(path), pio.STATS_SCHEMA)
    by_channel = {}
    for rec in records:
        by_channel[rec["channel"]] = ChannelStats(
            mean=float(rec["mean"]),
            std=float(rec["std"]),
            p_low=float(rec["p_low"]),
            p_high=float(rec["p_high"]),
        )
    missing = set(CHANNELS) - set(by_channel)
    if missing:
        raise FormatError(f"{path}: stats file missing channels {sorted(missing)}")
    return NormalizationStats(ct=by_channel["ct"], pet=by_channel["pet"])
