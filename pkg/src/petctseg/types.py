"""Core domain types shared by all modules.

Axis order is (z, y, x) everywhere; file readers reorder on load. All types
are immutable after construction (arrays are marked read-only), so instances
can be shared freely across parallel workers.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

import numpy as np

from .errors import ValidationError

TRACERS = ("FDG", "PSMA")


def _freeze(values: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(values)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Grid3D:
    """Voxel lattice geometry: shape in voxels, spacing and origin in mm."""

    shape: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(s) for s in self.origin)
        if len(shape) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise ValidationError("Grid3D requires 3 entries for shape, spacing and origin")
        if any(s < 1 for s in shape):
            raise ValidationError(f"grid shape entries must be >= 1, got {shape}")
        if any(s <= 0 for s in spacing):
            raise ValidationError(f"grid spacing entries must be > 0, got {spacing}")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def voxel_volume_ml(self) -> float:
        sz, sy, sx = self.spacing
        return (sz * sy * sx) / 1000.0

    def voxel_count(self) -> int:
        nz, ny, nx = self.shape
        return nz * ny * nx


@dataclass(frozen=True)
class Volume:
    """One image channel: a dense scalar field on a Grid3D."""

    grid: Grid3D
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.shape != self.grid.shape:
            raise ValidationError(
                f"volume values shape {values.shape} does not match grid shape {self.grid.shape}"
            )
        if not np.isfinite(values).all():
            raise ValidationError("volume contains non-finite values")
        object.__setattr__(self, "values", _freeze(values))


@dataclass(frozen=True)
class LabelMask:
    """Binary lesion mask on a Grid3D."""

    grid: Grid3D
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.shape != self.grid.shape:
            raise ValidationError(
                f"mask values shape {values.shape} does not match grid shape {self.grid.shape}"
            )
        if not np.isin(values, (0, 1)).all():
            raise ValidationError("mask values must be 0 or 1")
        object.__setattr__(self, "values", _freeze(values.astype(np.uint8)))

    @property
    def foreground_count(self) -> int:
        return int(self.values.sum())


@dataclass(frozen=True)
class Study:
    """One PET/CT exam: co-registered CT and PET channels plus optional mask."""

    id: str
    tracer: str
    ct: Volume
    pet: Volume
    label: Optional[LabelMask] = None
    positive: bool = False


@dataclass(frozen=True)
class Violation:
    rule: str
    message: str

    def __str__(self) -> str:
        return f"[{self.rule}] {self.message}"


def validate_study(study: Study) -> list[Violation]:
    """Check every Study invariant; returns all violations, never raises.

    An empty list means the study is valid.
    """
    violations: list[Violation] = []
    if not study.id:
        violations.append(Violation("id", "study id must be non-empty"))
    if study.tracer not in TRACERS:
        violations.append(Violation("tracer", f"tracer {study.tracer!r} not in {TRACERS}"))
    if study.pet.grid != study.ct.grid:
        violations.append(
            Violation(
                "grid-match",
                f"PET grid {study.pet.grid.shape}/{study.pet.grid.spacing} differs from "
                f"CT grid {study.ct.grid.shape}/{study.ct.grid.spacing}",
            )
        )
    if study.label is not None and study.label.grid != study.ct.grid:
        violations.append(
            Violation(
                "grid-match",
                f"label grid {study.label.grid.shape} differs from CT grid {study.ct.grid.shape}",
            )
        )
    # positivity is derived from the label, never trusted from the manifest
    has_foreground = study.label is not None and study.label.foreground_count > 0
    if study.positive != has_foreground:
        violations.append(
            Violation(
                "positivity",
                "positive flag must equal (label present and label has >= 1 foreground voxel); "
                f"flag={study.positive}, derived={has_foreground}",
            )
        )
    return violations


@dataclass(frozen=True)
class DatasetPartition:
    """Named ordered set of study ids."""

    name: str
    study_ids: tuple[str, ...]

    def __post_init__(self):
        ids = tuple(str(s) for s in self.study_ids)
        if len(set(ids)) != len(ids):
            raise ValidationError(f"partition {self.name!r} contains duplicate ids")
        object.__setattr__(self, "study_ids", ids)

    def __len__(self) -> int:
        return len(self.study_ids)

    def __contains__(self, study_id: str) -> bool:
        return study_id in set(self.study_ids)


def check_disjoint_cover(whole: DatasetPartition, parts: Iterable[DatasetPartition]) -> None:
    """Raise unless the parts disjointly cover the whole partition."""
    union: list[str] = []
    for p in parts:
        union.extend(p.study_ids)
    if len(union) != len(set(union)):
        raise ValidationError("partitions overlap")
    if set(union) != set(whole.study_ids):
        raise ValidationError(f"partitions do not cover {whole.name!r}")


@dataclass(frozen=True)
class SampleWeightTable:
    """study_id -> integer multiplicity; multiplicity m means (m-1) extra copies."""

    multiplicities: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        table = {str(k): int(v) for k, v in self.multiplicities.items()}
        for sid, mult in table.items():
            if mult < 1:
                raise ValidationError(f"multiplicity for {sid!r} must be >= 1, got {mult}")
        object.__setattr__(self, "multiplicities", dict(table))

    def __contains__(self, study_id: str) -> bool:
        return study_id in self.multiplicities

    def __getitem__(self, study_id: str) -> int:
        return self.multiplicities[study_id]

    def ids(self) -> tuple[str, ...]:
        return tuple(self.multiplicities)

    @property
    def total(self) -> int:
        """Effective epoch sample count: sum of all multiplicities."""
        return sum(self.multiplicities.values())

    def extras_within(self, ids: Iterable[str]) -> int:
        """Number of extra copies carried by the given ids."""
        return sum(self.multiplicities[i] - 1 for i in ids if i in self.multiplicities)

    def with_ids_added(self, ids: Iterable[str]) -> "SampleWeightTable":
        table = dict(self.multiplicities)
        for sid in ids:
            table.setdefault(str(sid), 1)
        return SampleWeightTable(table)
