"""File I/O: gzip-compressed NIfTI-1 volumes, manifests, run configs, checkpoints.

Volumes use the challenge format (.nii.gz). The codec here is deliberately
minimal: axis-aligned grids only, spacing from pixdim (mm), data returned in
(z, y, x) order. Spacing is stored at float32 precision, a NIfTI-1 format
limit.

Manifests and run configs are line-oriented JSON: the first line is a schema
header, each following line one record. The schema version is checked on load.
"""
from __future__ import annotations

import gzip
import io as _stdio
import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import ConfigError, FormatError, ShapeError, ValidationError
from .types import (
    DatasetPartition,
    Grid3D,
    LabelMask,
    SampleWeightTable,
    Study,
    Volume,
    validate_study,
)

MANIFEST_SCHEMA = "petctseg/manifest"
RUNCONFIG_SCHEMA = "petctseg/runconfig"
STATS_SCHEMA = "petctseg/stats"
SCHEMA_VERSION = 1

# NIfTI-1 datatype codes
_DTYPES = {
    2: np.dtype("uint8"),
    4: np.dtype("int16"),
    8: np.dtype("int32"),
    16: np.dtype("float32"),
    64: np.dtype("float64"),
    256: np.dtype("int8"),
    512: np.dtype("uint16"),
    768: np.dtype("uint32"),
}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}
_HEADER_SIZE = 348
_VOX_OFFSET = 352  # header + 4-byte extension flag


def _read_file_bytes(path: Path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            return gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise FormatError(f"{path}: corrupt gzip stream: {exc}") from exc
    return raw


def _parse_header(buf: bytes, path: Path) -> dict[str, Any]:
    if len(buf) < _HEADER_SIZE + 4:
        raise FormatError(f"{path}: file too short for a NIfTI-1 header")
    (sizeof_hdr,) = struct.unpack("<i", buf[:4])
    if sizeof_hdr == _HEADER_SIZE:
        end = "<"
    elif struct.unpack(">i", buf[:4])[0] == _HEADER_SIZE:
        end = ">"
    else:
        raise FormatError(f"{path}: corrupt header (sizeof_hdr={sizeof_hdr})")
    magic = buf[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise FormatError(f"{path}: bad magic {magic!r}")
    if magic == b"ni1\x00":
        raise FormatError(f"{path}: two-file NIfTI pairs (.hdr/.img) are not supported")
    dim = struct.unpack(end + "8h", buf[40:56])
    (datatype, bitpix) = struct.unpack(end + "2h", buf[70:74])
    pixdim = struct.unpack(end + "8f", buf[76:108])
    (vox_offset,) = struct.unpack(end + "f", buf[108:112])
    (scl_slope, scl_inter) = struct.unpack(end + "2f", buf[112:120])
    (qform_code, sform_code) = struct.unpack(end + "2h", buf[252:256])
    qoffset = struct.unpack(end + "3f", buf[268:280])
    srow = struct.unpack(end + "12f", buf[280:328])
    return {
        "end": end,
        "dim": dim,
        "datatype": datatype,
        "bitpix": bitpix,
        "pixdim": pixdim,
        "vox_offset": int(vox_offset),
        "scl_slope": scl_slope,
        "scl_inter": scl_inter,
        "qform_code": qform_code,
        "sform_code": sform_code,
        "qoffset": qoffset,
        "srow": srow,
    }


def _grid_from_header(hdr: dict[str, Any], path: Path) -> tuple[Grid3D, tuple[int, int, int]]:
    dim = hdr["dim"]
    ndim = dim[0]
    if ndim < 3:
        raise ShapeError(f"{path}: payload is {ndim}-D, expected a 3-D volume")
    if ndim > 7:
        raise FormatError(f"{path}: corrupt header (dim[0]={ndim})")
    extra = dim[4 : 1 + ndim]
    if any(e not in (0, 1) for e in extra):
        raise ShapeError(f"{path}: payload has non-singleton extra dimensions {extra}")
    nx, ny, nz = int(dim[1]), int(dim[2]), int(dim[3])
    if min(nx, ny, nz) < 1:
        raise FormatError(f"{path}: corrupt header (dims {nx}x{ny}x{nz})")
    sx, sy, sz = (float(p) for p in hdr["pixdim"][1:4])
    if not all(np.isfinite([sx, sy, sz])) or min(sx, sy, sz) <= 0:
        raise FormatError(f"{path}: corrupt header (pixdim {sx},{sy},{sz})")
    if hdr["sform_code"] > 0:
        srow = hdr["srow"]
        origin_xyz = (float(srow[3]), float(srow[7]), float(srow[11]))
    elif hdr["qform_code"] > 0:
        origin_xyz = tuple(float(q) for q in hdr["qoffset"])
    else:
        origin_xyz = (0.0, 0.0, 0.0)
    grid = Grid3D(shape=(nz, ny, nx), spacing=(sz, sy, sx), origin=origin_xyz[::-1])
    return grid, (nz, ny, nx)


def _read_array(buf: bytes, hdr: dict[str, Any], shape_zyx: tuple[int, int, int], path: Path) -> np.ndarray:
    try:
        dtype = _DTYPES[hdr["datatype"]].newbyteorder(hdr["end"])
    except KeyError:
        raise FormatError(f"{path}: unsupported datatype code {hdr['datatype']}") from None
    nz, ny, nx = shape_zyx
    nbytes = nz * ny * nx * dtype.itemsize
    offset = max(hdr["vox_offset"], _HEADER_SIZE)
    if len(buf) < offset + nbytes:
        raise FormatError(f"{path}: truncated payload ({len(buf)} bytes, need {offset + nbytes})")
    # on-disk layout is x-fastest, so a C-ordered (z, y, x) view is direct
    arr = np.frombuffer(buf, dtype=dtype, count=nz * ny * nx, offset=offset).reshape((nz, ny, nx))
    slope, inter = hdr["scl_slope"], hdr["scl_inter"]
    if slope not in (0.0, 1.0) or inter != 0.0:
        eff_slope = slope if slope != 0.0 else 1.0
        arr = arr.astype(np.float64) * eff_slope + inter
    return arr


def load_volume(path: str | Path) -> Volume:
    """Read a gzip-compressed NIfTI-1 file as a Volume in (z, y, x) order."""
    path = Path(path)
    buf = _read_file_bytes(path)
    hdr = _parse_header(buf, path)
    grid, shape_zyx = _grid_from_header(hdr, path)
    arr = _read_array(buf, hdr, shape_zyx, path)
    return Volume(grid=grid, values=arr.astype(np.float32))


def load_mask(path: str | Path) -> LabelMask:
    """Read a mask file; values are binarized at 0.5 to tolerate float storage."""
    vol = load_volume(path)
    return LabelMask(grid=vol.grid, values=(vol.values > 0.5).astype(np.uint8))


def _build_header(grid: Grid3D, dtype: np.dtype) -> bytes:
    nz, ny, nx = grid.shape
    sz, sy, sx = grid.spacing
    oz, oy, ox = grid.origin
    hdr = bytearray(_HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, _HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, _DTYPE_CODES[np.dtype(dtype)], np.dtype(dtype).itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(_VOX_OFFSET))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)  # scl_slope, scl_inter
    hdr[123] = 2  # spatial units: mm
    struct.pack_into("<2h", hdr, 252, 1, 1)  # qform_code, sform_code
    struct.pack_into("<3f", hdr, 256, 0.0, 0.0, 0.0)  # identity quaternion
    struct.pack_into("<3f", hdr, 268, ox, oy, oz)
    struct.pack_into("<12f", hdr, 280, sx, 0, 0, ox, 0, sy, 0, oy, 0, 0, sz, oz)
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr)


def _write_nifti(path: Path, grid: Grid3D, data: np.ndarray) -> None:
    payload = _build_header(grid, data.dtype) + b"\x00\x00\x00\x00" + np.ascontiguousarray(data).tobytes()
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = _stdio.BytesIO()
    # mtime=0 keeps the compressed bytes reproducible across runs
    with gzip.GzipFile(filename="", mode="wb", fileobj=buf, mtime=0) as gz:
        gz.write(payload)
    path.write_bytes(buf.getvalue())


def save_volume(volume: Volume, path: str | Path) -> None:
    _write_nifti(Path(path), volume.grid, volume.values.astype(np.float32))


def save_mask(mask: LabelMask, path: str | Path) -> None:
    """Write a mask as uint8; round-trips through load_volume/load_mask."""
    _write_nifti(Path(path), mask.grid, mask.values.astype(np.uint8))


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    tracer: str
    ct_path: Path
    pet_path: Path
    label_path: Optional[Path] = None
    source_site: str = ""
    positive: Optional[bool] = None
    difficulty: Optional[float] = None

    @property
    def is_positive(self) -> bool:
        """Manifest-level positivity proxy; authoritative positivity comes from the label."""
        if self.positive is not None:
            return self.positive
        return self.label_path is not None


@dataclass(frozen=True)
class Manifest:
    entries: tuple[ManifestEntry, ...]

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValidationError("manifest contains duplicate study ids")

    def ids(self) -> tuple[str, ...]:
        return tuple(e.id for e in self.entries)

    def positive_ids(self) -> tuple[str, ...]:
        return tuple(e.id for e in self.entries if e.is_positive)

    def entry(self, study_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.id == study_id:
                return e
        raise KeyError(study_id)


def _read_jsonl(path: Path, schema: str) -> list[dict[str, Any]]:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines:
        raise FormatError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
        records = [json.loads(ln) for ln in lines[1:]]
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc
    if header.get("schema") != schema:
        raise FormatError(f"{path}: expected schema {schema!r}, got {header.get('schema')!r}")
    if header.get("version") != SCHEMA_VERSION:
        raise FormatError(f"{path}: unsupported schema version {header.get('version')!r}")
    return records


def _write_jsonl(path: Path, schema: str, records: Iterable[Mapping[str, Any]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps({"schema": schema, "version": SCHEMA_VERSION})]
    lines.extend(json.dumps(dict(r), sort_keys=True) for r in records)
    path.write_text("\n".join(lines) + "\n")


def load_manifest(path: str | Path) -> Manifest:
    """Load a manifest; relative volume paths resolve against the manifest directory."""
    path = Path(path)
    base = path.parent
    entries = []
    for rec in _read_jsonl(path, MANIFEST_SCHEMA):
        for key in ("id", "tracer", "ct", "pet"):
            if key not in rec:
                raise FormatError(f"{path}: manifest entry missing {key!r}: {rec}")
        ct = (base / rec["ct"]).resolve()
        pet = (base / rec["pet"]).resolve()
        label = (base / rec["label"]).resolve() if rec.get("label") else None
        for p in (ct, pet) + ((label,) if label else ()):
            if not p.exists():
                raise FormatError(f"{path}: referenced file does not exist: {p}")
        entries.append(
            ManifestEntry(
                id=str(rec["id"]),
                tracer=str(rec["tracer"]),
                ct_path=ct,
                pet_path=pet,
                label_path=label,
                source_site=str(rec.get("site", "")),
                positive=rec.get("positive"),
                difficulty=rec.get("difficulty"),
            )
        )
    return Manifest(entries=tuple(entries))


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    path = Path(path)
    base = path.parent.resolve()

    def rel(p: Optional[Path]) -> Optional[str]:
        if p is None:
            return None
        p = Path(p).resolve()
        try:
            return p.relative_to(base).as_posix()
        except ValueError:
            return str(p)

    records = []
    for e in manifest.entries:
        rec: dict[str, Any] = {
            "id": e.id,
            "tracer": e.tracer,
            "ct": rel(e.ct_path),
            "pet": rel(e.pet_path),
            "site": e.source_site,
        }
        if e.label_path is not None:
            rec["label"] = rel(e.label_path)
        if e.positive is not None:
            rec["positive"] = e.positive
        if e.difficulty is not None:
            rec["difficulty"] = e.difficulty
        records.append(rec)
    _write_jsonl(path, MANIFEST_SCHEMA, records)


# ---------------------------------------------------------------------------
# run configuration


@dataclass(frozen=True)
class RunConfig:
    """All training hyperparameters for one run; the seed is always recorded."""

    seed: int
    learning_rate: float = 2e-4
    epochs: int = 1
    patch_size: tuple[int, int, int] = (128, 256, 256)
    batch_size: int = 2
    augmentation: str = "Type1"
    network: dict = field(default_factory=dict)
    boost_rounds: tuple = ()
    normalization: str = "corpus"
    overlap: float = 0.5
    connectivity: int = 18
    checkpoint_every: int = 0
    partition_sizes: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.overlap < 1.0:
            raise ConfigError(f"overlap must be in [0, 1), got {self.overlap}")
        if self.connectivity not in (6, 18, 26):
            raise ConfigError(f"connectivity must be 6, 18 or 26, got {self.connectivity}")
        if self.normalization not in ("corpus", "per_case"):
            raise ConfigError(f"normalization must be 'corpus' or 'per_case', got {self.normalization!r}")
        if len(self.patch_size) != 3 or any(int(p) < 1 for p in self.patch_size):
            raise ConfigError(f"patch size must be 3 positive ints, got {self.patch_size}")
        object.__setattr__(self, "seed", int(self.seed))
        object.__setattr__(self, "patch_size", tuple(int(p) for p in self.patch_size))
        object.__setattr__(self, "boost_rounds", tuple(dict(r) for r in self.boost_rounds))
        object.__setattr__(self, "network", dict(self.network))
        object.__setattr__(self, "partition_sizes", {str(k): int(v) for k, v in self.partition_sizes.items()})
        object.__setattr__(self, "paths", dict(self.paths))

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["patch_size"] = list(self.patch_size)
        d["boost_rounds"] = [dict(r) for r in self.boost_rounds]
        return d


def load_run_config(path: str | Path) -> RunConfig:
    records = _read_jsonl(Path(path), RUNCONFIG_SCHEMA)
    if len(records) != 1:
        raise FormatError(f"{path}: run config must contain exactly one record")
    rec = dict(records[0])
    if "seed" not in rec:
        raise ConfigError(f"{path}: run config must record a seed")
    known = set(RunConfig.__dataclass_fields__)
    unknown = set(rec) - known
    if unknown:
        raise ConfigError(f"{path}: unknown run config fields {sorted(unknown)}")
    return RunConfig(**rec)


def save_run_config(config: RunConfig, path: str | Path) -> None:
    _write_jsonl(Path(path), RUNCONFIG_SCHEMA, [config.to_dict()])


# ---------------------------------------------------------------------------
# dataset splitting


def split_dataset(
    manifest: Manifest, seed: int, sizes: Mapping[str, int]
) -> dict[str, DatasetPartition]:
    """Randomly split the manifest's positive studies into named partitions.

    Deterministic for a fixed seed; partitions are disjoint and cover all
    positives. Sizes must sum to the positive count.
    """
    positives = list(manifest.positive_ids())
    total = sum(int(n) for n in sizes.values())
    if total != len(positives):
        raise ConfigError(
            f"partition sizes sum to {total} but manifest has {len(positives)} positive studies"
        )
    if any(int(n) < 0 for n in sizes.values()):
        raise ConfigError("partition sizes must be non-negative")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(positives))
    shuffled = [positives[i] for i in order]
    out: dict[str, DatasetPartition] = {}
    start = 0
    for name, n in sizes.items():
        out[name] = DatasetPartition(name=name, study_ids=tuple(shuffled[start : start + int(n)]))
        start += int(n)
    return out


# ---------------------------------------------------------------------------
# study loading


class Corpus:
    """Lazy Study loader over a manifest, with an in-memory cache.

    Loading is read-only and safe to parallelize per file; this class itself
    is intended for one driver at a time.
    """

    def __init__(self, manifest: Manifest, cache: bool = True):
        self.manifest = manifest
        self._cache: dict[str, Study] = {}
        self._use_cache = cache

    def ids(self) -> tuple[str, ...]:
        return self.manifest.ids()

    def get(self, study_id: str) -> Study:
        if study_id in self._cache:
            return self._cache[study_id]
        entry = self.manifest.entry(study_id)
        ct = load_volume(entry.ct_path)
        pet = load_volume(entry.pet_path)
        label = load_mask(entry.label_path) if entry.label_path else None
        positive = label is not None and label.foreground_count > 0
        study = Study(id=entry.id, tracer=entry.tracer, ct=ct, pet=pet, label=label, positive=positive)
        violations = validate_study(study)
        if violations:
            raise ValidationError(f"study {study_id!r}: " + "; ".join(str(v) for v in violations))
        if self._use_cache:
            self._cache[study_id] = study
        return study

    def studies(self, ids: Optional[Sequence[str]] = None) -> list[Study]:
        return [self.get(i) for i in (ids if ids is not None else self.ids())]


# ---------------------------------------------------------------------------
# checkpoints


@dataclass(frozen=True)
class Checkpoint:
    """Everything needed to resume a boosting round chain."""

    weights: dict
    network: dict
    run_config: Optional[dict]
    weight_table: SampleWeightTable
    round_index: int
    per_sample_dice: dict
    lineage: tuple[str, ...]


def save_checkpoint(
    path: str | Path,
    *,
    weights: dict,
    network: dict,
    weight_table: SampleWeightTable,
    round_index: int,
    per_sample_dice: Mapping[str, float],
    lineage: Sequence[str],
    run_config: Optional[RunConfig] = None,
) -> None:
    import torch

    payload = {
        "schema": "petctseg/checkpoint",
        "version": SCHEMA_VERSION,
        "weights": weights,
        "network": dict(network),
        "run_config": run_config.to_dict() if run_config is not None else None,
        "weight_table": dict(weight_table.multiplicities),
        "round_index": int(round_index),
        "per_sample_dice": {str(k): float(v) for k, v in per_sample_dice.items()},
        "lineage": list(lineage),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    import torch

    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    if payload.get("schema") != "petctseg/checkpoint":
        raise FormatError(f"{path}: not a petctseg checkpoint")
    return Checkpoint(
        weights=payload["weights"],
        network=payload["network"],
        run_config=payload.get("run_config"),
        weight_table=SampleWeightTable(payload["weight_table"]),
        round_index=int(payload["round_index"]),
        per_sample_dice=payload["per_sample_dice"],
        lineage=tuple(payload["lineage"]),
    )
