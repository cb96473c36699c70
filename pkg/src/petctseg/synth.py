"""Deterministic synthetic PET/CT lesion phantoms for desk-scale runs.

A phantom study has a body-like CT (air and soft-tissue plateaus plus a
denser core, with smoothed noise) and a PET channel with flat physiological
background uptake, tracer-specific pseudo-organ hotspots (three for FDG,
four for PSMA) and Gaussian lesion blobs. Difficulty acts purely on lesion
contrast: peak amplitude scales with (1 - 0.7 * difficulty), so harder
studies have dimmer lesions while the ground-truth mask stays identical.

RNG draw order is independent of difficulty, so two studies generated from
the same seed at different difficulties differ only in lesion amplitude.
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from . import io as pio
from .errors import GenerationError
from .types import Grid3D, LabelMask, Study, Volume

CT_AIR = -1000.0
CT_TISSUE = 40.0
CT_CORE = 120.0
CT_NOISE_STD = 8.0
PET_BACKGROUND = 0.5
PET_NOISE_STD = 0.005
HOTSPOT_AMPLITUDE = 4.0
HOTSPOT_SIGMA_FRAC = 0.07  # of the smallest axis
HOTSPOT_CLEARANCE = 3.6    # lesions stay this many hotspot sigmas away
LESION_AMPLITUDE = 8.0
LESION_MASK_LEVEL = 0.5  # mask where a blob exceeds this fraction of its own peak

# fixed pseudo-organ hotspot centers as shape fractions (z, y, x)
HOTSPOTS = {
    "FDG": ((0.14, 0.50, 0.50), (0.42, 0.44, 0.38), (0.68, 0.56, 0.36)),
    "PSMA": ((0.40, 0.46, 0.62), (0.56, 0.50, 0.34), (0.56, 0.50, 0.66), (0.34, 0.56, 0.42)),
}


def _body_mask(shape: tuple[int, int, int]) -> tuple[np.ndarray, np.ndarray]:
    zz, yy, xx = np.meshgrid(*(np.arange(n) for n in shape), indexing="ij")
    center = [(n - 1) / 2.0 for n in shape]
    semi = (0.45 * shape[0], 0.42 * shape[1], 0.42 * shape[2])
    r2 = (
        ((zz - center[0]) / semi[0]) ** 2
        + ((yy - center[1]) / semi[1]) ** 2
        + ((xx - center[2]) / semi[2]) ** 2
    )
    return r2 <= 1.0, r2


def _gaussian_blob(shape: tuple[int, int, int], center: Sequence[float], sigma: float) -> np.ndarray:
    zz, yy, xx = np.meshgrid(*(np.arange(n) for n in shape), indexing="ij")
    r2 = (zz - center[0]) ** 2 + (yy - center[1]) ** 2 + (xx - center[2]) ** 2
    return np.exp(-0.5 * r2 / (sigma * sigma))


def generate_study(
    seed: int,
    shape: tuple[int, int, int] = (32, 32, 32),
    spacing: tuple[float, float, float] = (3.0, 2.0, 2.0),
    n_lesions: int = 2,
    tracer: str = "FDG",
    difficulty: float = 0.3,
    study_id: str | None = None,
) -> Study:
    """Generate one phantom study; fully deterministic per seed."""
    shape = tuple(int(s) for s in shape)
    if any(s < 16 for s in shape):
        raise GenerationError(f"shape must be at least 16 per axis, got {shape}")
    if n_lesions < 0:
        raise GenerationError(f"n_lesions must be >= 0, got {n_lesions}")
    if tracer not in HOTSPOTS:
        raise GenerationError(f"tracer must be one of {tuple(HOTSPOTS)}, got {tracer!r}")
    if not 0.0 <= difficulty <= 1.0:
        raise GenerationError(f"difficulty must be in [0, 1], got {difficulty}")

    rng = np.random.default_rng(np.random.SeedSequence([0x5EED, int(seed)]))
    grid = Grid3D(shape=shape, spacing=spacing)
    body, body_r2 = _body_mask(shape)
    core = body_r2 <= 0.25

    # noise fields first: their draws must not depend on lesion parameters
    ct_noise = gaussian_filter(rng.normal(0.0, CT_NOISE_STD, size=shape), sigma=1.0)
    pet_noise = rng.normal(0.0, PET_NOISE_STD, size=shape)

    ct = np.full(shape, CT_AIR, dtype=np.float64)
    ct[body] = CT_TISSUE
    ct[core] = CT_CORE
    ct += ct_noise

    pet = np.zeros(shape, dtype=np.float64)
    pet[body] = PET_BACKGROUND
    hotspot_sigma = HOTSPOT_SIGMA_FRAC * min(shape)
    hotspot_centers = []
    for frac in HOTSPOTS[tracer]:
        center = tuple(f * (n - 1) for f, n in zip(frac, shape))
        hotspot_centers.append(center)
        pet += HOTSPOT_AMPLITUDE * _gaussian_blob(shape, center, hotspot_sigma)
    pet += pet_noise

    # lesion placement: inside the body, clear of hotspots and other lesions
    sigma_max = max(1.6, min(shape) / 16.0)
    amplitude = LESION_AMPLITUDE * (1.0 - 0.7 * difficulty)
    mask = np.zeros(shape, dtype=np.uint8)
    placed: list[tuple[tuple[int, int, int], float]] = []
    for _ in range(n_lesions):
        sigma = float(rng.uniform(1.25, sigma_max))
        radius = sigma * np.sqrt(-2.0 * np.log(LESION_MASK_LEVEL))
        ok = False
        for _attempt in range(500):
            center = tuple(
                int(rng.integers(int(np.ceil(radius)) + 1, n - int(np.ceil(radius)) - 1))
                for n in shape
            )
            if not body[center]:
                continue
            # stay clear of hotspot tails so lesion contrast is a clean function of difficulty
            if any(
                np.sqrt(sum((c - h) ** 2 for c, h in zip(center, hc))) < HOTSPOT_CLEARANCE * hotspot_sigma
                for hc in hotspot_centers
            ):
                continue
            if any(
                np.sqrt(sum((c - p) ** 2 for c, p in zip(center, pc))) < radius + pr + 3.0
                for pc, pr in placed
            ):
                continue
            ok = True
            break
        if not ok:
            raise GenerationError(
                f"could not place lesion {len(placed) + 1} of {n_lesions} in shape {shape}"
            )
        blob = _gaussian_blob(shape, center, sigma)
        pet += amplitude * blob
        mask |= (blob >= LESION_MASK_LEVEL).astype(np.uint8)
        placed.append((center, radius))

    label = LabelMask(grid=grid, values=mask)
    return Study(
        id=study_id or f"synth{seed:06d}",
        tracer=tracer,
        ct=Volume(grid=grid, values=ct.astype(np.float32)),
        pet=Volume(grid=grid, values=pet.astype(np.float32)),
        label=label,
        positive=label.foreground_count > 0,
    )


def lesion_peak_contrast(study: Study) -> float:
    """Peak lesion uptake above the body's physiological background level."""
    if study.label is None or study.label.foreground_count == 0:
        raise ValueError(f"study {study.id!r} has no lesion to measure")
    pet = study.pet.values
    body = study.ct.values > -500.0
    fg = study.label.values.astype(bool)
    background = float(np.median(pet[body & ~fg]))
    return float(pet[fg].max()) - background


def draw_difficulties(rng: np.random.Generator, n: int, distribution: str) -> np.ndarray:
    """Sample per-study difficulties from a named distribution."""
    if distribution == "uniform":
        return rng.uniform(0.1, 0.9, size=n)
    if distribution == "bimodal":
        hard = rng.random(n) < 0.25
        low = np.clip(rng.normal(0.15, 0.05, size=n), 0.0, 0.3)
        high = np.clip(rng.normal(0.85, 0.05, size=n), 0.7, 1.0)
        return np.where(hard, high, low)
    raise GenerationError(f"unknown difficulty distribution {distribution!r}")


def generate_corpus(
    out_dir: str | Path,
    seed: int,
    n_studies: int,
    shape: tuple[int, int, int] = (32, 32, 32),
    spacing: tuple[float, float, float] = (3.0, 2.0, 2.0),
    difficulties: str | Sequence[float] = "uniform",
    n_lesions_range: tuple[int, int] = (1, 3),
) -> pio.Manifest:
    """Write a complete challenge-format corpus directory plus manifest.

    Per-study difficulty is recorded in the manifest so experiments can use
    high-difficulty studies as the known-hard subset.
    """
    if n_studies < 1:
        raise GenerationError(f"n_studies must be >= 1, got {n_studies}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus_rng = np.random.default_rng(np.random.SeedSequence([0xC0, int(seed)]))
    if isinstance(difficulties, str):
        difficulty_values = draw_difficulties(corpus_rng, n_studies, difficulties)
    else:
        difficulty_values = np.asarray(list(difficulties), dtype=float)
        if difficulty_values.shape != (n_studies,):
            raise GenerationError(
                f"got {difficulty_values.size} difficulties for {n_studies} studies"
            )
    lesion_counts = corpus_rng.integers(n_lesions_range[0], n_lesions_range[1] + 1, size=n_studies)

    entries = []
    for i in range(n_studies):
        study_id = f"synth{i:04d}"
        tracer = "FDG" if i % 2 == 0 else "PSMA"
        study = generate_study(
            seed=int(seed) * 100_003 + i,
            shape=shape,
            spacing=spacing,
            n_lesions=int(lesion_counts[i]),
            tracer=tracer,
            difficulty=float(difficulty_values[i]),
            study_id=study_id,
        )
        ct_path = out_dir / f"{study_id}_ct.nii.gz"
        pet_path = out_dir / f"{study_id}_pet.nii.gz"
        label_path = out_dir / f"{study_id}_label.nii.gz"
        pio.save_volume(study.ct, ct_path)
        pio.save_volume(study.pet, pet_path)
        pio.save_mask(study.label, label_path)
        entries.append(
            pio.ManifestEntry(
                id=study_id,
                tracer=tracer,
                ct_path=ct_path,
                pet_path=pet_path,
                label_path=label_path,
                source_site="SYNTH",
                positive=study.positive,
                difficulty=float(difficulty_values[i]),
            )
        )
    manifest = pio.Manifest(entries=tuple(entries))
    pio.save_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest
