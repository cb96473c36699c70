"""Whole-volume prediction by sliding-window patch aggregation.

Tiles are blended with a Gaussian importance window (sigma = patch/8 per
axis); volume edges are handled by reflect padding and cropping back. No
post-processing follows the blended argmax: the returned mask is exactly the
thresholded probability map.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import torch

from .errors import GeometryError
from .types import LabelMask, Study, Volume


def gaussian_window(patch: Sequence[int]) -> np.ndarray:
    """Separable Gaussian importance weights, peak 1 at the patch center."""
    axes = []
    for p in patch:
        center = (p - 1) / 2.0
        sigma = p / 8.0
        i = np.arange(p)
        axes.append(np.exp(-0.5 * ((i - center) / sigma) ** 2))
    w = axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
    return w.astype(np.float64)


def tile_origins(size: int, patch: int, stride: int) -> list[int]:
    """Origins covering [0, size) with the last tile flush to the end."""
    if patch >= size:
        return [0]
    origins = list(range(0, size - patch + 1, stride))
    if origins[-1] != size - patch:
        origins.append(size - patch)
    return origins


def _padding(shape: Sequence[int], patch: Sequence[int]) -> list[tuple[int, int]]:
    pads = []
    for n, p in zip(shape, patch):
        total = max(0, p - n)
        left = total // 2
        right = total - left
        if max(left, right) > n - 1:
            raise GeometryError(
                f"patch {tuple(patch)} larger than the reflect-padded volume allows for shape {tuple(shape)}"
            )
        pads.append((left, right))
    return pads


def _foreground_probability(state, image: np.ndarray, patch: tuple[int, ...], overlap: float) -> np.ndarray:
    if not 0.0 <= overlap < 1.0:
        raise GeometryError(f"overlap must be in [0, 1), got {overlap}")
    pads = _padding(image.shape[1:], patch)
    padded = np.pad(image, [(0, 0)] + pads, mode="reflect")
    shape = padded.shape[1:]
    strides = [max(1, int(round(p * (1.0 - overlap)))) for p in patch]
    origins = [tile_origins(s, p, st) for s, p, st in zip(shape, patch, strides)]

    window = gaussian_window(patch)
    accum = np.zeros(shape, dtype=np.float64)
    norm = np.zeros(shape, dtype=np.float64)
    net = state.network
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            for oz in origins[0]:
                for oy in origins[1]:
                    for ox in origins[2]:
                        sl = (
                            slice(oz, oz + patch[0]),
                            slice(oy, oy + patch[1]),
                            slice(ox, ox + patch[2]),
                        )
                        tile = torch.from_numpy(padded[(slice(None),) + sl][None].copy())
                        logits = net(tile)
                        prob_fg = torch.softmax(logits, dim=1)[0, 1].numpy().astype(np.float64)
                        accum[sl] += window * prob_fg
                        norm[sl] += window
    finally:
        if was_training:
            net.train()
    prob = accum / norm
    crop = tuple(slice(p[0], p[0] + n) for p, n in zip(pads, image.shape[1:]))
    return prob[crop]


def _image_stack(study: Study) -> np.ndarray:
    return np.stack([study.ct.values, study.pet.values]).astype(np.float32)


def probability_map(
    state,
    study: Study,
    patch_size: Optional[Sequence[int]] = None,
    overlap: float = 0.5,
) -> Volume:
    """Blended pre-argmax foreground probability in [0, 1].

    The study must already be normalized with the training statistics.
    """
    patch = tuple(int(p) for p in (patch_size or state.network_config.patch_size))
    prob = _foreground_probability(state, _image_stack(study), patch, overlap)
    return Volume(grid=study.ct.grid, values=prob.astype(np.float32))


def predict_study(
    state,
    study: Study,
    patch_size: Optional[Sequence[int]] = None,
    overlap: float = 0.5,
) -> LabelMask:
    """Argmax over the two blended class probabilities; no post-processing."""
    prob = probability_map(state, study, patch_size=patch_size, overlap=overlap)
    return LabelMask(grid=study.ct.grid, values=(prob.values > 0.5).astype(np.uint8))
