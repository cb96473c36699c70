"""Type1 and Type2 stochastic augmentation for 2-channel patches plus mask.

Geometric transforms (rotation, scaling, cropping, downsample-resample) are
applied with identical parameters to both image channels and the mask (mask
via nearest-neighbor); intensity transforms touch image channels only.
Mirroring is deliberately absent from the transform vocabulary: human bodies
are not symmetric, so no flip is representable here.

apply_policy draws a TransformPlan first and then applies it, so a fixed rng
state yields identical outputs and the geometric stream can be replayed on a
single channel for lockstep checks.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import affine_transform, gaussian_filter, map_coordinates

from .errors import ConfigError, GeometryError

GEOMETRIC_TRANSFORMS = ("rotation", "scaling", "cropping", "downsample")
INTENSITY_TRANSFORMS = (
    "blur",
    "noise",
    "brightness",
    "contrast",
    "gamma",
    "sharpen",
    "local_gamma",
    "occlusion",
)


@dataclass(frozen=True)
class Transform:
    """One stochastic transform: trigger probability plus a parameter range."""

    p: float
    low: float
    high: float

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError(f"transform probability must be in [0, 1], got {self.p}")
        if self.low > self.high:
            raise ConfigError(f"range low {self.low} exceeds high {self.high}")


_OFF = Transform(p=0.0, low=0.0, high=0.0)


@dataclass(frozen=True)
class AugmentationPolicy:
    name: str
    rotation: Transform = _OFF       # degrees about each axis
    scaling: Transform = _OFF        # isotropic zoom factor
    cropping: Transform = _OFF       # retained fraction per axis
    downsample: Transform = _OFF     # simulated low-resolution factor
    blur: Transform = _OFF           # gaussian sigma, voxels
    noise: Transform = _OFF          # additive gaussian variance
    brightness: Transform = _OFF     # multiplier
    contrast: Transform = _OFF       # multiplier about the channel mean
    gamma: Transform = _OFF          # exponent after min-max scaling
    sharpen: Transform = _OFF        # unsharp-mask amount
    local_gamma: Transform = _OFF    # exponent within a random box
    occlusion: Transform = _OFF      # box count range (ints)
    occlusion_size: tuple[float, float] = (0.1, 0.25)  # box edge as dim fraction

    def enabled_transforms(self) -> frozenset[str]:
        names = GEOMETRIC_TRANSFORMS + INTENSITY_TRANSFORMS
        return frozenset(n for n in names if getattr(self, n).p > 0)


def none_policy() -> AugmentationPolicy:
    return AugmentationPolicy(name="None")


def type1_policy() -> AugmentationPolicy:
    """Basic suite: rotation, cropping, scaling, blur, noise, contrast and
    brightness adjustments, down-sampling, gamma correction."""
    return AugmentationPolicy(
        name="Type1",
        rotation=Transform(0.2, -30.0, 30.0),
        scaling=Transform(0.2, 0.7, 1.4),
        cropping=Transform(0.2, 0.85, 1.0),
        downsample=Transform(0.2, 0.5, 1.0),
        blur=Transform(0.2, 0.5, 1.0),
        noise=Transform(0.2, 0.0, 0.1),
        brightness=Transform(0.2, 0.75, 1.25),
        contrast=Transform(0.2, 0.75, 1.25),
        gamma=Transform(0.2, 0.7, 1.5),
    )


def type2_policy() -> AugmentationPolicy:
    """Extends Type1 with widened scaling/brightness/contrast plus sharpening,
    localized gamma and random rectangle occlusion."""
    return replace(
        type1_policy(),
        name="Type2",
        scaling=Transform(0.2, 0.6, 1.6),
        brightness=Transform(0.2, 0.6, 1.4),
        contrast=Transform(0.2, 0.6, 1.4),
        sharpen=Transform(0.2, 0.3, 1.0),
        local_gamma=Transform(0.2, 0.7, 1.5),
        occlusion=Transform(0.2, 1.0, 3.0),
    )


_POLICIES = {"None": none_policy, "Type1": type1_policy, "Type2": type2_policy}


def get_policy(name: str) -> AugmentationPolicy:
    try:
        return _POLICIES[name]()
    except KeyError:
        raise ConfigError(f"unknown augmentation policy {name!r}; choose from {sorted(_POLICIES)}") from None


def describe_policy(policy: AugmentationPolicy) -> str:
    lines = [f"policy {policy.name}"]
    for f in fields(policy):
        if f.name in ("name", "occlusion_size"):
            continue
        t = getattr(policy, f.name)
        state = f"p={t.p:.2f} range=[{t.low}, {t.high}]" if t.p > 0 else "off"
        lines.append(f"  {f.name:<12} {state}")
    if policy.occlusion.p > 0:
        lines.append(f"  occlusion box edge fraction in [{policy.occlusion_size[0]}, {policy.occlusion_size[1]}]")
    lines.append("  mirroring     not representable (cancelled by design)")
    return "\n".join(lines)


@dataclass(frozen=True)
class TrainingSample:
    """A 2-channel (CT, PET) patch with its binary mask."""

    image: np.ndarray  # (2, z, y, x) float32
    mask: np.ndarray   # (z, y, x) uint8
    study_id: str

    def __post_init__(self):
        image = np.asarray(self.image, dtype=np.float32)
        mask = np.asarray(self.mask, dtype=np.uint8)
        if image.ndim != 4:
            raise ConfigError(f"sample image must be (channels, z, y, x), got shape {image.shape}")
        if image.shape[1:] != mask.shape:
            raise ConfigError(
                f"image spatial shape {image.shape[1:]} must match mask shape {mask.shape}"
            )
        object.__setattr__(self, "image", image)
        object.__setattr__(self, "mask", mask)


# ---------------------------------------------------------------------------
# transform plan


@dataclass(frozen=True)
class Box:
    start: tuple[int, int, int]
    size: tuple[int, int, int]

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(s, s + n) for s, n in zip(self.start, self.size))


@dataclass(frozen=True)
class TransformPlan:
    """All sampled parameters for one augmentation application."""

    rotation_deg: Optional[tuple[float, float, float]] = None
    scale: Optional[float] = None
    crop_fracs: Optional[tuple[float, float, float]] = None
    crop_anchors: Optional[tuple[float, float, float]] = None
    downsample: Optional[float] = None
    blur_sigma: Optional[float] = None
    noise_std: Optional[float] = None
    noise_seed: Optional[int] = None
    brightness: Optional[float] = None
    contrast: Optional[float] = None
    gamma: Optional[float] = None
    sharpen_amount: Optional[float] = None
    local_gamma: Optional[float] = None
    local_gamma_box: Optional[Box] = None
    occlusion_boxes: tuple[Box, ...] = ()


def _draw_box(rng: np.random.Generator, shape: Sequence[int], frac_range: tuple[float, float]) -> Box:
    size = tuple(
        max(1, int(round(rng.uniform(*frac_range) * n))) for n in shape
    )
    start = tuple(int(rng.integers(0, n - s + 1)) for n, s in zip(shape, size))
    return Box(start=start, size=size)


def draw_plan(
    policy: AugmentationPolicy, rng: np.random.Generator, shape: Sequence[int]
) -> TransformPlan:
    """Sample every triggered transform's parameters in a fixed order."""
    shape = tuple(int(s) for s in shape)
    kw: dict = {}
    if rng.random() < policy.rotation.p:
        kw["rotation_deg"] = tuple(rng.uniform(policy.rotation.low, policy.rotation.high) for _ in range(3))
    if rng.random() < policy.scaling.p:
        kw["scale"] = float(rng.uniform(policy.scaling.low, policy.scaling.high))
    if rng.random() < policy.cropping.p:
        kw["crop_fracs"] = tuple(rng.uniform(policy.cropping.low, policy.cropping.high) for _ in range(3))
        kw["crop_anchors"] = tuple(rng.random() for _ in range(3))
    if rng.random() < policy.downsample.p:
        kw["downsample"] = float(rng.uniform(policy.downsample.low, policy.downsample.high))
    if rng.random() < policy.blur.p:
        kw["blur_sigma"] = float(rng.uniform(policy.blur.low, policy.blur.high))
    if rng.random() < policy.noise.p:
        kw["noise_std"] = float(np.sqrt(rng.uniform(policy.noise.low, policy.noise.high)))
        kw["noise_seed"] = int(rng.integers(0, 2**31 - 1))
    if rng.random() < policy.brightness.p:
        kw["brightness"] = float(rng.uniform(policy.brightness.low, policy.brightness.high))
    if rng.random() < policy.contrast.p:
        kw["contrast"] = float(rng.uniform(policy.contrast.low, policy.contrast.high))
    if rng.random() < policy.gamma.p:
        kw["gamma"] = float(rng.uniform(policy.gamma.low, policy.gamma.high))
    if rng.random() < policy.sharpen.p:
        kw["sharpen_amount"] = float(rng.uniform(policy.sharpen.low, policy.sharpen.high))
    if rng.random() < policy.local_gamma.p:
        kw["local_gamma"] = float(rng.uniform(policy.local_gamma.low, policy.local_gamma.high))
        kw["local_gamma_box"] = _draw_box(rng, shape, (0.25, 0.6))
    if rng.random() < policy.occlusion.p:
        count = int(rng.integers(int(policy.occlusion.low), int(policy.occlusion.high) + 1))
        kw["occlusion_boxes"] = tuple(_draw_box(rng, shape, policy.occlusion_size) for _ in range(count))
    return TransformPlan(**kw)


# ---------------------------------------------------------------------------
# geometric application


def _rotation_matrix(deg: tuple[float, float, float]) -> np.ndarray:
    """Rotation acting on (z, y, x) coordinate columns: Rz then Ry then Rx."""
    rz, ry, rx = (np.deg2rad(d) for d in deg)
    cz, sz = np.cos(rz), np.sin(rz)
    cy, sy = np.cos(ry), np.sin(ry)
    cx, sx = np.cos(rx), np.sin(rx)
    mz = np.array([[1, 0, 0], [0, cz, -sz], [0, sz, cz]])  # rotates the (y, x) plane
    my = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])  # rotates the (z, x) plane
    mx = np.array([[cx, -sx, 0], [sx, cx, 0], [0, 0, 1]])  # rotates the (z, y) plane
    return mz @ my @ mx


def geometric_matrix(plan: TransformPlan) -> Optional[np.ndarray]:
    """Forward voxel-coordinate map for the rotation+scaling part, or None."""
    if plan.rotation_deg is None and plan.scale is None:
        return None
    m = np.eye(3)
    if plan.scale is not None:
        m = m * plan.scale
    if plan.rotation_deg is not None:
        m = _rotation_matrix(plan.rotation_deg) @ m
    return m


def _apply_affine(arr: np.ndarray, forward: np.ndarray, order: int) -> np.ndarray:
    center = (np.asarray(arr.shape) - 1) / 2.0
    inverse = np.linalg.inv(forward)
    offset = center - inverse @ center
    return affine_transform(arr, matrix=inverse, offset=offset, order=order, mode="constant", cval=float(arr.min()) if order else 0.0)


def _apply_crop_resize(arr: np.ndarray, fracs, anchors, order: int) -> np.ndarray:
    shape = arr.shape
    keep = tuple(max(2, int(round(f * n))) for f, n in zip(fracs, shape))
    if any(k > n for k, n in zip(keep, shape)):
        raise GeometryError(f"crop size {keep} exceeds volume shape {shape}")
    start = tuple(int(round(a * (n - k))) for a, n, k in zip(anchors, shape, keep))
    axes = [
        s + np.linspace(0.0, k - 1, n) for s, k, n in zip(start, keep, shape)
    ]
    coords = np.stack(np.meshgrid(*axes, indexing="ij"))
    return map_coordinates(arr, coords, order=order, mode="nearest")


def _apply_downsample(arr: np.ndarray, factor: float, order: int) -> np.ndarray:
    shape = arr.shape
    small = tuple(max(2, int(round(factor * n))) for n in shape)
    down_axes = [np.linspace(0.0, n - 1, m) for n, m in zip(shape, small)]
    down = map_coordinates(arr, np.stack(np.meshgrid(*down_axes, indexing="ij")), order=order, mode="nearest")
    up_axes = [np.linspace(0.0, m - 1, n) for n, m in zip(shape, small)]
    return map_coordinates(down, np.stack(np.meshgrid(*up_axes, indexing="ij")), order=order, mode="nearest")


def apply_geometric(arr: np.ndarray, plan: TransformPlan, order: int) -> np.ndarray:
    """Apply the plan's geometric stream to one 3-D array.

    order=1 for image channels, order=0 for masks; parameters are shared.
    """
    out = arr.astype(np.float32)
    forward = geometric_matrix(plan)
    if forward is not None:
        out = _apply_affine(out, forward, order)
    if plan.crop_fracs is not None:
        out = _apply_crop_resize(out, plan.crop_fracs, plan.crop_anchors, order)
    if plan.downsample is not None:
        out = _apply_downsample(out, plan.downsample, order)
    return out


# ---------------------------------------------------------------------------
# intensity application (image channels only)


def _fill_boxes(image: np.ndarray, boxes: Sequence[Box]) -> np.ndarray:
    out = image.copy()
    fill = image.reshape(image.shape[0], -1).mean(axis=1)  # per-channel patch mean
    for box in boxes:
        for c in range(out.shape[0]):
            out[(c,) + box.slices()] = fill[c]
    return out


def occlude_rectangles(
    image: np.ndarray,
    rng: np.random.Generator,
    count_range: tuple[int, int],
    size_range: tuple[float, float],
) -> np.ndarray:
    """Set random axis-aligned boxes to the channel mean of the patch."""
    count = int(rng.integers(int(count_range[0]), int(count_range[1]) + 1))
    if count == 0:
        return image.copy()
    shape = image.shape[1:]
    if size_range[1] > 1.0:
        raise GeometryError(f"occlusion box fraction {size_range} exceeds patch dims")
    boxes = [_draw_box(rng, shape, size_range) for _ in range(count)]
    return _fill_boxes(image, boxes)


def _gamma_in_box(image: np.ndarray, box: Box, gamma: float) -> np.ndarray:
    out = image.copy()
    sl = box.slices()
    for c in range(out.shape[0]):
        region = out[(c,) + sl]
        lo, hi = float(region.min()), float(region.max())
        if hi <= lo:
            continue  # degenerate region: leave the channel untouched
        scaled = (region - lo) / (hi - lo)
        out[(c,) + sl] = scaled**gamma * (hi - lo) + lo
    return out


def local_gamma(
    image: np.ndarray,
    rng: np.random.Generator,
    region_fracs: tuple[float, float],
    gamma_range: tuple[float, float],
) -> np.ndarray:
    """Gamma-correct a random subregion after min-max scaling it to [0, 1]."""
    if gamma_range[0] <= 0:
        raise ConfigError(f"gamma range must be positive, got {gamma_range}")
    box = _draw_box(rng, image.shape[1:], region_fracs)
    gamma = float(rng.uniform(*gamma_range))
    return _gamma_in_box(image, box, gamma)


def _apply_global_gamma(channel: np.ndarray, gamma: float) -> np.ndarray:
    lo, hi = float(channel.min()), float(channel.max())
    if hi <= lo:
        return channel
    scaled = (channel - lo) / (hi - lo)
    return scaled**gamma * (hi - lo) + lo


def apply_intensity(image: np.ndarray, plan: TransformPlan) -> np.ndarray:
    out = image.astype(np.float32).copy()
    if plan.blur_sigma is not None:
        for c in range(out.shape[0]):
            out[c] = gaussian_filter(out[c], sigma=plan.blur_sigma)
    if plan.noise_std is not None:
        noise_rng = np.random.default_rng(plan.noise_seed)
        out += noise_rng.normal(0.0, plan.noise_std, size=out.shape).astype(np.float32)
    if plan.brightness is not None:
        out *= plan.brightness
    if plan.contrast is not None:
        for c in range(out.shape[0]):
            mean = float(out[c].mean())
            out[c] = mean + (out[c] - mean) * plan.contrast
    if plan.gamma is not None:
        for c in range(out.shape[0]):
            out[c] = _apply_global_gamma(out[c], plan.gamma)
    if plan.sharpen_amount is not None:
        for c in range(out.shape[0]):
            out[c] = out[c] + plan.sharpen_amount * (out[c] - gaussian_filter(out[c], sigma=0.7))
    if plan.local_gamma is not None:
        out = _gamma_in_box(out, plan.local_gamma_box, plan.local_gamma)
    if plan.occlusion_boxes:
        out = _fill_boxes(out, plan.occlusion_boxes)
    return out


def apply_plan(sample: TrainingSample, plan: TransformPlan) -> TrainingSample:
    image = np.stack([apply_geometric(sample.image[c], plan, order=1) for c in range(sample.image.shape[0])])
    mask = apply_geometric(sample.mask.astype(np.float32), plan, order=0)
    image = apply_intensity(image, plan)
    return TrainingSample(
        image=image.astype(np.float32),
        mask=(mask > 0.5).astype(np.uint8),
        study_id=sample.study_id,
    )


def apply_policy(
    sample: TrainingSample,
    policy: AugmentationPolicy,
    rng: np.random.Generator | int,
) -> TrainingSample:
    """Draw a plan from the rng and apply it; no mirror/flip is ever applied."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    plan = draw_plan(policy, rng, sample.mask.shape)
    return apply_plan(sample, plan)
