"""Loss, optimizer loop, weighted sampling and per-sample evaluation.

Attention boosting is realized as deterministic sample replication: every
epoch presents each study exactly multiplicity(s) times in a seed-shuffled
order, so the effective epoch length is the weight-table total. The
optimizer is SGD with Nesterov momentum 0.99 and polynomial learning-rate
decay (exponent 0.9) from the given initial value to 0 across the epoch
budget of the call.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import torch

from .augment import AugmentationPolicy, TrainingSample, apply_policy, none_policy
from .errors import ConfigError, PetctsegError, ShapeError, ValidationError
from .network import Network, NetworkConfig, build_network, supervision_weights
from .preprocess import NormalizationStats, normalize_study, per_case_stats
from .types import SampleWeightTable, Study

DICE_SMOOTH = 1e-5
MOMENTUM = 0.99
POLY_EXPONENT = 0.9
FOREGROUND_BIAS = 1.0 / 3.0


def derive_rng(*tokens) -> np.random.Generator:
    """Deterministic generator from a mix of ints and strings."""
    entropy = []
    for t in tokens:
        if isinstance(t, str):
            entropy.append(int.from_bytes(hashlib.sha256(t.encode()).digest()[:8], "little"))
        else:
            entropy.append(int(t) & 0xFFFFFFFFFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(entropy))


@dataclass(frozen=True)
class PerSampleDice:
    """study_id -> Dice score in [0, 1]; each evaluated id appears once."""

    values: Mapping[str, float]

    def __post_init__(self):
        vals = {str(k): float(v) for k, v in self.values.items()}
        for sid, v in vals.items():
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"dice for {sid!r} must be in [0, 1], got {v}")
        object.__setattr__(self, "values", dict(vals))

    def __getitem__(self, study_id: str) -> float:
        return self.values[study_id]

    def __contains__(self, study_id: str) -> bool:
        return study_id in self.values

    def ids(self) -> tuple[str, ...]:
        return tuple(self.values)

    def mean(self) -> float:
        return float(np.mean(list(self.values.values())))


@dataclass
class TrainState:
    """Everything the training driver owns; one driver thread per state.

    The rng state is the (seed, epoch) pair: every stochastic stream is
    re-derived from them, which makes resuming exact.
    """

    network: Network
    network_config: NetworkConfig
    seed: int
    epoch: int = 0
    optimizer: Optional[torch.optim.Optimizer] = None
    weight_table: Optional[SampleWeightTable] = None
    lineage: tuple[str, ...] = ()

    def clone_description(self) -> str:
        return " -> ".join(self.lineage) if self.lineage else "fresh"


def make_state(config: NetworkConfig, seed: int, lineage: tuple[str, ...] = ()) -> TrainState:
    network = build_network(config, seed=seed)
    return TrainState(network=network, network_config=config, seed=int(seed), lineage=lineage)


def clone_state(state: TrainState, note: Optional[str] = None) -> TrainState:
    """Deep-copy the network so the original round's weights stay intact;
    the optimizer restarts (per-round momentum reset)."""
    import copy

    return TrainState(
        network=copy.deepcopy(state.network),
        network_config=state.network_config,
        seed=state.seed,
        epoch=state.epoch,
        optimizer=None,
        weight_table=state.weight_table,
        lineage=state.lineage + ((note,) if note else ()),
    )


# ---------------------------------------------------------------------------
# loss


def loss_terms(logits: torch.Tensor, target: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Single-level loss: (total, soft-dice term, cross-entropy term).

    Soft dice uses the foreground softmax channel with smoothing 1e-5,
    averaged over the batch; cross-entropy is the voxelwise mean. The two
    terms are equally weighted: total = dice + ce.
    """
    if logits.shape[0] == 0:
        raise ShapeError("empty batch")
    if logits.shape[2:] != target.shape[1:] or logits.shape[0] != target.shape[0]:
        raise ShapeError(f"logits {tuple(logits.shape)} vs target {tuple(target.shape)}")
    logp = torch.log_softmax(logits, dim=1)
    t = target.to(logits.dtype)
    pf = logp[:, 1].exp()
    axes = tuple(range(1, t.ndim))
    intersection = (pf * t).sum(dim=axes)
    denom = pf.sum(dim=axes) + t.sum(dim=axes)
    dice_per_sample = (2.0 * intersection + DICE_SMOOTH) / (denom + DICE_SMOOTH)
    dice_term = 1.0 - dice_per_sample.mean()
    ce_term = -(t * logp[:, 1] + (1.0 - t) * logp[:, 0]).mean()
    return dice_term + ce_term, dice_term, ce_term


def _downsample_target(target: torch.Tensor, out_spatial: Sequence[int]) -> torch.Tensor:
    factors = [t // o for t, o in zip(target.shape[1:], out_spatial)]
    return target[:, :: factors[0], :: factors[1], :: factors[2]]


def loss(outputs, target: torch.Tensor) -> torch.Tensor:
    """Total loss; deep-supervision outputs are aggregated with halved
    weights per coarser level (normalized to sum 1)."""
    if isinstance(outputs, torch.Tensor):
        return loss_terms(outputs, target)[0]
    weights = supervision_weights(len(outputs))
    total = outputs[0].new_zeros(())
    for w, out in zip(weights, outputs):
        level_target = _downsample_target(target, out.shape[2:])
        total = total + w * loss_terms(out, level_target)[0]
    return total


# ---------------------------------------------------------------------------
# data access


class TrainingData:
    """Normalized 2-channel stacks and masks by study id, cached in memory."""

    def __init__(
        self,
        studies: Sequence[Study],
        stats: Optional[NormalizationStats] = None,
        normalization: str = "corpus",
    ):
        if normalization not in ("corpus", "per_case"):
            raise ConfigError(f"normalization must be 'corpus' or 'per_case', got {normalization!r}")
        if normalization == "corpus" and stats is None:
            raise ConfigError("corpus normalization requires precomputed stats")
        self._studies = {s.id: s for s in studies}
        self._stats = stats
        self._normalization = normalization
        self._cache: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def ids(self) -> tuple[str, ...]:
        return tuple(self._studies)

    def study(self, study_id: str) -> Study:
        try:
            return self._studies[study_id]
        except KeyError:
            raise PetctsegError(f"study {study_id!r} is missing from the training dataset") from None

    def normalized(self, study_id: str) -> tuple[np.ndarray, np.ndarray]:
        """(image stack (2, z, y, x) float32, mask (z, y, x) uint8)."""
        if study_id in self._cache:
            return self._cache[study_id]
        study = self.study(study_id)
        stats = self._stats if self._normalization == "corpus" else per_case_stats(study)
        norm = normalize_study(study, stats)
        image = np.stack([norm.ct.values, norm.pet.values]).astype(np.float32)
        mask = (
            study.label.values.astype(np.uint8)
            if study.label is not None
            else np.zeros(study.ct.grid.shape, dtype=np.uint8)
        )
        self._cache[study_id] = (image, mask)
        return self._cache[study_id]


def extract_patch(
    image: np.ndarray,
    mask: np.ndarray,
    patch_size: Sequence[int],
    rng: np.random.Generator,
    foreground_bias: float = FOREGROUND_BIAS,
) -> tuple[np.ndarray, np.ndarray]:
    """Crop a patch, centering on a random lesion voxel with the given bias."""
    shape = mask.shape
    patch = tuple(int(p) for p in patch_size)
    fg = np.argwhere(mask > 0)
    use_fg = len(fg) > 0 and rng.random() < foreground_bias
    if use_fg:
        center = fg[int(rng.integers(0, len(fg)))]
    else:
        center = [int(rng.integers(0, n)) for n in shape]
    start = [int(np.clip(c - p // 2, 0, max(n - p, 0))) for c, p, n in zip(center, patch, shape)]
    end = [min(s + p, n) for s, p, n in zip(start, patch, shape)]
    img = image[:, start[0] : end[0], start[1] : end[1], start[2] : end[2]]
    msk = mask[start[0] : end[0], start[1] : end[1], start[2] : end[2]]
    pad = [(0, p - (e - s)) for p, s, e in zip(patch, start, end)]
    if any(p[1] for p in pad):
        img = np.pad(img, [(0, 0)] + pad, mode="constant")
        msk = np.pad(msk, pad, mode="constant")
    return img.copy(), msk.copy()


# ---------------------------------------------------------------------------
# training loop


def epoch_sample_order(weights: SampleWeightTable, rng: np.random.Generator) -> list[str]:
    """Each id exactly multiplicity(s) times, in a seed-shuffled order."""
    order = [sid for sid in sorted(weights.ids()) for _ in range(weights[sid])]
    rng.shuffle(order)
    return order


def train(
    state: TrainState,
    data: TrainingData,
    weights: SampleWeightTable,
    policy: Optional[AugmentationPolicy],
    epochs: int,
    lr: float,
    *,
    batch_size: int = 2,
    patch_size: Optional[Sequence[int]] = None,
    foreground_bias: float = FOREGROUND_BIAS,
    log_path: Optional[Path] = None,
    epoch_callback=None,
    checkpoint_every: int = 0,
    tag: str = "train",
) -> TrainState:
    """Run the weighted-sampling optimizer loop; returns the updated state.

    epochs=0 leaves everything unchanged except the provenance entry.
    """
    if epochs < 0:
        raise ConfigError(f"epochs must be >= 0, got {epochs}")
    if lr <= 0:
        raise ConfigError(f"learning rate must be > 0, got {lr}")
    missing = [sid for sid in weights.ids() if sid not in data.ids()]
    if missing:
        raise PetctsegError(f"weighted ids missing from dataset: {missing}")
    policy = policy or none_policy()
    patch = tuple(int(p) for p in (patch_size or state.network_config.patch_size))

    net = state.network
    optimizer = state.optimizer
    if optimizer is None:
        optimizer = torch.optim.SGD(net.parameters(), lr=lr, momentum=MOMENTUM, nesterov=True)
    log_fh = Path(log_path).open("a") if log_path else None
    try:
        net.train()
        for local_epoch in range(int(epochs)):
            abs_epoch = state.epoch + local_epoch
            epoch_lr = lr * (1.0 - local_epoch / float(epochs)) ** POLY_EXPONENT
            for group in optimizer.param_groups:
                group["lr"] = epoch_lr
            order = epoch_sample_order(weights, derive_rng(state.seed, "order", abs_epoch))
            losses = []
            for b0 in range(0, len(order), batch_size):
                batch_ids = order[b0 : b0 + batch_size]
                images, masks = [], []
                for occ, sid in enumerate(batch_ids, start=b0):
                    image, mask = data.normalized(sid)
                    rng = derive_rng(state.seed, "sample", abs_epoch, sid, occ)
                    img_p, msk_p = extract_patch(image, mask, patch, rng, foreground_bias)
                    sample = apply_policy(TrainingSample(img_p, msk_p, sid), policy, rng)
                    images.append(sample.image)
                    masks.append(sample.mask)
                x = torch.from_numpy(np.stack(images))
                t = torch.from_numpy(np.stack(masks))
                optimizer.zero_grad()
                outputs = net(x)
                batch_loss = loss(outputs, t)
                batch_loss.backward()
                optimizer.step()
                losses.append(float(batch_loss.detach()))
            if log_fh:
                log_fh.write(
                    json.dumps({"epoch": abs_epoch, "loss": float(np.mean(losses)), "lr": epoch_lr}) + "\n"
                )
                log_fh.flush()
            if epoch_callback and checkpoint_every and (local_epoch + 1) % checkpoint_every == 0:
                epoch_callback(abs_epoch)
    finally:
        if log_fh:
            log_fh.close()
    return TrainState(
        network=net,
        network_config=state.network_config,
        seed=state.seed,
        epoch=state.epoch + int(epochs),
        optimizer=optimizer,
        weight_table=weights,
        lineage=state.lineage + (f"{tag}[{epochs}ep@lr{lr:g}]",),
    )


def evaluate_per_sample(
    state: TrainState,
    studies: Sequence[Study],
    stats: Optional[NormalizationStats] = None,
    *,
    normalization: str = "corpus",
    patch_size: Optional[Sequence[int]] = None,
    overlap: float = 0.5,
) -> PerSampleDice:
    """Whole-volume inference per study, scored against its label."""
    from . import inference, metrics

    unlabeled = [s.id for s in studies if s.label is None]
    if unlabeled:
        raise ValidationError(f"cannot evaluate unlabeled studies: {unlabeled}")
    if normalization == "corpus" and stats is None:
        raise ConfigError("corpus normalization requires precomputed stats")
    values: dict[str, float] = {}
    for study in studies:
        ch_stats = stats if normalization == "corpus" else per_case_stats(study)
        norm = normalize_study(study, ch_stats)
        pred = inference.predict_study(state, norm, patch_size=patch_size, overlap=overlap)
        values[study.id] = metrics.dice(pred, study.label)
    return PerSampleDice(values)
