"""Saliency-guided occlusion augmentation and the cyclic training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from . import metrics
from .augment import AugmentParams, classic_augmentations
from .data import Dataset
from .interpret import InterpretMethod, SaliencyTarget, saliency_batch
from .unet import AdamState, UNet, train_epoch

log = logging.getLogger(__name__)

NO_WINDOW = (-1, -1)


@dataclass
class AdaConfig:
    z: int = 20
    standard_epochs: int = 100
    cycles: int = 31
    ada_epochs: int = 30
    method: InterpretMethod = InterpretMethod.VANILLA
    target: SaliencyTarget = SaliencyTarget.GT_FOREGROUND
    batch_size: int = 16

    def validate(self, n: Optional[int] = None) -> "AdaConfig":
        self.method = InterpretMethod(self.method)
        self.target = SaliencyTarget(self.target)
        if self.z < 1:
            raise ValueError(f"occlusion side z must be >= 1, got {self.z}")
        if n is not None and self.z > n:
            raise ValueError(f"occlusion side z={self.z} exceeds image size n={n}")
        if self.standard_epochs < 0 or self.cycles < 0 or self.ada_epochs < 0:
            raise ValueError("epoch and cycle counts must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        return self

    @property
    def total_epochs(self) -> int:
        return self.standard_epochs + self.cycles * self.ada_epochs


@dataclass
class OcclusionMask:
    values: np.ndarray  # uint8, 0 = erased
    origin: tuple
    z: int
    flagged: bool = False

    @property
    def zeros(self) -> np.ndarray:
        return self.values == 0


@dataclass
class AugmentedSample:
    image: np.ndarray
    source_id: str
    mask: OcclusionMask
    method: InterpretMethod
    cycle: int = 0


def integral_image(values: np.ndarray) -> np.ndarray:
    """Zero-padded prefix sums: ``S[r, c] = values[:r, :c].sum()``."""
    values = np.asarray(values, dtype=np.float64)
    s = np.zeros((values.shape[0] + 1, values.shape[1] + 1), dtype=np.float64)
    np.cumsum(np.cumsum(values, axis=0), axis=1, out=s[1:, 1:])
    return s


def window_sums(table: np.ndarray, z: int) -> np.ndarray:
    """Sums of every z x z window fully inside the image, indexed by top-left origin."""
    return table[z:, z:] - table[:-z, z:] - table[z:, :-z] + table[:-z, :-z]


def rect_sum(table: np.ndarray, r0: int, c0: int, r1: int, c1: int) -> float:
    """Sum over rows [r0, r1) and columns [c0, c1)."""
    return float(table[r1, c1] - table[r0, c1] - table[r1, c0] + table[r0, c0])


def build_mask(saliency, gt, n: int, z: int) -> OcclusionMask:
    """Zero out the most salient z x z window, never touching ground-truth pixels.

    Windows are scored by the saliency of their non-gt pixels. Windows with no
    gt overlap are preferred; only when none exists is the whole grid searched.
    Ties go to the smallest row, then the smallest column.
    """
    saliency = np.asarray(saliency, dtype=np.float64)
    gt = np.asarray(gt).astype(bool)
    if saliency.shape != (n, n) or gt.shape != (n, n):
        raise ValueError(f"saliency {saliency.shape} and gt {gt.shape} must both be {n}x{n}")
    if not 0 < z <= n:
        raise ValueError(f"occlusion side z={z} must satisfy 0 < z <= n={n}")
    if gt.all():
        return OcclusionMask(np.ones((n, n), np.uint8), NO_WINDOW, z, flagged=True)

    scores = window_sums(integral_image(np.where(gt, 0.0, saliency)), z)
    overlap = window_sums(integral_image(gt), z)
    free = overlap == 0
    if free.any():
        scores = np.where(free, scores, -np.inf)
    r, c = np.unravel_index(int(np.argmax(scores)), scores.shape)
    values = np.ones((n, n), np.uint8)
    values[r:r + z, c:c + z] = 0
    values[gt] = 1
    return OcclusionMask(values, (int(r), int(c)), z)


def apply_mask(image, mask: OcclusionMask) -> np.ndarray:
    image = np.asarray(image)
    if image.shape != mask.values.shape:
        raise ValueError(f"image {image.shape} and mask {mask.values.shape} differ in shape")
    return image * mask.values.astype(image.dtype)


def occlusion_masks(data: Dataset, model: UNet, method, z: int,
                    target=SaliencyTarget.GT_FOREGROUND) -> list[OcclusionMask]:
    maps = saliency_batch(method, model, data.images, data.masks, target)
    return [build_mask(maps[i], data.masks[i], data.n, z) for i in range(len(data))]


def ada_generate(data: Dataset, model: UNet, config: AdaConfig, cycle: int = 0) -> list[AugmentedSample]:
    """One occluded copy of every sample, guided by ``config.method``."""
    config.validate(data.n)
    out = []
    for i, m in enumerate(occlusion_masks(data, model, config.method, config.z, config.target)):
        if m.flagged:
            log.warning("sample %s is all foreground; left unoccluded", data.ids[i])
        out.append(AugmentedSample(apply_mask(data.images[i], m), data.ids[i], m, config.method, cycle))
    return out


def augmented_dataset(samples: list[AugmentedSample], source: Dataset) -> Dataset:
    idx = {sid: k for k, sid in enumerate(source.ids)}
    images = np.stack([s.image for s in samples])
    masks = np.stack([source.masks[idx[s.source_id]] for s in samples])
    return Dataset([f"{s.source_id}_ada{s.cycle}" for s in samples], images, masks, source.split)


def concat(*parts: Dataset) -> Dataset:
    return Dataset(sum((list(p.ids) for p in parts), []),
                   np.concatenate([p.images for p in parts]),
                   np.concatenate([p.masks for p in parts]), parts[0].split)


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    cycle: int
    loss: float
    dsc: float
    hsd: float
    tpr: float
    tnr: float
    ppv: float

    FIELDS = ("epoch", "phase", "cycle", "loss", "dsc", "hsd", "tpr", "tnr", "ppv")


@dataclass
class AdaResult:
    model: UNet
    state: AdamState
    records: list = field(default_factory=list)


def _record(epoch, phase, cycle, loss, model, val) -> EpochRecord:
    if val is not None and len(val):
        r = metrics.evaluate(model, val)
        return EpochRecord(epoch, phase, cycle, loss, r.dsc, r.hsd, r.tpr, r.tnr, r.ppv)
    nan = float("nan")
    return EpochRecord(epoch, phase, cycle, loss, nan, nan, nan, nan, nan)


def ada_training(model: UNet, data: Dataset, config: AdaConfig, rng: np.random.Generator,
                 val: Optional[Dataset] = None, state: Optional[AdamState] = None,
                 aug_params: Optional[AugmentParams] = None,
                 log_sink: Optional[Callable[[EpochRecord], None]] = None,
                 on_cycle_end: Optional[Callable[[int, UNet, AdamState], None]] = None,
                 start_epoch: int = 0) -> AdaResult:
    """Conventional training for ``standard_epochs``, then ``cycles`` rounds of
    regenerate-occluded-data-and-train for ``ada_epochs`` each.

    The occluded set of cycle ``c`` is built from the model as it stands at
    the start of that cycle and replaces the previous cycle's set.
    """
    config.validate(data.n if config.cycles else None)  # z is unused without cycles
    state = state or AdamState()
    conventional = concat(data, classic_augmentations(data, aug_params, rng))
    records = []
    epoch = start_epoch

    def emit(rec):
        records.append(rec)
        if log_sink is not None:
            log_sink(rec)

    for _ in range(config.standard_epochs):
        loss = train_epoch(model, state, conventional.images, conventional.masks, config.batch_size, rng)
        epoch += 1
        model.epochs_trained += 1
        emit(_record(epoch, "standard", 0, loss, model, val))

    for c in range(1, config.cycles + 1):
        ada = augmented_dataset(ada_generate(data, model, config, cycle=c), data)
        new_data = concat(conventional, ada)
        for _ in range(config.ada_epochs):
            loss = train_epoch(model, state, new_data.images, new_data.masks, config.batch_size, rng)
            epoch += 1
            model.epochs_trained += 1
            emit(_record(epoch, "ada", c, loss, model, val))
        if on_cycle_end is not None:
            on_cycle_end(c, model, state)
    return AdaResult(model, state, records)


def mask_iou(a: OcclusionMask, b: OcclusionMask) -> float:
    """IoU of the erased regions; two masks erasing nothing agree perfectly."""
    if a.values.shape != b.values.shape:
        raise ValueError(f"mask sizes differ: {a.values.shape} vs {b.values.shape}")
    za, zb = a.zeros, b.zeros
    union = np.count_nonzero(za | zb)
    if union == 0:
        return 1.0
    return np.count_nonzero(za & zb) / union


def iou_matrix(model: UNet, data: Dataset, methods: Iterable, z: int,
               target=SaliencyTarget.GT_FOREGROUND) -> np.ndarray:
    """Mean pairwise mask IoU over the dataset, one row/column per method."""
    methods = [InterpretMethod(m) for m in methods]
    masks = {m: occlusion_masks(data, model, m, z, target) for m in methods}
    k = len(methods)
    out = np.eye(k)
    for p in range(k):
        for q in range(p + 1, k):
            vals = [mask_iou(a, b) for a, b in zip(masks[methods[p]], masks[methods[q]])]
            out[p, q] = out[q, p] = float(np.mean(vals)) if vals else 1.0
    return out
