"""Segmentation metrics and the occlusion-grid robustness set.

All rates are on a 0-100 scale. Conventions for empty masks:

* DSC of two empty masks is 100.
* A rate whose denominator is empty is 100 when its error count is 0, else 0.
* HSD is undefined (NaN) when either mask is empty; :func:`evaluate`
  excludes such samples from the HSD mean and reports how many there were.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data import Dataset


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass
class MetricsReport:
    dsc: float
    hsd: float
    tpr: float
    tnr: float
    ppv: float
    count: int
    hsd_undefined: int = 0

    def as_row(self) -> dict:
        return {"dsc": self.dsc, "hsd": self.hsd, "tpr": self.tpr, "tnr": self.tnr,
                "ppv": self.ppv, "hsd_undefined_count": self.hsd_undefined}


def _check_binary(mask, name):
    mask = np.asarray(mask)
    if mask.dtype != bool and not np.isin(mask, (0, 1)).all():
        raise ValueError(f"{name} mask must be binary (values 0/1)")
    return mask.astype(bool)


def confusion(gt, pred) -> ConfusionCounts:
    gt = _check_binary(gt, "ground-truth")
    pred = _check_binary(pred, "predicted")
    if gt.shape != pred.shape:
        raise ValueError(f"mask shapes differ: {gt.shape} vs {pred.shape}")
    tp = int(np.count_nonzero(gt & pred))
    fp = int(np.count_nonzero(~gt & pred))
    fn = int(np.count_nonzero(gt & ~pred))
    return ConfusionCounts(tp, gt.size - tp - fp - fn, fp, fn)


def dsc(counts: ConfusionCounts) -> float:
    denom = 2 * counts.tp + counts.fp + counts.fn
    if denom == 0:
        return 100.0
    return 100.0 * 2 * counts.tp / denom


def _rate(num: int, errors: int) -> float:
    denom = num + errors
    if denom == 0:
        return 100.0 if errors == 0 else 0.0
    return 100.0 * num / denom


def statistical_rates(counts: ConfusionCounts) -> tuple[float, float, float]:
    """(sensitivity, specificity, precision)."""
    return (_rate(counts.tp, counts.fn), _rate(counts.tn, counts.fp), _rate(counts.tp, counts.fp))


def boundary(mask) -> np.ndarray:
    """Foreground pixels with a 4-neighbour in the background or on the image edge."""
    m = np.asarray(mask).astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return m & ~interior


def hsd(gt, pred) -> float:
    """Symmetric (max) Hausdorff distance between the two boundaries, in pixels."""
    bg, bp = boundary(gt), boundary(pred)
    if not bg.any() or not bp.any():
        return float("nan")
    to_pred = ndimage.distance_transform_edt(~bp)
    to_gt = ndimage.distance_transform_edt(~bg)
    return float(max(to_pred[bg].max(), to_gt[bp].max()))


def sample_metrics(gt, pred) -> tuple[float, float, float, float, float]:
    c = confusion(gt, pred)
    return (dsc(c), hsd(gt, pred), *statistical_rates(c))


def aggregate(gts, preds) -> MetricsReport:
    """Mean of per-sample metrics; HSD averaged over samples where it is defined."""
    rows = np.array([sample_metrics(g, p) for g, p in zip(gts, preds)], dtype=np.float64)
    if len(rows) == 0:
        raise ValueError("cannot aggregate metrics over zero samples")
    h = rows[:, 1]
    defined = ~np.isnan(h)
    return MetricsReport(
        dsc=float(rows[:, 0].mean()),
        hsd=float(h[defined].mean()) if defined.any() else float("nan"),
        tpr=float(rows[:, 2].mean()),
        tnr=float(rows[:, 3].mean()),
        ppv=float(rows[:, 4].mean()),
        count=len(rows),
        hsd_undefined=int((~defined).sum()),
    )


def evaluate(model, data: Dataset, batch_size: int = 32) -> MetricsReport:
    """Threshold the model's eval-mode probabilities at 0.5 and aggregate metrics."""
    if len(data) == 0:
        raise ValueError("evaluate: empty dataset")
    preds = []
    for s in range(0, len(data), batch_size):
        preds.append((model.predict_proba(data.images[s:s + batch_size]) >= 0.5).astype(np.uint8))
    return aggregate(data.masks, np.concatenate(preds))


def erase_region(image, i: int, j: int, z: int) -> np.ndarray:
    image = np.asarray(image)
    n_r, n_c = image.shape[-2:]
    if i < 0 or j < 0 or z <= 0 or i + z > n_r or j + z > n_c:
        raise ValueError(f"window ({i},{j}) of side {z} is outside a {n_r}x{n_c} image")
    out = image.copy()
    out[..., i:i + z, j:j + z] = 0
    return out


def robustness_origins(n: int, z: int) -> list[tuple[int, int]]:
    """Grid origins stepping by z; windows that would cross the border are skipped."""
    if z <= 0 or z > n:
        raise ValueError(f"occlusion side z={z} must satisfy 0 < z <= n={n}")
    steps = [k for k in range(0, n, z) if k + z <= n]
    return [(i, j) for i in steps for j in steps]


def build_robustness_data(data: Dataset, n: int, z: int) -> Dataset:
    """Every image occluded once per grid cell, sample-major then row-major; masks unchanged."""
    origins = robustness_origins(n, z)
    if len(data) and data.n != n:
        raise ValueError(f"dataset images are {data.n}x{data.n}, expected n={n}")
    ids, images, masks = [], [], []
    for k in range(len(data)):
        for i, j in origins:
            ids.append(f"{data.ids[k]}@{i}_{j}")
            images.append(erase_region(data.images[k], i, j, z))
            masks.append(data.masks[k])
    if not ids:
        return Dataset.empty(n, data.split)
    return Dataset(ids, np.stack(images), np.stack(masks), data.split)
