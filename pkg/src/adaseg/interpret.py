"""Gradient-based saliency for dense segmentation outputs.

A model is anything with ``forward(x: Tensor, training: bool) -> Tensor``
returning pre-sigmoid logits ``[B,1,n,n]`` and marking named layers on the
active tape (see :func:`adaseg.tensor.mark`). GradCam reads the layer named
by ``layer_id`` (default: the model's ``cam_layer`` attribute).

Every function works on a batch; each image is scalarised separately and
the per-image scalars are summed, which keeps images independent as long
as the forward pass is run in eval mode.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from . import tensor as T
from .tensor import ReluMode, Tape, Tensor


class InterpretMethod(str, enum.Enum):
    VANILLA = "vanilla"
    DECONVNET = "deconvnet"
    GUIDED = "guided"
    INPUTXGRAD = "inputxgrad"
    GRADCAM = "gradcam"
    GUIDED_GRADCAM = "guided-gradcam"


ALL_METHODS = tuple(InterpretMethod)
# the five methods compared in the ADA experiments (DeconvNet is available but not forked)
ADA_METHODS = (InterpretMethod.VANILLA, InterpretMethod.INPUTXGRAD, InterpretMethod.GRADCAM,
               InterpretMethod.GUIDED, InterpretMethod.GUIDED_GRADCAM)


class SaliencyTarget(str, enum.Enum):
    GT_FOREGROUND = "gt"
    PRED_FOREGROUND = "pred"
    ALL = "all"


@dataclass
class SaliencyMap:
    values: np.ndarray
    method: InterpretMethod
    target: SaliencyTarget


def _batch(images) -> np.ndarray:
    a = np.asarray(images, dtype=T.DTYPE)
    if a.ndim == 2:
        return a[None]
    return a


def selection_weights(logits: np.ndarray, gt: Optional[np.ndarray], target: SaliencyTarget) -> np.ndarray:
    """Per-image 0/1 pixel selection ``[B,1,n,n]`` following the fallback chain.

    gt foreground -> predicted foreground (logit >= 0) -> all pixels.
    """
    target = SaliencyTarget(target)
    b = logits.shape[0]
    w = np.zeros(logits.shape, dtype=logits.dtype)
    for i in range(b):
        sel = None
        if target is SaliencyTarget.GT_FOREGROUND and gt is not None and np.any(gt[i]):
            sel = np.asarray(gt[i]).reshape(logits.shape[2:]) > 0
        if sel is None and target is not SaliencyTarget.ALL:
            pred = logits[i, 0] >= 0
            if pred.any():
                sel = pred
        if sel is None:
            sel = np.ones(logits.shape[2:], dtype=bool)
        w[i, 0] = sel
    return w


def scalarize(logits: Tensor, gt, target: SaliencyTarget = SaliencyTarget.GT_FOREGROUND) -> Tensor:
    """Sum of logits over the selected pixels of every image."""
    gt_b = None if gt is None else np.asarray(gt).reshape(logits.shape[0], *logits.shape[2:])
    if gt_b is not None and gt_b.shape[1:] != logits.shape[2:]:
        raise ValueError(f"gt shape {gt_b.shape} does not match logits {logits.shape}")
    return T.masked_sum(logits, selection_weights(logits.data, gt_b, target))


def _input_gradient(model, images, gts, target, mode: ReluMode, capture: Optional[str] = None):
    x = Tensor(_batch(images)[:, None], requires_grad=True)
    with Tape() as tape:
        logits = model.forward(x, training=False)
        handle = T.register_capture(tape, capture) if capture else None
        score = scalarize(logits, gts, target)
    T.backward(score, mode)
    grad = x.grad if x.grad is not None else np.zeros_like(x.data)
    return grad[:, 0], x.data[:, 0], handle


def vanilla_backprop(model, images, gts=None, target=SaliencyTarget.GT_FOREGROUND) -> np.ndarray:
    g, _, _ = _input_gradient(model, images, gts, target, ReluMode.STANDARD)
    return np.abs(g)


def deconvnet(model, images, gts=None, target=SaliencyTarget.GT_FOREGROUND) -> np.ndarray:
    g, _, _ = _input_gradient(model, images, gts, target, ReluMode.DECONV)
    return np.abs(g)


def guided_backprop(model, images, gts=None, target=SaliencyTarget.GT_FOREGROUND) -> np.ndarray:
    g, _, _ = _input_gradient(model, images, gts, target, ReluMode.GUIDED)
    return np.abs(g)


def input_x_gradient(model, images, gts=None, target=SaliencyTarget.GT_FOREGROUND) -> np.ndarray:
    g, x, _ = _input_gradient(model, images, gts, target, ReluMode.STANDARD)
    return np.abs(g * x)


def resize_bilinear(maps: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of ``[B,h,w]`` maps to ``[B,size,size]`` with pixel-centre alignment."""
    b, h, w = maps.shape
    if (h, w) == (size, size):
        return maps.copy()
    rows = np.clip((np.arange(size) + 0.5) * h / size - 0.5, 0, h - 1)
    cols = np.clip((np.arange(size) + 0.5) * w / size - 0.5, 0, w - 1)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    out = np.empty((b, size, size), dtype=maps.dtype)
    for i in range(b):
        out[i] = ndimage.map_coordinates(maps[i].astype(np.float64), [rr, cc], order=1, mode="nearest")
    return out


def gradcam(model, images, gts=None, target=SaliencyTarget.GT_FOREGROUND,
            layer_id: Optional[str] = None) -> np.ndarray:
    layer_id = layer_id or getattr(model, "cam_layer", None)
    if layer_id is None:
        raise KeyError("gradcam needs a layer id")
    _, x, handle = _input_gradient(model, images, gts, target, ReluMode.STANDARD, capture=layer_id)
    acts = handle.activation
    grads = handle.gradient
    if grads is None:
        grads = np.zeros_like(acts)
    weights = grads.mean(axis=(2, 3))
    cam = np.maximum((weights[:, :, None, None] * acts).sum(axis=1), 0)
    return np.maximum(resize_bilinear(cam, x.shape[-1]), 0).astype(T.DTYPE)


def minmax_normalize(maps: np.ndarray) -> np.ndarray:
    """Scale each map to [0,1]; a constant map becomes all ones if positive, else all zeros."""
    out = np.zeros_like(maps)
    for i, m in enumerate(maps):
        lo, hi = m.min(), m.max()
        if hi > lo:
            out[i] = (m - lo) / (hi - lo)
        elif hi > 0:
            out[i] = 1
    return out


def guided_gradcam(model, images, gts=None, target=SaliencyTarget.GT_FOREGROUND,
                   layer_id: Optional[str] = None) -> np.ndarray:
    guided = guided_backprop(model, images, gts, target)
    cam = gradcam(model, images, gts, target, layer_id)
    return guided * minmax_normalize(cam)


_DISPATCH = {
    InterpretMethod.VANILLA: vanilla_backprop,
    InterpretMethod.DECONVNET: deconvnet,
    InterpretMethod.GUIDED: guided_backprop,
    InterpretMethod.INPUTXGRAD: input_x_gradient,
    InterpretMethod.GRADCAM: gradcam,
    InterpretMethod.GUIDED_GRADCAM: guided_gradcam,
}


def saliency_batch(method, model, images, gts=None, target=SaliencyTarget.GT_FOREGROUND,
                   layer_id: Optional[str] = None, batch_size: int = 16) -> np.ndarray:
    """Nonnegative maps ``[B,n,n]`` for a stack of images."""
    method = InterpretMethod(method)
    fn = _DISPATCH[method]
    images = _batch(images)
    gts = None if gts is None else np.asarray(gts).reshape(images.shape)
    out = []
    for s in range(0, len(images), batch_size):
        g = None if gts is None else gts[s:s + batch_size]
        if method in (InterpretMethod.GRADCAM, InterpretMethod.GUIDED_GRADCAM):
            out.append(fn(model, images[s:s + batch_size], g, target, layer_id))
        else:
            out.append(fn(model, images[s:s + batch_size], g, target))
    maps = np.concatenate(out).astype(T.DTYPE)
    if not np.all(np.isfinite(maps)):
        raise FloatingPointError(f"{method.value}: non-finite saliency values")
    return maps


def compute_saliency(method, model, image, gt=None, target=SaliencyTarget.GT_FOREGROUND,
                     layer_id: Optional[str] = None) -> SaliencyMap:
    """Saliency of a single ``n x n`` image."""
    values = saliency_batch(method, model, np.asarray(image)[None], None if gt is None else np.asarray(gt)[None],
                            target, layer_id)[0]
    return SaliencyMap(values, InterpretMethod(method), SaliencyTarget(target))
