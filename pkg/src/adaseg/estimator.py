"""scikit-learn style wrappers around the U-Net and the ADA training loop.

``X`` is a stack of grayscale images ``[N, n, n]`` in [0, 1]; ``y`` the
matching binary masks. ``predict`` returns binary masks, ``score`` the mean
Dice coefficient (0-100).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import metrics
from .ada import AdaConfig, ada_training
from .augment import AugmentParams
from .data import Dataset
from .unet import AdamState, UNet, UNetConfig, build_unet, load_checkpoint, train_epoch
from .validation import check_image_mask_pair, check_images


def _dataset(X, y, split="train") -> Dataset:
    X, y = check_image_mask_pair(X, y)
    return Dataset([f"{split}_{i:04d}" for i in range(len(X))], X, y, split)


class UNetSegmenter(BaseEstimator):
    """U-Net trained with Adam on pixelwise BCE.

    With ``augment=True`` every epoch sees the originals plus one
    conventionally augmented copy of each.
    """

    def __init__(self, base_channels=8, depth=3, kernel_size=3, dropout=0.5, bn_momentum=0.4,
                 learning_rate=1e-3, batch_size=16, epochs=100, augment=True, random_state=0):
        self.base_channels = base_channels
        self.depth = depth
        self.kernel_size = kernel_size
        self.dropout = dropout
        self.bn_momentum = bn_momentum
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.augment = augment
        self.random_state = random_state

    def _unet_config(self, n: int) -> UNetConfig:
        return UNetConfig(n=n, base_channels=self.base_channels, kernel_size=self.kernel_size,
                          depth=self.depth, dropout=self.dropout, bn_momentum=self.bn_momentum).validate()

    def _init_model(self, n: int, rng):
        self.model_ = build_unet(self._unet_config(n), rng)
        self.adam_state_ = AdamState(lr=self.learning_rate)

    def _ada_config(self) -> AdaConfig:
        return AdaConfig(standard_epochs=self.epochs, cycles=0, ada_epochs=0, batch_size=self.batch_size)

    def fit(self, X, y, eval_set=None):
        """Train from scratch. ``eval_set=(X_val, y_val)`` is scored after every epoch."""
        train = _dataset(X, y)
        val = _dataset(*eval_set, split="val") if eval_set is not None else None
        rng = np.random.default_rng(self.random_state)
        self._init_model(train.n, rng)
        self.input_size_ = train.n
        if self.augment:
            result = ada_training(self.model_, train, self._ada_config(), rng, val=val, state=self.adam_state_)
            self.history_ = result.records
        else:
            self.history_ = []
            for _ in range(self.epochs):
                self.history_.append(train_epoch(self.model_, self.adam_state_, train.images, train.masks,
                                                 self.batch_size, rng))
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.model_.predict_proba(check_images(X, self.input_size_))

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) >= 0.5).astype(np.uint8)

    def score(self, X, y) -> float:
        X, y = check_image_mask_pair(X, y)
        return metrics.aggregate(y, self.predict(X)).dsc

    def evaluate(self, X, y) -> metrics.MetricsReport:
        X, y = check_image_mask_pair(X, y)
        return metrics.aggregate(y, self.predict(X))


class ADASegmenter(UNetSegmenter):
    """U-Net trained with saliency-guided occlusion cycles.

    ``init_model`` may be a fitted :class:`UNetSegmenter`, a :class:`UNet`
    or a checkpoint path; its weights (and Adam moments, when present) seed
    the run, so ``epochs=0`` forks an already trained baseline.
    """

    def __init__(self, method="vanilla", z=20, cycles=31, ada_epochs=30, target="gt", init_model=None,
                 base_channels=8, depth=3, kernel_size=3, dropout=0.5, bn_momentum=0.4,
                 learning_rate=1e-3, batch_size=16, epochs=100, random_state=0):
        self.method = method
        self.z = z
        self.cycles = cycles
        self.ada_epochs = ada_epochs
        self.target = target
        self.init_model = init_model
        self.base_channels = base_channels
        self.depth = depth
        self.kernel_size = kernel_size
        self.dropout = dropout
        self.bn_momentum = bn_momentum
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.random_state = random_state

    def _ada_config(self) -> AdaConfig:
        return AdaConfig(z=self.z, standard_epochs=self.epochs, cycles=self.cycles, ada_epochs=self.ada_epochs,
                         method=self.method, target=self.target, batch_size=self.batch_size)

    def _init_model(self, n, rng):
        init = self.init_model
        if init is None:
            return super()._init_model(n, rng)
        state = None
        if isinstance(init, UNetSegmenter):
            check_is_fitted(init, "model_")
            model, state = init.model_.copy(), _copy_state(init.adam_state_)
        elif isinstance(init, UNet):
            model = init.copy()
        else:
            model, state = load_checkpoint(init)
        if model.config.n != n:
            raise ValueError(f"init_model expects {model.config.n}x{model.config.n} images, got {n}x{n}")
        self.model_ = model
        self.adam_state_ = state or AdamState(lr=self.learning_rate)

    def fit(self, X, y, eval_set=None):
        train = _dataset(X, y)
        val = _dataset(*eval_set, split="val") if eval_set is not None else None
        rng = np.random.default_rng(self.random_state)
        self._init_model(train.n, rng)
        self.input_size_ = train.n
        result = ada_training(self.model_, train, self._ada_config(), rng, val=val, state=self.adam_state_,
                              aug_params=AugmentParams())
        self.history_ = result.records
        return self


def _copy_state(state: AdamState) -> AdamState:
    out = AdamState(lr=state.lr, beta1=state.beta1, beta2=state.beta2, eps=state.eps, t=state.t)
    if state.m is not None:
        out.m = {k: v.copy() for k, v in state.m.items()}
        out.v = {k: v.copy() for k, v in state.v.items()}
    return out
