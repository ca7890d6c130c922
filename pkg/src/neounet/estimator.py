"""scikit-learn style wrapper around the NeoUNet training/inference stack."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import ArrayDataset, AugmentationPolicy, make_batch
from .losses import LossConfig
from .metrics import ConfusionAccumulator
from .network import NetworkConfig, infer_labels
from .training import TrainConfig, build_model, fit as fit_model


def check_images(X) -> np.ndarray:
    """Validate an image stack ``(N, H, W, 3)``; uint8 is rescaled to [0, 1]."""
    X = np.asarray(X)
    if X.ndim == 3 and X.shape[-1] == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"expected images of shape (N, H, W, 3), got {X.shape}")
    if len(X) == 0:
        raise ValueError("empty image array")
    if X.dtype == np.uint8:
        return X.astype(np.float32) / 255.0
    X = X.astype(np.float32)
    if not np.isfinite(X).all() or X.min() < 0 or X.max() > 1:
        raise ValueError("float images must be finite and lie in [0, 1]")
    return X


def check_masks(y, X=None) -> np.ndarray:
    """Validate label maps ``(N, H, W)`` with values in {0, 1, 2, 3}."""
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[None]
    if y.ndim != 3:
        raise ValueError(f"expected label maps of shape (N, H, W), got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.array_equal(y, np.round(y)):
            raise ValueError("labels must be integers")
    if y.size and (y.min() < 0 or y.max() > 3):
        raise ValueError("labels must lie in {0, 1, 2, 3}")
    if X is not None and y.shape != X.shape[:3]:
        raise ValueError(f"labels {y.shape} do not match images {X.shape[:3]}")
    return y.astype(np.uint8)


class NeoUNetSegmenter(BaseEstimator):
    """Joint polyp segmentation and neoplasm classification.

    ``fit(X, y)`` takes RGB images ``(N, H, W, 3)`` and label maps ``(N, H, W)``
    (0 background, 1 non-neoplastic, 2 neoplastic, 3 unknown). ``predict``
    returns label maps in {0, 1, 2} at the input resolution.

    Parameters mirror :class:`TrainConfig`; ``architecture`` is ``"hardnet68"``
    or ``"tiny"`` (a narrow variant for quick experiments).
    """

    def __init__(self, architecture="hardnet68", epochs=105, warmup_epochs=5, base_lr=0.001,
                 momentum=0.9, batch_size=8, scales=(448, 352, 256), eval_size=352,
                 threshold=0.5, alpha=0.3, gamma=4 / 3, w_c=0.75, w_s=0.25,
                 augment=True, seed=0, device="cpu"):
        self.architecture = architecture
        self.epochs = epochs
        self.warmup_epochs = warmup_epochs
        self.base_lr = base_lr
        self.momentum = momentum
        self.batch_size = batch_size
        self.scales = scales
        self.eval_size = eval_size
        self.threshold = threshold
        self.alpha = alpha
        self.gamma = gamma
        self.w_c = w_c
        self.w_s = w_s
        self.augment = augment
        self.seed = seed
        self.device = device

    def _network_config(self):
        if self.architecture == "hardnet68":
            return NetworkConfig()
        if self.architecture == "tiny":
            return NetworkConfig.tiny()
        raise ValueError(f"unknown architecture {self.architecture!r}")

    def _train_config(self):
        loss = LossConfig(alpha=self.alpha, beta=1 - self.alpha, gamma=self.gamma,
                          w_c=self.w_c, w_s=self.w_s)
        return TrainConfig(base_lr=self.base_lr, momentum=self.momentum,
                           warmup_epochs=self.warmup_epochs, total_epochs=self.epochs,
                           batch_size=self.batch_size, seed=self.seed, scales=tuple(self.scales),
                           eval_size=self.eval_size, threshold=self.threshold, loss=loss)

    def fit(self, X, y, X_valid=None, y_valid=None):
        X = check_images(X)
        y = check_masks(y, X)
        config = self._train_config()
        policy = AugmentationPolicy() if self.augment else None
        train = ArrayDataset(X, y, policy, self.seed)
        if X_valid is None:
            valid = ArrayDataset(X, y)
        else:
            X_valid = check_images(X_valid)
            valid = ArrayDataset(X_valid, check_masks(y_valid, X_valid))
        model = build_model(self._network_config(), self.seed)
        best_state, history = fit_model(model, train, valid, config, device=self.device)
        model.load_state_dict(best_state)
        self.model_ = model.eval()
        self.history_ = history
        self.n_features_in_ = 3
        return self

    def predict_proba(self, X):
        """Finest-head probabilities ``(N, 2, H, W)`` at input resolution."""
        check_is_fitted(self, "model_")
        X = check_images(X)
        out = []
        with torch.no_grad():
            for image in X:
                batch, _ = make_batch([(image, None)], self.eval_size, allowed_scales=None)
                head = self.model_(batch.to(self.device))[-1]
                head = torch.nn.functional.interpolate(head, size=image.shape[:2],
                                                       mode="bilinear", align_corners=False)
                out.append(head[0].cpu().numpy())
        return np.stack(out)

    def predict(self, X):
        proba = torch.from_numpy(self.predict_proba(X))
        return infer_labels(proba, self.threshold).numpy()

    def score(self, X, y):
        """Micro-averaged segmentation Dice over all images."""
        X = check_images(X)
        y = check_masks(y, X)
        acc = ConfusionAccumulator()
        for pred, truth in zip(self.predict(X), y):
            acc.accumulate(pred, truth)
        return acc.dice("seg")
