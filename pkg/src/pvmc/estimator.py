"""scikit-learn style front end: ``PVMCDenoiser().fit(X, y).predict(X)``.

X and y are stacks of 2-D images shaped (n, H, W). The learned Poisson slope
is exposed as ``k_`` after fitting.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from . import diagnostics as dg
from .denoiser import NetConfig
from .exceptions import ConfigurationError
from .simulator import Dataset, ImagePair
from .trainer import TrainConfig, train


def check_images(X, name: str = "X", min_images: int = 1) -> np.ndarray:
    """Coerce to a finite float64 (n, H, W) stack; a single 2-D image becomes n=1."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    elif arr.ndim == 4 and arr.shape[1] == 1:
        arr = arr[:, 0]
    if arr.ndim != 3:
        raise ConfigurationError(f"{name} must be (n, H, W), got shape {np.shape(X)}")
    if arr.shape[0] < min_images:
        raise ConfigurationError(f"{name} needs at least {min_images} image(s)")
    if not np.all(np.isfinite(arr)):
        raise ConfigurationError(f"{name} contains non-finite values")
    return arr


def check_image_pairs(X, y) -> tuple[np.ndarray, np.ndarray]:
    X = check_images(X, "X")
    y = check_images(y, "y")
    if X.shape != y.shape:
        raise ConfigurationError(f"X and y shapes differ: {X.shape} vs {y.shape}")
    return X, y


def _as_dataset(X, y, k_ref) -> Dataset:
    pairs = [ImagePair(a, b, b, -1, -1, -1) for a, b in zip(X, y)]
    return Dataset(pairs, k_ref, 1.0, 1.0, "external", "external", -1)


class PVMCDenoiser(RegressorMixin, BaseEstimator):
    """U-Net denoiser trained with L1 + lambda * PVMC and a learnable k.

    ``validation_fraction`` of the pairs (at least one) is held out for
    checkpoint selection. ``score`` returns mean PSNR in dB.
    """

    def __init__(self, depth=3, base_channels=8, epochs=200, batch_size=8, lr=2e-3, lambda_weight=1e-3,
                 patch_size=16, k_init=0.8, validation_fraction=0.25, stop_gradient_mean=False,
                 random_state=3407):
        self.depth = depth
        self.base_channels = base_channels
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lambda_weight = lambda_weight
        self.patch_size = patch_size
        self.k_init = k_init
        self.validation_fraction = validation_fraction
        self.stop_gradient_mean = stop_gradient_mean
        self.random_state = random_state

    def _configs(self) -> tuple[NetConfig, TrainConfig]:
        if not 0 < self.validation_fraction < 1:
            raise ConfigurationError("validation_fraction must lie in (0, 1)")
        net = NetConfig(depth=self.depth, base_channels=self.base_channels)
        cfg = TrainConfig.toy(epochs=self.epochs, batch_size=self.batch_size, lr_initial=self.lr,
                              lambda_weight=self.lambda_weight, patch_size=(self.patch_size, self.patch_size),
                              k_init=self.k_init, stop_gradient_mean=self.stop_gradient_mean,
                              seed=int(self.random_state))
        return net, cfg

    def fit(self, X, y):
        X, y = check_image_pairs(X, y)
        if len(X) < 2:
            raise ConfigurationError("need at least two image pairs (one is held out for validation)")
        net, cfg = self._configs()
        n_val = max(1, int(round(len(X) * self.validation_fraction)))
        order = np.random.default_rng(cfg.seed).permutation(len(X))
        val_idx, tr_idx = order[:n_val], order[n_val:]
        data = _as_dataset(X, y, float("nan"))
        self.run_ = train(data.subset(tr_idx), data.subset(val_idx), net, cfg)
        self.model_ = self.run_.model("best")
        self.k_ = self.run_.best_k
        self.n_features_in_ = X.shape[1] * X.shape[2]
        self.image_shape_ = X.shape[1:]
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X)
        if X.shape[1:] != self.image_shape_:
            raise ConfigurationError(f"fitted on {self.image_shape_} images, got {X.shape[1:]}")
        return self.model_.predict(X).astype(np.float64)

    def score(self, X, y, sample_weight=None) -> float:
        X, y = check_image_pairs(X, y)
        psnrs = np.array(dg.quality_report(self.predict(X), y).psnr)
        return float(np.average(psnrs, weights=sample_weight))

    def consistency(self, X, patch_size=None) -> dg.ConsistencyReport:
        """Distribution of the variance-mean ratio pi_p on ``X`` at the learned k."""
        check_is_fitted(self, "model_")
        s = patch_size or self.patch_size
        return dg.consistency_ratio(self.model_, self.k_, check_images(X), (s, s))

    def _more_tags(self):
        return {"multioutput": True, "requires_y": True}


__all__ = ["PVMCDenoiser", "check_images", "check_image_pairs"]
