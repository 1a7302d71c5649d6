"""Scikit-learn-style front door: fit/predict on image arrays.

Wraps config building, training and scoring so the classifier drops into
pipelines that expect the estimator protocol (get_params/set_params,
fit returns self, NotFittedError before fit).
"""

from __future__ import annotations

import numpy as np

from .data import ArrayDataset
from .errors import ConfigError, NotFittedError
from .model import build_model, standard_config
from .pmc import PmcConfig
from .train import TrainConfig, predict_scores, train


def check_images(X) -> np.ndarray:
    """Validate and canonicalize an image batch to float32 (N, C, H, W) in [0, 1]."""
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ConfigError(f"X must be (N, H, W) or (N, C, H, W), got shape {X.shape}")
    if X.shape[0] == 0:
        raise ConfigError("X is empty")
    if X.dtype == np.uint8:
        X = X.astype(np.float32) / np.float32(255)
    X = X.astype(np.float32, copy=False)
    if not np.all(np.isfinite(X)):
        raise ConfigError("X contains non-finite values")
    if X.min() < 0 or X.max() > 1:
        raise ConfigError("float images must lie in [0, 1] (or pass uint8)")
    return X


def check_labels(y, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Return (encoded labels, sorted class values)."""
    y = np.asarray(y).reshape(-1)
    if y.shape[0] != n:
        raise ConfigError(f"{y.shape[0]} labels for {n} samples")
    classes = np.unique(y)
    if classes.size < 2:
        raise ConfigError("need at least two classes")
    encoded = np.searchsorted(classes, y)
    return encoded.astype(np.int64), classes


class HybridNetClassifier:
    """Image classifier with the estimator protocol.

    Parameters mirror the training configuration; `variant` picks the
    backbone size ('toy', 't', 's', 'l') and `pmc` toggles the token-moment
    crossover augmentation.
    """

    def __init__(self, variant="toy", epochs=10, batch_size=16, base_lr=2e-3,
                 weight_decay=0.05, seed=0, pmc=False, pmc_lambda=0.5,
                 pmc_stage=1, pmc_probability=0.5, input_size=None,
                 val_fraction=0.15, norm_mean=0.5, norm_std=0.5):
        self.variant = variant
        self.epochs = epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.weight_decay = weight_decay
        self.seed = seed
        self.pmc = pmc
        self.pmc_lambda = pmc_lambda
        self.pmc_stage = pmc_stage
        self.pmc_probability = pmc_probability
        self.input_size = input_size
        self.val_fraction = val_fraction
        self.norm_mean = norm_mean
        self.norm_std = norm_std

    _PARAM_NAMES = (
        "variant", "epochs", "batch_size", "base_lr", "weight_decay", "seed",
        "pmc", "pmc_lambda", "pmc_stage", "pmc_probability", "input_size",
        "val_fraction", "norm_mean", "norm_std",
    )

    def get_params(self, deep=True) -> dict:
        return {name: getattr(self, name) for name in self._PARAM_NAMES}

    def set_params(self, **params):
        for key, value in params.items():
            if key not in self._PARAM_NAMES:
                raise ConfigError(f"unknown parameter {key!r}")
            setattr(self, key, value)
        return self

    def fit(self, X, y):
        X = check_images(X)
        encoded, self.classes_ = check_labels(y, X.shape[0])
        self.config_ = standard_config(self.variant, num_classes=int(self.classes_.size),
                                       input_size=self.input_size)
        rng = np.random.default_rng(self.seed)
        n = X.shape[0]
        splits = np.zeros(n, dtype=np.uint8)
        n_val = int(round(n * self.val_fraction))
        if n_val:
            splits[rng.permutation(n)[:n_val]] = 1
        dataset = ArrayDataset(X, encoded, n_classes=int(self.classes_.size), splits=splits)
        self.model_ = build_model(self.config_, seed=self.seed)
        pmc_cfg = PmcConfig(lam=self.pmc_lambda, apply_stage=self.pmc_stage,
                            apply_probability=self.pmc_probability) if self.pmc else None
        tcfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                           base_lr=self.base_lr, milestones=(), seed=self.seed,
                           weight_decay=self.weight_decay, pmc=pmc_cfg,
                           norm_mean=self.norm_mean, norm_std=self.norm_std)
        self.train_result_ = train(self.model_, self.config_, dataset, tcfg)
        self.model_.eval()
        return self

    def _require_fit(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit() first")

    def predict_proba(self, X) -> np.ndarray:
        self._require_fit()
        X = check_images(X)
        dataset = ArrayDataset(X, np.zeros(X.shape[0], dtype=np.int64),
                               n_classes=int(self.classes_.size))
        return predict_scores(self.model_, dataset, np.arange(X.shape[0]),
                              input_size=self.config_.input_size, task="multiclass",
                              norm_mean=self.norm_mean, norm_std=self.norm_std,
                              batch_size=max(self.batch_size, 64))

    def predict(self, X) -> np.ndarray:
        self._require_fit()
        return self.classes_[self.predict_proba(X).argmax(axis=1)]

    def score(self, X, y) -> float:
        preds = self.predict(X)
        y = np.asarray(y).reshape(-1)
        if y.shape[0] != preds.shape[0]:
            raise ConfigError(f"{y.shape[0]} labels for {preds.shape[0]} samples")
        return float((preds == y).mean())
