"""White-box L-infinity attacks (one-step and iterative sign ascent) and
robust-accuracy evaluation.

Attacks operate on raw pixels in [clip_min, clip_max] *before* dataset
normalization; the model function passed in must own the normalization so
gradients reach the pixel space where epsilon is defined.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Iterable, Optional

import numpy as np

from .errors import ConfigError, NumericError
from .tensor import Tensor, backward, no_grad
from .train import classification_loss

ModelFn = Callable[[Tensor], Tensor]  # raw pixel batch -> logits


@dataclass
class AttackConfig:
    epsilon: float = 8 / 255
    step_size: float = 4 / 255
    n_iter: int = 5
    clip_min: float = 0.0
    clip_max: float = 1.0
    random_start: bool = False

    def __post_init__(self):
        # epsilon 0 is allowed as the degenerate identity attack
        if self.epsilon < 0 or self.step_size <= 0 or self.n_iter < 1:
            raise ConfigError(
                f"attack needs epsilon >= 0, step_size > 0, n_iter >= 1 "
                f"(got {self.epsilon}, {self.step_size}, {self.n_iter})"
            )
        if self.clip_min >= self.clip_max:
            raise ConfigError(f"clip range empty: [{self.clip_min}, {self.clip_max}]")


def _loss_input_grad(model_fn: ModelFn, x: np.ndarray, labels, task: str) -> np.ndarray:
    probe = Tensor(x.copy(), requires_grad=True)
    loss = classification_loss(model_fn(probe), labels, task)
    if not np.isfinite(loss.item()):
        raise NumericError(f"non-finite attack loss {loss.item()}")
    backward(loss)
    return probe.grad if probe.grad is not None else np.zeros_like(x)


def pgd(model_fn: ModelFn, x, labels, cfg: AttackConfig, task: str = "multiclass",
        rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Iterated projected sign ascent inside the epsilon ball intersected
    with the pixel range. Deterministic unless random_start is set."""
    x0 = np.asarray(x)
    lo = np.maximum(x0 - cfg.epsilon, cfg.clip_min)
    hi = np.minimum(x0 + cfg.epsilon, cfg.clip_max)
    adv = x0.copy()
    if cfg.random_start:
        if rng is None:
            raise ConfigError("random_start needs an rng")
        adv = np.clip(adv + rng.uniform(-cfg.epsilon, cfg.epsilon, size=adv.shape).astype(adv.dtype), lo, hi)
    for _ in range(cfg.n_iter):
        g = _loss_input_grad(model_fn, adv, labels, task)
        adv = np.clip(adv + np.asarray(cfg.step_size, dtype=adv.dtype) * np.sign(g), lo, hi)
    return adv


def fgsm(model_fn: ModelFn, x, labels, cfg: AttackConfig, task: str = "multiclass") -> np.ndarray:
    """Single sign step of size epsilon: clip(x + eps * sign(grad)).
    Exactly the n_iter=1, step=epsilon case of pgd (bit-identical)."""
    one_step = replace(cfg, n_iter=1, step_size=max(cfg.epsilon, np.finfo(np.float32).tiny),
                       random_start=False)
    return pgd(model_fn, x, labels, one_step, task)


_METHODS = {"fgsm": fgsm, "pgd": pgd}


def robust_accuracy(model_fn: ModelFn, batches: Iterable[tuple], cfg: AttackConfig,
                    method: str = "fgsm", task: str = "multiclass",
                    rng: Optional[np.random.Generator] = None) -> dict:
    """Clean vs per-example adversarial accuracy over (pixels, labels)
    batches, attacking the same model that is being scored.

    The model must be in eval mode (frozen BN); robust_acc <= clean_acc is
    reported, never asserted.
    """
    if method not in _METHODS:
        raise ConfigError(f"unknown attack method {method!r}")

    def hits(logits: np.ndarray, labels: np.ndarray) -> float:
        if task == "multiclass":
            return float((logits.argmax(axis=1) == labels).sum())
        # multilabel: per-sample fraction of labels matched at the 0.5
        # probability threshold (logit > 0)
        return float(((logits > 0) == labels.astype(bool)).mean(axis=1).sum())

    n = 0
    clean_hits = 0.0
    robust_hits = 0.0
    for px, labels in batches:
        px = np.asarray(px)
        labels = np.asarray(labels)
        with no_grad():
            clean_logits = model_fn(Tensor(px)).data
        if method == "pgd":
            adv = pgd(model_fn, px, labels, cfg, task, rng)
        else:
            adv = fgsm(model_fn, px, labels, cfg, task)
        with no_grad():
            adv_logits = model_fn(Tensor(adv)).data
        n += len(labels)
        clean_hits += hits(clean_logits, labels)
        robust_hits += hits(adv_logits, labels)
    if n == 0:
        raise ConfigError("robust_accuracy: empty dataset")
    return {"clean_acc": clean_hits / n, "robust_acc": robust_hits / n, "n": n}


def pixel_model(model, norm_mean: float, norm_std: float) -> ModelFn:
    """Wrap a network into a raw-pixel closure that normalizes inside the
    differentiable graph."""
    from .data import normalize

    def fn(px: Tensor) -> Tensor:
        return model(normalize(px, norm_mean, norm_std))

    return fn
