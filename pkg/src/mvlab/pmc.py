"""Per-token moment crossover (PMC) augmentation.

A training-time feature augmentation applied at a stage seam inside the
network: each spatial token's channel vector is normalized to zero mean and
unit variance, then one sample's normalized features are recombined with a
partner sample's token moments. Labels of both partners enter a convex
mixed loss. Config keys: pmc.enabled, pmc.lambda, pmc.stage,
pmc.probability, pmc.eps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor


@dataclass
class MomentTriple:
    """Per-token first moment, second moment, and normalized features."""

    mu: Tensor       # (N, 1, h, w)
    sigma: Tensor    # (N, 1, h, w), > 0
    z_norm: Tensor   # (N, C, h, w)


@dataclass
class PmcConfig:
    lam: float = 0.5
    apply_stage: int = 1
    apply_probability: float = 0.5
    eps: float = 1e-5

    def __post_init__(self):
        if not (0.0 < self.lam < 1.0):
            raise ConfigError(f"pmc.lambda must be inside (0, 1), got {self.lam}")
        if self.apply_stage not in (1, 2, 3):
            raise ConfigError(f"pmc.stage must be 1, 2 or 3, got {self.apply_stage}")
        if not (0.0 <= self.apply_probability <= 1.0):
            raise ConfigError(f"pmc.probability must be in [0, 1], got {self.apply_probability}")
        if self.eps <= 0:
            raise ConfigError("pmc.eps must be positive")


def extract_moments(z: Tensor, eps: float = 1e-5) -> MomentTriple:
    """Mean/std over the channel axis per (n, h, w) token, plus the
    normalized map; differentiable. Needs at least two channels."""
    if z.ndim != 4 or z.shape[1] < 2:
        raise ShapeError(f"extract_moments needs (N, C>=2, h, w), got {z.shape}")
    mu = T.mean_(z, axis=1, keepdims=True)
    var = T.mean_(T.mul(T.sub(z, mu), T.sub(z, mu)), axis=1, keepdims=True)
    sigma = T.sqrt(T.add(var, Tensor(np.full(var.shape, eps, dtype=z.dtype))))
    z_norm = T.div(T.sub(z, mu), sigma)
    return MomentTriple(mu=mu, sigma=sigma, z_norm=z_norm)


def mix_features(triple_a: MomentTriple, triple_b: MomentTriple) -> Tensor:
    """Normalized features of A re-dressed with B's token moments:
    sigma_B * z_norm_A + mu_B. Gradient flows into both branches."""
    if triple_a.z_norm.shape != triple_b.z_norm.shape:
        raise ShapeError(
            f"mix_features shape mismatch: {triple_a.z_norm.shape} vs {triple_b.z_norm.shape}"
        )
    return T.add(T.mul(triple_b.sigma, triple_a.z_norm), triple_b.mu)


def mixed_loss(logits: Tensor, y_a, y_b, lam: float, task: str = "multiclass") -> Tensor:
    """Convex combination lam * L(logits, y_a) + (1 - lam) * L(logits, y_b)."""
    from .train import classification_loss

    if not (0.0 < lam < 1.0):
        raise ConfigError(f"lambda must be inside (0, 1), got {lam}")
    la = classification_loss(logits, y_a, task)
    lb = classification_loss(logits, y_b, task)
    lam_t = Tensor(np.asarray(lam, dtype=logits.dtype))
    one_minus = Tensor(np.asarray(1.0 - lam, dtype=logits.dtype))
    return T.add(T.mul(lam_t, la), T.mul(one_minus, lb))


def pmc_step(features: Tensor, labels: np.ndarray, cfg: PmcConfig, rng: np.random.Generator):
    """Apply moment crossover to a batch with the configured probability.

    Returns (features', (labels_a, labels_b), permutation). When the draw
    skips augmentation the inputs pass through with the identity
    permutation. Self-pairs from the random permutation are harmless
    identity mixes.
    """
    n = features.shape[0]
    apply = rng.random() < cfg.apply_probability
    if not apply:
        return features, (labels, labels), np.arange(n)
    if n < 2:
        raise ShapeError("pmc_step needs a batch of at least 2 to mix")
    perm = rng.permutation(n)
    partner = T.index_select(features, perm, axis=0)
    mixed = mix_features(extract_moments(features, cfg.eps),
                         extract_moments(partner, cfg.eps))
    return mixed, (labels, labels[perm]), perm
