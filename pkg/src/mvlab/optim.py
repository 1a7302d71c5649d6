"""AdamW with decoupled weight decay, and the stepped LR schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError


def _decays(name: str) -> bool:
    # Biases and BatchNorm gamma/beta stay out of weight decay.
    leaf = name.rsplit(".", 1)[-1]
    return leaf == "weight" or leaf.endswith("_w")


class AdamW:
    """Decoupled weight decay: p -= lr*wd*p alongside p -= lr*m_hat/(sqrt(v_hat)+eps),
    both computed from the pre-step parameter value."""

    def __init__(self, named_params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.05):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.slots = []
        for name, p in named_params:
            self.slots.append(
                (name, p, np.zeros_like(p.data), np.zeros_like(p.data), _decays(name))
            )

    def step(self, lr=None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p, m, v, decays in self.slots:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ShapeError(f"grad shape {g.shape} != param shape {p.data.shape} for {name}")
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {name}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / bc1
            v_hat = v / bc2
            update = lr * m_hat / (np.sqrt(v_hat) + self.eps)
            if decays and self.weight_decay:
                update = update + lr * self.weight_decay * p.data
            p.data = p.data - update


def adamw_step(optimizer: AdamW, lr=None) -> None:
    optimizer.step(lr)


@dataclass
class Schedule:
    """base_lr decayed by `gamma` at each milestone epoch."""

    base_lr: float = 1e-3
    milestones: tuple = (50, 75)
    gamma: float = 0.1

    def __post_init__(self):
        ms = list(self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must be strictly increasing, got {ms}")


def lr_at(schedule: Schedule, epoch: int) -> float:
    hits = sum(1 for m in schedule.milestones if m <= epoch)
    return schedule.base_lr * schedule.gamma ** hits
