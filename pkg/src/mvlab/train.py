"""Classification losses, the training loop, and evaluation."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .data import Prefetcher, normalize
from .errors import ConfigError, NumericError, ShapeError
from .metrics import MetricReport, compute_metrics
from .model import HybridNet, ModelConfig
from .optim import AdamW, Schedule, lr_at
from .pmc import PmcConfig, mixed_loss, pmc_step
from .tensor import Tensor, backward, no_grad


def classification_loss(logits: Tensor, labels, task: str = "multiclass") -> Tensor:
    """Softmax cross-entropy for multiclass labels, mean sigmoid BCE for
    multilabel 0/1 targets."""
    n, k = logits.shape
    if task == "multiclass":
        y = np.asarray(labels).reshape(-1)
        if y.shape[0] != n:
            raise ShapeError(f"{y.shape[0]} labels for {n} logits rows")
        if y.size and (y.min() < 0 or y.max() >= k):
            raise ConfigError(f"label out of range for {k} classes")
        onehot = np.zeros((n, k), dtype=logits.dtype)
        onehot[np.arange(n), y] = 1
        picked = T.mul(T.log_softmax(logits, axis=1), Tensor(onehot))
        return T.neg(T.div(T.sum_(picked), Tensor(np.asarray(n, dtype=logits.dtype))))
    if task == "multilabel":
        y = np.asarray(labels, dtype=logits.dtype).reshape(n, k)
        # Stable elementwise BCE-with-logits: softplus(x) - x*y.
        per = T.sub(T.softplus(logits), T.mul(logits, Tensor(y)))
        return T.mean_(per)
    raise ValueError(f"unknown task {task!r}")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 128
    base_lr: float = 1e-3
    milestones: tuple = (50, 75)
    lr_gamma: float = 0.1
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    pmc: Optional[PmcConfig] = None          # None disables the augmentation
    norm_mean: float = 0.5
    norm_std: float = 0.5
    max_steps: Optional[int] = None
    stop_at_train_acc: Optional[float] = None
    prefetch_slots: int = 1


@dataclass
class TrainResult:
    epoch_log: list = field(default_factory=list)   # dicts: epoch, lr, train_loss, val_acc, val_auc
    step_losses: list = field(default_factory=list)
    steps: int = 0
    best_val_auc: float = float("nan")
    best_epoch: int = -1
    final_train_acc: float = float("nan")
    final_val: Optional[MetricReport] = None
    checkpoint_path: Optional[str] = None


def predict_scores(model: HybridNet, dataset, indices, *, input_size, task,
                   norm_mean=0.5, norm_std=0.5, batch_size=64, dtype=np.float32) -> np.ndarray:
    """Forward a split in eval mode and return class probabilities."""
    was_training = model.training
    model.eval()
    outs = []
    try:
        with no_grad():
            for start in range(0, len(indices), batch_size):
                idx = indices[start : start + batch_size]
                px = dataset.pixel_batch(idx, size=input_size, dtype=dtype)
                x = Tensor(normalize(px, norm_mean, norm_std))
                logits = model(x).data
                if task == "multiclass":
                    shifted = logits - logits.max(axis=1, keepdims=True)
                    e = np.exp(shifted)
                    outs.append(e / e.sum(axis=1, keepdims=True))
                else:
                    outs.append(1.0 / (1.0 + np.exp(-logits)))
    finally:
        model.train(was_training)
    return np.concatenate(outs, axis=0)


def evaluate(model: HybridNet, dataset, split: str, *, input_size, batch_size=64,
             norm_mean=0.5, norm_std=0.5, dtype=np.float32) -> MetricReport:
    indices = dataset.split_indices(split)
    if len(indices) == 0:
        raise ConfigError(f"split {split!r} is empty")
    task = dataset.label_kind
    scores = predict_scores(model, dataset, indices, input_size=input_size, task=task,
                            norm_mean=norm_mean, norm_std=norm_std,
                            batch_size=batch_size, dtype=dtype)
    return compute_metrics(scores, dataset.labels_for(indices), task)


def train(model: HybridNet, model_cfg: ModelConfig, dataset, cfg: TrainConfig,
          out_dir: Optional[str] = None) -> TrainResult:
    """Seeded, deterministic loop: shuffle, batch, forward (with the moment
    crossover hook when enabled), loss, backward, optimizer step. Validation
    runs every epoch; the best-by-val-AUC checkpoint is written to
    ``out_dir`` along with an epoch CSV log.
    """
    rng = np.random.default_rng(cfg.seed)
    dtype = model_cfg.np_dtype()
    task = dataset.label_kind
    train_idx = dataset.split_indices("train")
    if len(train_idx) == 0:
        raise ConfigError("training split is empty")
    has_val = len(dataset.split_indices("val")) > 0
    schedule = Schedule(cfg.base_lr, tuple(cfg.milestones), cfg.lr_gamma)
    opt = AdamW(model.named_parameters(), lr=cfg.base_lr, betas=cfg.betas,
                eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
    result = TrainResult()
    ckpt_path = os.path.join(out_dir, "best.mvwt") if out_dir else None
    csv_path = os.path.join(out_dir, "epochs.csv") if out_dir else None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    best_auc = -np.inf

    for epoch in range(cfg.epochs):
        lr = lr_at(schedule, epoch)
        model.train(True)
        order = train_idx[rng.permutation(len(train_idx))]
        batches = [order[s : s + cfg.batch_size] for s in range(0, len(order), cfg.batch_size)]

        def fetch(idx):
            return idx, dataset.pixel_batch(idx, size=model_cfg.input_size, dtype=dtype)

        epoch_losses = []
        prefetcher = Prefetcher(fetch, batches, slots=cfg.prefetch_slots)
        try:
            for idx, px in prefetcher:
                labels = dataset.labels_for(idx)
                x = Tensor(normalize(px, cfg.norm_mean, cfg.norm_std))
                mixed_labels = {}
                if cfg.pmc is not None and len(idx) >= 2:

                    def hook(feats):
                        out, pair, perm = pmc_step(feats, labels, cfg.pmc, rng)
                        mixed_labels["pair"] = pair
                        return out

                    logits = model(x, feature_hook=hook, hook_stage=cfg.pmc.apply_stage)
                else:
                    logits = model(x)
                if "pair" in mixed_labels:
                    y_a, y_b = mixed_labels["pair"]
                    loss = mixed_loss(logits, y_a, y_b, cfg.pmc.lam, task)
                else:
                    loss = classification_loss(logits, labels, task)
                value = loss.item()
                if not np.isfinite(value):
                    raise NumericError(
                        f"non-finite loss {value} at epoch {epoch} step {result.steps}"
                    )
                model.zero_grads()
                backward(loss)
                opt.step(lr)
                epoch_losses.append(value)
                result.step_losses.append(value)
                result.steps += 1
                if cfg.max_steps is not None and result.steps >= cfg.max_steps:
                    break
        finally:
            prefetcher.close()

        train_report = evaluate(model, dataset, "train", input_size=model_cfg.input_size,
                                batch_size=max(cfg.batch_size, 64),
                                norm_mean=cfg.norm_mean, norm_std=cfg.norm_std, dtype=dtype)
        result.final_train_acc = train_report.acc
        val_report = None
        if has_val:
            val_report = evaluate(model, dataset, "val", input_size=model_cfg.input_size,
                                  batch_size=max(cfg.batch_size, 64),
                                  norm_mean=cfg.norm_mean, norm_std=cfg.norm_std, dtype=dtype)
            result.final_val = val_report
        row = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": float(np.mean(epoch_losses)) if epoch_losses else float("nan"),
            "val_acc": val_report.acc if val_report else float("nan"),
            "val_auc": val_report.auc if val_report else float("nan"),
        }
        result.epoch_log.append(row)
        score = val_report.auc if val_report else train_report.auc
        if np.isfinite(score) and score > best_auc:
            best_auc = score
            result.best_val_auc = score
            result.best_epoch = epoch
            if ckpt_path:
                save_checkpoint(model, model_cfg, ckpt_path)
                result.checkpoint_path = ckpt_path
        done = (cfg.max_steps is not None and result.steps >= cfg.max_steps) or (
            cfg.stop_at_train_acc is not None and train_report.acc >= cfg.stop_at_train_acc
        )
        if done:
            break

    if csv_path:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["epoch", "lr", "train_loss", "val_acc", "val_auc"])
            writer.writeheader()
            writer.writerows(result.epoch_log)
    return result
