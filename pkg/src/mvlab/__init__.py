"""mvlab: a self-contained vision-learning laboratory.

Numpy-backed reverse-mode autograd, a hybrid convolution/attention pyramid
classifier family, token-moment crossover augmentation, an FGSM/PGD
robustness harness, and desk-scale training/evaluation tooling.
"""

__version__ = "0.1.0"

from .attacks import AttackConfig, fgsm, pgd, robust_accuracy
from .audit import AuditReport, count_flops, grad_cam
from .checkpoint import load_checkpoint, save_checkpoint
from .data import load_dataset, make_synthetic, normalize, resize_bilinear
from .errors import MvlabError
from .estimator import HybridNetClassifier
from .gradcheck import finite_difference_check
from .metrics import compute_metrics
from .model import (
    HybridNet,
    ModelConfig,
    StageSpec,
    build_model,
    count_params,
    img2seq,
    seq2img,
    standard_config,
)
from .optim import AdamW, Schedule, adamw_step, lr_at
from .pmc import PmcConfig, extract_moments, mix_features, mixed_loss, pmc_step
from .tensor import Tensor, backward, forward_primitive, no_grad, zero_grads
from .train import TrainConfig, classification_loss, evaluate, train

__all__ = [
    "AdamW", "AttackConfig", "AuditReport", "HybridNet", "HybridNetClassifier",
    "ModelConfig", "MvlabError", "PmcConfig", "Schedule", "StageSpec", "Tensor",
    "TrainConfig", "adamw_step", "backward", "build_model", "classification_loss",
    "compute_metrics", "count_flops", "count_params", "evaluate", "extract_moments",
    "fgsm", "finite_difference_check", "forward_primitive", "grad_cam", "img2seq",
    "load_checkpoint", "load_dataset", "lr_at", "make_synthetic", "mix_features",
    "mixed_loss", "no_grad", "normalize", "pgd", "pmc_step", "resize_bilinear",
    "robust_accuracy", "save_checkpoint", "seq2img", "standard_config", "train",
    "zero_grads",
]
