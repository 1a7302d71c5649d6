"""Command-line entry point.

Subcommands: train, eval, attack, audit, gradcam, synth, selftest.
Config values merge as defaults < config file (key=value lines) < flags.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Every command ends stdout with one machine-readable line:
RESULT key=value ...
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import __version__
from .attacks import AttackConfig, fgsm, pgd, pixel_model, robust_accuracy
from .audit import count_flops, grad_cam, write_pgm
from .checkpoint import load_checkpoint
from .data import load_dataset, make_synthetic, normalize
from .errors import ConfigError, DataError, MvlabError, NumericError
from .gradcheck import finite_difference_check
from .model import build_model, standard_config
from .pmc import PmcConfig, extract_moments, mix_features, mixed_loss
from .tensor import Tensor, sum_
from .train import TrainConfig, evaluate, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def worker_count() -> int:
    """Worker bound from MEDVIT_THREADS (default: available cores)."""
    raw = os.environ.get("MEDVIT_THREADS", "")
    if raw.strip():
        try:
            return max(1, int(raw))
        except ValueError:
            raise UsageError(f"MEDVIT_THREADS must be an integer, got {raw!r}") from None
    return os.cpu_count() or 1


# dotted aliases accepted in config files for the augmentation block
_KEY_ALIASES = {
    "pmc.enabled": "pmc",
    "pmc.lambda": "pmc_lambda",
    "pmc.stage": "pmc_stage",
    "pmc.probability": "pmc_probability",
    "pmc.eps": "pmc_eps",
}


def _read_config_file(path) -> dict:
    """Flat key=value config lines; '#' starts a comment."""
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value, got {raw.rstrip()!r}")
            key, value = line.split("=", 1)
            key = key.strip()
            values[_KEY_ALIASES.get(key, key)] = value.strip()
    return values


def _merge(args, parser_defaults: dict, file_values: dict, casts: dict):
    """defaults < config file < explicit flags."""
    for key, cast in casts.items():
        flag_value = getattr(args, key)
        if flag_value is not None:
            continue
        if key in file_values:
            setattr(args, key, cast(file_values[key]))
        else:
            setattr(args, key, parser_defaults[key])
    return args


def _result_line(**kv) -> None:
    parts = " ".join(f"{k}={v}" for k, v in kv.items())
    print(f"RESULT {parts}")


def _echo_config(out_dir, args, casts) -> str:
    lines = [f"version={__version__}"]
    for key in sorted(casts):
        lines.append(f"{key}={getattr(args, key)}")
    text = "\n".join(lines) + "\n"
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "config.txt")
    with open(path, "w") as fh:
        fh.write(text)
    return path


_BOOL = {"on": True, "off": False, "true": True, "false": False, "1": True, "0": False}


def _bool_flag(value: str) -> bool:
    try:
        return _BOOL[value.lower()]
    except KeyError:
        raise UsageError(f"expected on/off, got {value!r}") from None


# -- subcommands --


def _cmd_synth(args) -> int:
    ds = make_synthetic(args.n, args.classes, args.size, args.seed, args.out)
    _result_line(path=args.out, n=ds.n, classes=ds.n_classes,
                 size=ds.height, checksum=ds.pixel_checksum())
    return EXIT_OK


_TRAIN_CASTS = {
    "variant": str, "epochs": int, "batch": int, "seed": int, "lr": float,
    "weight_decay": float, "pmc": _bool_flag, "pmc_lambda": float,
    "pmc_stage": int, "pmc_probability": float, "pmc_eps": float,
    "input": int, "dtype": str, "milestones": str,
}

_TRAIN_DEFAULTS = {
    "variant": "toy", "epochs": 10, "batch": 16, "seed": 0, "lr": 1e-3,
    "weight_decay": 0.05, "pmc": False, "pmc_lambda": 0.5, "pmc_stage": 1,
    "pmc_probability": 0.5, "pmc_eps": 1e-5, "input": 0, "dtype": "float32",
    "milestones": "50,75",
}


def _cmd_train(args) -> int:
    file_values = _read_config_file(args.config) if args.config else {}
    _merge(args, _TRAIN_DEFAULTS, file_values, _TRAIN_CASTS)
    if args.pmc in ("on", "off"):  # flag came as a string choice
        args.pmc = _bool_flag(args.pmc)
    dataset = load_dataset(args.data)
    cfg = standard_config(args.variant, num_classes=dataset.n_classes,
                          input_size=args.input or None, dtype=args.dtype)
    model = build_model(cfg, seed=args.seed)
    pmc_cfg = None
    if args.pmc:
        pmc_cfg = PmcConfig(lam=args.pmc_lambda, apply_stage=args.pmc_stage,
                            apply_probability=args.pmc_probability, eps=args.pmc_eps)
    milestones = tuple(int(m) for m in str(args.milestones).split(",") if m.strip())
    tcfg = TrainConfig(epochs=args.epochs, batch_size=args.batch, base_lr=args.lr,
                       milestones=milestones, weight_decay=args.weight_decay,
                       seed=args.seed, pmc=pmc_cfg,
                       prefetch_slots=min(2, worker_count()))
    _echo_config(args.out, args, _TRAIN_CASTS)
    result = train(model, cfg, dataset, tcfg, out_dir=args.out)
    last = result.epoch_log[-1] if result.epoch_log else {}
    _result_line(steps=result.steps, train_acc=f"{result.final_train_acc:.4f}",
                 val_acc=f"{last.get('val_acc', float('nan')):.4f}",
                 val_auc=f"{last.get('val_auc', float('nan')):.4f}",
                 best_val_auc=f"{result.best_val_auc:.4f}",
                 ckpt=result.checkpoint_path or "")
    return EXIT_OK


def _cmd_eval(args) -> int:
    dataset = load_dataset(args.data)
    model, cfg = load_checkpoint(args.ckpt)
    report = evaluate(model, dataset, args.split, input_size=cfg.input_size,
                      batch_size=args.batch)
    _result_line(split=args.split, n=report.n_samples,
                 acc=f"{report.acc:.4f}", auc=f"{report.auc:.4f}")
    return EXIT_OK


def _cmd_attack(args) -> int:
    dataset = load_dataset(args.data)
    model, cfg = load_checkpoint(args.ckpt)
    model.eval()
    acfg = AttackConfig(epsilon=args.eps, step_size=args.step, n_iter=args.iters,
                        random_start=args.random_start)
    fn = pixel_model(model, 0.5, 0.5)
    indices = dataset.split_indices(args.split)
    if len(indices) == 0:
        raise ConfigError(f"split {args.split!r} is empty")
    batches = (
        (dataset.pixel_batch(indices[s : s + args.batch], size=cfg.input_size),
         dataset.labels_for(indices[s : s + args.batch]))
        for s in range(0, len(indices), args.batch)
    )
    rng = np.random.default_rng(args.seed) if args.random_start else None
    out = robust_accuracy(fn, batches, acfg, method=args.method,
                          task=dataset.label_kind, rng=rng)
    lines = [
        f"clean_acc={out['clean_acc']:.6f}",
        f"robust_acc={out['robust_acc']:.6f}",
        f"n={out['n']}",
        f"method={args.method}",
        f"eps={args.eps}",
        f"step={args.step}",
        f"iters={args.iters}",
        f"split={args.split}",
        f"version={__version__}",
    ]
    with open(args.report, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    _result_line(clean_acc=f"{out['clean_acc']:.4f}",
                 robust_acc=f"{out['robust_acc']:.4f}", n=out["n"], report=args.report)
    return EXIT_OK


def _cmd_audit(args) -> int:
    cfg = standard_config(args.variant, num_classes=args.classes)
    model = build_model(cfg, seed=0)
    report = count_flops(model, args.input)
    print(report.as_text())
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write(report.as_csv() + "\n")
    _result_line(variant=args.variant, input=args.input,
                 params=report.total_params, macs=report.total_macs,
                 gmacs=f"{report.total_gmacs:.3f}")
    return EXIT_OK


def _cmd_gradcam(args) -> int:
    dataset = load_dataset(args.data)
    model, cfg = load_checkpoint(args.ckpt)
    px = dataset.pixel_batch([args.index], size=cfg.input_size)
    x = Tensor(normalize(px, 0.5, 0.5))
    target = args.cls
    if target < 0:
        from .tensor import no_grad

        with no_grad():
            target = int(model(x).data.argmax())
    heat = grad_cam(model, x, target, layer=args.layer or None)
    write_pgm(args.out, heat)
    _result_line(out=args.out, index=args.index, target=target,
                 hmin=f"{heat.min():.3f}", hmax=f"{heat.max():.3f}")
    return EXIT_OK


def selftest() -> int:
    """Fast invariant suite; exits nonzero naming the first failing check."""
    rng = np.random.default_rng(0)
    checks: list[tuple[str, bool]] = []

    def check(name, ok):
        checks.append((name, bool(ok)))
        print(f"  {'ok' if ok else 'FAIL'}  {name}")

    # gradient checks on core primitives
    from .tensor import matmul, relu, softmax

    x = Tensor(rng.normal(size=(3, 4)), dtype=np.float64, requires_grad=True)
    w = Tensor(rng.normal(size=(4, 3)), dtype=np.float64)
    probe = Tensor(rng.normal(size=(3, 3)), dtype=np.float64)
    err = finite_difference_check(lambda t: sum_(softmax(matmul(relu(t), w), axis=-1) * probe), x, h=1e-6)
    check("gradient: relu/matmul/softmax chain vs finite differences", err < 1e-6)

    from .nn import Conv2d

    conv = Conv2d(2, 4, 3, stride=2, padding=1, groups=2, rng=rng, dtype=np.float64)
    xc = Tensor(rng.normal(size=(1, 2, 6, 6)), dtype=np.float64, requires_grad=True)
    m = Tensor(rng.normal(size=(1, 4, 3, 3)), dtype=np.float64)
    err = finite_difference_check(lambda t: sum_(conv(t) * m), xc, h=1e-6)
    check("gradient: grouped strided conv vs finite differences", err < 1e-6)

    # moment crossover identities
    z = Tensor(rng.normal(size=(2, 8, 3, 3)), dtype=np.float64)
    tri = extract_moments(z, eps=1e-5)
    check("moments: per-token mean ~ 0", np.abs(tri.z_norm.data.mean(axis=1)).max() < 1e-5)
    check("moments: per-token var ~ 1", np.abs(tri.z_norm.data.var(axis=1) - 1).max() < 1e-4)
    check("moments: identity mix reconstructs", np.abs(mix_features(tri, tri).data - z.data).max() < 1e-6)

    logits = Tensor(rng.normal(size=(4, 3)), dtype=np.float64)
    ya = np.array([0, 1, 2, 0])
    yb = np.array([2, 1, 0, 1])
    sym = abs(mixed_loss(logits, ya, yb, 0.3).item() - mixed_loss(logits, yb, ya, 0.7).item())
    check("mixed loss symmetry", sym < 1e-7)

    # attack containment on a tiny random model
    from .model import build_model as _bm, standard_config as _sc

    model = _bm(_sc("toy", num_classes=3), seed=1).eval()
    fn = pixel_model(model, 0.5, 0.5)
    px = rng.random((4, 3, 32, 32)).astype(np.float32)
    y = np.array([0, 1, 2, 0])
    acfg = AttackConfig()
    adv = pgd(fn, px, y, acfg)
    check("attack: L-inf containment", np.abs(adv - px).max() <= acfg.epsilon + 1e-7)
    check("attack: pixel range containment", adv.min() >= 0.0 and adv.max() <= 1.0)
    check("attack: fgsm equals pgd(1, step=eps) bitwise",
          np.array_equal(fgsm(fn, px, y, acfg),
                         pgd(fn, px, y, AttackConfig(n_iter=1, step_size=acfg.epsilon))))

    # AUC against O(n^2) pair counting
    ok = True
    for _ in range(20):
        scores = np.round(rng.random(30), 2)
        labels = rng.integers(0, 2, 30)
        if labels.min() == labels.max():
            continue
        from .metrics import binary_auc

        fast = binary_auc(scores, labels)
        pos = scores[labels == 1]
        neg = scores[labels == 0]
        pairs = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
        ok = ok and fast == pairs / (len(pos) * len(neg))
    check("auc: rank statistic equals pair counting", ok)

    failed = [name for name, good in checks if not good]
    if failed:
        _result_line(selftest="fail", checks=len(checks), failed=failed[0].replace(" ", "_"))
        return EXIT_NUMERIC
    _result_line(selftest="ok", checks=len(checks))
    return EXIT_OK


# -- parser wiring --


def _build_parser() -> _Parser:
    parser = _Parser(prog="mvlab", description=__doc__)
    parser.add_argument("--version", action="store_true", help="print version and exit")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a variant on an MVDS dataset")
    p.add_argument("--variant", choices=("t", "s", "l", "toy"), default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--weight-decay", dest="weight_decay", type=float, default=None)
    p.add_argument("--milestones", default=None, help="comma-separated decay epochs")
    p.add_argument("--pmc", choices=("on", "off"), default=None)
    p.add_argument("--pmc-lambda", dest="pmc_lambda", type=float, default=None)
    p.add_argument("--pmc-stage", dest="pmc_stage", type=int, default=None)
    p.add_argument("--pmc-probability", dest="pmc_probability", type=float, default=None)
    p.add_argument("--pmc-eps", dest="pmc_eps", type=float, default=None)
    p.add_argument("--input", type=int, default=None, help="override input size")
    p.add_argument("--dtype", choices=("float32", "float64"), default=None)
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    p.add_argument("--batch", type=int, default=64)

    p = sub.add_parser("attack", help="adversarial robustness evaluation")
    p.add_argument("--method", choices=("fgsm", "pgd"), required=True)
    p.add_argument("--eps", type=float, default=8 / 255)
    p.add_argument("--step", type=float, default=4 / 255)
    p.add_argument("--iters", type=int, default=5)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--random-start", dest="random_start", action="store_true")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("audit", help="parameter and MAC accounting")
    p.add_argument("--variant", choices=("t", "s", "l", "toy"), default="t")
    p.add_argument("--input", type=int, default=224)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--csv", default=None)

    p = sub.add_parser("gradcam", help="class activation heatmap as PGM")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--cls", type=int, default=-1, help="target class (-1: argmax)")
    p.add_argument("--layer", default=None)
    p.add_argument("--out", required=True)

    sub.add_parser("selftest", help="fast invariant suite")
    return parser


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "attack": _cmd_attack,
    "audit": _cmd_audit,
    "gradcam": _cmd_gradcam,
}


def dispatch(argv) -> int:
    """Parse and run; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.version:
            print(f"mvlab {__version__}")
            return EXIT_OK
        if args.command is None:
            raise UsageError("missing subcommand")
        if args.command == "selftest":
            return selftest()
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MvlabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def console_main() -> None:
    raise SystemExit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    console_main()
