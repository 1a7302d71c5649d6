import numpy as np
import pytest

from mvlab.checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from mvlab.data import make_synthetic
from mvlab.errors import ConfigError, NumericError
from mvlab.model import build_model, config_digest, standard_config
from mvlab.optim import Schedule, lr_at
from mvlab.pmc import PmcConfig
from mvlab.train import TrainConfig, evaluate, train


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("train") / "tiny.mvds"
    return make_synthetic(32, 4, 16, seed=11, path=path)


def tiny_cfg(dtype="float32"):
    # trimmed toy stack so loop tests run in seconds at 16x16 input
    from mvlab.model import ModelConfig, StageSpec

    return ModelConfig(
        variant="toy",
        stem_channels=(8, 4, 8, 8),
        stem_strides=(2, 1, 1, 2),
        stages=[
            StageSpec(False, 1, 12, 0, 0, 1),
            StageSpec(True, 1, 24, 1, 32, 1, attn_pool_stride=2),
        ],
        num_classes=4,
        input_size=16,
        head_dim=4,
        dtype=dtype,
    )


def run_once(dataset, dtype="float64", epochs=3, pmc=None, out_dir=None, seed=3):
    cfg = tiny_cfg(dtype)
    model = build_model(cfg, seed=seed)
    tcfg = TrainConfig(epochs=epochs, batch_size=8, base_lr=1e-3, milestones=(2,),
                       seed=seed, pmc=pmc)
    result = train(model, cfg, dataset, tcfg, out_dir=out_dir)
    return model, cfg, result


class TestDeterminism:
    def test_same_seed_bitwise_loss_curves_at_64bit(self, tiny_dataset):
        _, _, r1 = run_once(tiny_dataset)
        _, _, r2 = run_once(tiny_dataset)
        assert r1.step_losses == r2.step_losses
        assert r1.epoch_log == r2.epoch_log

    def test_pmc_run_deterministic_too(self, tiny_dataset):
        pmc = PmcConfig(apply_probability=1.0)
        _, _, r1 = run_once(tiny_dataset, pmc=pmc)
        _, _, r2 = run_once(tiny_dataset, pmc=pmc)
        assert r1.step_losses == r2.step_losses


class TestLoopContracts:
    def test_lr_log_matches_schedule(self, tiny_dataset):
        _, _, result = run_once(tiny_dataset, epochs=4)
        sched = Schedule(1e-3, (2,), 0.1)
        for row in result.epoch_log:
            assert row["lr"] == lr_at(sched, row["epoch"])

    def test_csv_log_written(self, tiny_dataset, tmp_path):
        _, _, result = run_once(tiny_dataset, epochs=2, out_dir=str(tmp_path))
        lines = (tmp_path / "epochs.csv").read_text().strip().splitlines()
        assert lines[0] == "epoch,lr,train_loss,val_acc,val_auc"
        assert len(lines) == len(result.epoch_log) + 1

    def test_empty_train_split_rejected(self, tmp_path):
        from mvlab.data import ArrayDataset

        ds = ArrayDataset(np.zeros((4, 1, 16, 16), dtype=np.float32), np.zeros(4, dtype=int),
                          n_classes=2, splits=np.full(4, 2, dtype=np.uint8))
        cfg = tiny_cfg()
        with pytest.raises(ConfigError, match="empty"):
            train(build_model(cfg, 0), cfg, ds, TrainConfig(epochs=1, batch_size=2))

    def test_nonfinite_loss_aborts_with_diagnostics(self, tiny_dataset):
        cfg = tiny_cfg("float64")
        model = build_model(cfg, seed=0)
        model.head.weight.data[:] = np.inf
        with pytest.raises(NumericError, match="epoch 0 step 0"):
            train(model, cfg, tiny_dataset, TrainConfig(epochs=1, batch_size=8, seed=0))

    def test_loss_drops_on_overfit_run(self, tiny_dataset):
        _, _, result = run_once(tiny_dataset, epochs=6)
        first = result.step_losses[0]
        assert min(result.step_losses[:24]) < 0.5 * first


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tiny_dataset, tmp_path):
        model, cfg, _ = run_once(tiny_dataset, epochs=1)
        p1 = tmp_path / "a.mvwt"
        p2 = tmp_path / "b.mvwt"
        save_checkpoint(model, cfg, p1)
        loaded, cfg2 = load_checkpoint(p1, cfg)
        save_checkpoint(loaded, cfg2, p2)
        assert p1.read_bytes() == p2.read_bytes()
        for (n1, a), (n2, b) in zip(model.named_parameters(), loaded.named_parameters()):
            assert n1 == n2 and np.array_equal(a.data, b.data)
        for (n1, a), (n2, b) in zip(model.named_buffers(), loaded.named_buffers()):
            assert n1 == n2 and np.array_equal(a, b)

    def test_evaluation_reproduced_bit_identically(self, tiny_dataset, tmp_path):
        model, cfg, _ = run_once(tiny_dataset, epochs=2)
        path = tmp_path / "c.mvwt"
        save_checkpoint(model, cfg, path)
        model.eval()
        before = evaluate(model, tiny_dataset, "val", input_size=cfg.input_size, dtype=np.float64)
        loaded, _ = load_checkpoint(path, cfg)
        after = evaluate(loaded, tiny_dataset, "val", input_size=cfg.input_size, dtype=np.float64)
        assert before.acc == after.acc
        assert before.auc == after.auc
        assert before.per_class_auc == after.per_class_auc

    def test_digest_mismatch_rejected(self, tiny_dataset, tmp_path):
        model, cfg, _ = run_once(tiny_dataset, epochs=1)
        path = tmp_path / "d.mvwt"
        save_checkpoint(model, cfg, path)
        other = standard_config("toy", num_classes=4)
        assert config_digest(other) != config_digest(cfg)
        with pytest.raises(ConfigError, match="digest"):
            load_checkpoint(path, other)

    def test_standard_variant_inferred_from_digest(self, tmp_path):
        cfg = standard_config("toy", num_classes=4)
        model = build_model(cfg, seed=0)
        path = tmp_path / "e.mvwt"
        save_checkpoint(model, cfg, path)
        loaded, inferred = load_checkpoint(path)
        assert inferred.variant == "toy" and inferred.num_classes == 4

    def test_truncated_checkpoint_rejected(self, tmp_path):
        from mvlab.errors import TruncatedFileError

        cfg = standard_config("toy", num_classes=4)
        path = tmp_path / "f.mvwt"
        save_checkpoint(build_model(cfg, 0), cfg, path)
        clipped = tmp_path / "g.mvwt"
        clipped.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(TruncatedFileError):
            read_checkpoint(clipped)


@pytest.fixture(scope="module")
def multilabel_dataset(tmp_path_factory):
    from mvlab.data import load_dataset, write_mvds

    rng = np.random.default_rng(4)
    n, k, size = 36, 5, 16
    pixels = rng.integers(0, 256, size=(n, 1, size, size)).astype(np.uint8)
    labels = rng.integers(0, 2, size=(n, k))
    splits = np.array(([0] * 7 + [1, 2, 2]) * 4, dtype=np.uint8)[:n]
    path = tmp_path_factory.mktemp("ml") / "ml.mvds"
    write_mvds(path, pixels, labels, k, "multilabel", splits)
    return load_dataset(path)


class TestMultilabelPath:
    def test_training_runs_with_bce(self, multilabel_dataset):
        cfg = tiny_cfg()
        cfg.num_classes = 5
        model = build_model(cfg, seed=0)
        result = train(model, cfg, multilabel_dataset,
                       TrainConfig(epochs=2, batch_size=8, seed=0))
        assert result.steps > 0
        assert all(np.isfinite(v) for v in result.step_losses)
        assert 0.0 <= result.epoch_log[-1]["val_acc"] <= 1.0

    def test_attack_path_handles_multilabel(self, multilabel_dataset):
        from mvlab.attacks import AttackConfig, pixel_model, robust_accuracy

        cfg = tiny_cfg()
        cfg.num_classes = 5
        model = build_model(cfg, seed=0)
        train(model, cfg, multilabel_dataset, TrainConfig(epochs=1, batch_size=8, seed=0))
        model.eval()
        idx = multilabel_dataset.split_indices("test")
        batches = [(multilabel_dataset.pixel_batch(idx, size=16),
                    multilabel_dataset.labels_for(idx))]
        out = robust_accuracy(pixel_model(model, 0.5, 0.5), batches, AttackConfig(),
                              method="fgsm", task="multilabel")
        assert 0.0 <= out["robust_acc"] <= 1.0 and out["n"] == len(idx)


def test_best_checkpoint_selected_by_val_auc(tiny_dataset, tmp_path):
    _, _, result = run_once(tiny_dataset, epochs=3, out_dir=str(tmp_path))
    assert result.checkpoint_path is not None
    assert result.best_epoch >= 0
    aucs = [row["val_auc"] for row in result.epoch_log]
    assert result.best_val_auc == max(a for a in aucs if not np.isnan(a))
