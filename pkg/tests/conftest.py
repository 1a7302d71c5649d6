import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("suite", deadline=None, max_examples=25, derandomize=True)
settings.load_profile("suite")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory):
    """64-sample 4-class synthetic set shared across training-heavy tests."""
    from mvlab.data import make_synthetic

    path = tmp_path_factory.mktemp("data") / "toy.mvds"
    return make_synthetic(64, 4, 32, seed=7, path=path)


@pytest.fixture(scope="session")
def overfit_toy(toy_dataset):
    """Toy model trained to 1.0 train accuracy at float64 (used by the
    overfit-sanity and attack criteria)."""
    from mvlab.model import build_model, standard_config
    from mvlab.train import TrainConfig, train

    cfg = standard_config("toy", num_classes=4, dtype="float64")
    model = build_model(cfg, seed=0)
    result = train(
        model, cfg, toy_dataset,
        TrainConfig(epochs=50, batch_size=16, base_lr=2e-3, milestones=(), seed=0,
                    max_steps=200, stop_at_train_acc=1.0),
    )
    model.eval()
    return model, cfg, result
