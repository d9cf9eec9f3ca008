import numpy as np
import pytest
from hypothesis import settings

from etage.data import generate_shape_dataset
from etage.model import ClassifierModel, PretrainConfig, pretrain

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


def random_small_model(seed, input_dim=64, hidden=(10, 8), num_classes=3, spread=0.5):
    """Untrained model with non-trivial layer-norm affine values, frozen for adaptation."""
    m = ClassifierModel(input_dim, hidden, num_classes, seed=seed)
    rng = np.random.default_rng(10_000 + seed)
    for b in m.blocks:
        b.gamma.assign(1.0 + spread * rng.standard_normal(b.gamma.shape))
        b.beta.assign(spread * rng.standard_normal(b.beta.shape))
    m.head_weight.assign(m.head_weight.data * 3.0)
    m.freeze_for_adaptation()
    return m


@pytest.fixture(scope="session")
def shapes_small():
    """A small train/val/test split and a model pretrained on it (shared, do not mutate)."""
    train, val, test = generate_shape_dataset(150, 4, seed=0, fractions=(0.5, 0.2, 0.3))
    model = ClassifierModel(seed=0)
    model, curve = pretrain(model, train.images, train.labels, PretrainConfig(epochs=30, seed=0),
                            val=(val.images, val.labels))
    return {"train": train, "val": val, "test": test, "model": model, "curve": curve}
