import numpy as np
import pytest

from etage.data import CorruptionSpec, corrupt_images
from etage.errors import ParameterError
from etage.model import predict_probs
from etage.perturb import PatchShuffleSpec, patch_shuffle
from etage.salting import SaltConfig, salt_stream
from etage.selection import Thresholds, entropy, sample_grad_norm

TAU = Thresholds.default(4).tau_ent


@pytest.fixture(scope="module")
def salted(shapes_small):
    m = shapes_small["model"].copy()
    m.freeze_for_adaptation()
    test, val = shapes_small["test"], shapes_small["val"]
    stream = corrupt_images(test.images[:80], CorruptionSpec("gaussian_noise", 5, seed=0))
    ref = corrupt_images(val.images, CorruptionSpec("gaussian_noise", 5, seed=1))
    before = m.state_hash()
    out = salt_stream(m, stream, test.labels[:80], ref, val.labels, TAU, SaltConfig(fraction=0.05, seed=0))
    return m, stream, out, before


def test_only_the_chosen_positions_change(salted):
    m, stream, out, before = salted
    assert out.salted.sum() == 4
    assert out.images[out.clean_mask].tobytes() == stream[out.clean_mask].tobytes()
    assert m.state_hash() == before


def test_salted_samples_pass_entropy_and_shuffle_gates(salted):
    m, _, out, _ = salted
    for x in out.images[out.salted]:
        p = predict_probs(m, x.reshape(1, -1)).data[0]
        assert entropy(p) < TAU
        y = int(p.argmax())
        after = predict_probs(m, patch_shuffle(x[None], PatchShuffleSpec(4, 0)).reshape(1, -1)).data[0]
        assert p[y] - after[y] > 0.0
        assert 0.0 <= x.min() and x.max() <= 1.0


def test_salted_samples_have_outsized_gradients(salted):
    m, stream, out, _ = salted
    flat = stream.reshape(len(stream), -1)
    ent = entropy(predict_probs(m, flat).data)
    natural = [sample_grad_norm(m, x) for x in flat[ent < TAU]]
    cut = np.quantile(natural, 0.9)
    assert all(sample_grad_norm(m, x) > cut for x in out.images[out.salted])


def test_salted_predictions_are_wrong(salted):
    m, _, out, _ = salted
    pred = predict_probs(m, out.images[out.salted].reshape(int(out.salted.sum()), -1)).data.argmax(1)
    assert np.all(pred != out.labels[out.salted])


def test_zero_fraction_is_identity(shapes_small):
    m = shapes_small["model"]
    imgs = shapes_small["test"].images[:10]
    out = salt_stream(m, imgs, shapes_small["test"].labels[:10], imgs, shapes_small["test"].labels[:10], TAU,
                      SaltConfig(fraction=0.0))
    assert not out.salted.any() and out.images.tobytes() == imgs.tobytes()


def test_config_validation():
    with pytest.raises(ParameterError):
        SaltConfig(fraction=1.5)
    with pytest.raises(ParameterError):
        SaltConfig(steps=-1)
