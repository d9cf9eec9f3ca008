import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from etage import autodiff as ad
from etage.autodiff import Tensor
from etage.errors import ContractError, DimensionError, NonFiniteError, ParameterError

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def central_diff(f, x: np.ndarray, h=1e-5) -> np.ndarray:
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b, floor=1e-6):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def test_softmax_of_zeros_is_uniform():
    np.testing.assert_array_equal(ad.softmax(Tensor([0.0, 0.0, 0.0, 0.0])).data, [0.25] * 4)


def test_layer_norm_constant_row_gives_zeros():
    x = Tensor(np.full((2, 5), 3.7))
    out = ad.layer_norm(x, Tensor(np.ones(5)), Tensor(np.zeros(5)))
    np.testing.assert_array_equal(out.data, np.zeros((2, 5)))


def test_matmul_against_triple_loop():
    rng = np.random.default_rng(11)
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 2))
    expect = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            for k in range(3):
                expect[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose((Tensor(a) @ Tensor(b)).data, expect, rtol=0, atol=1e-14)


def test_sum_gradient_is_ones():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4, 2)), requires_grad=True)
    ad.backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones((3, 4, 2)))


def test_fan_out_accumulates():
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    ad.backward((x + x).sum())
    np.testing.assert_array_equal(x.grad, [2.0, 2.0, 2.0])


def test_backward_accumulates_into_existing_grad():
    x = Tensor([1.0, 2.0], requires_grad=True)
    ad.backward((x * x).sum())
    ad.backward((x * x).sum())
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])


def test_gradients_is_functional():
    x = Tensor([1.0, 2.0], requires_grad=True)
    (g,) = ad.gradients((x * x).sum(), [x])
    np.testing.assert_array_equal(g, [2.0, 4.0])
    assert x.grad is None


def test_gradients_of_unrelated_tensor_is_zero():
    x = Tensor([1.0], requires_grad=True)
    y = Tensor([[1.0, 2.0]], requires_grad=True)
    gx, gy = ad.gradients((x * 3.0).sum(), [x, y])
    assert gx[0] == 3.0 and not gy.any()


def test_entropy_linear_model_matches_finite_differences():
    rng = np.random.default_rng(3)
    W = rng.normal(size=(6, 4))
    x = rng.normal(size=(1, 6))
    Wt = Tensor(W, requires_grad=True)
    (g,) = ad.gradients(ad.entropy(Tensor(x) @ Wt).sum(), [Wt])

    def f():
        with ad.no_grad():
            return ad.entropy(Tensor(x) @ Tensor(W)).item()

    assert rel_err(g, central_diff(f, W)) < 1e-5


def _primitive_fixture(rng):
    """A random composite of every primitive: matmul, add, mul, relu, layer_norm, softmax, log_softmax."""
    shapes = {"x": (3, 5), "W": (5, 4), "b": (4,), "g": (4,), "be": (4,), "s": (3, 4)}
    vals = {k: rng.normal(size=s) for k, s in shapes.items()}

    def loss(t):
        z = t["x"] @ t["W"] + t["b"]
        z = ad.relu(ad.layer_norm(z, t["g"], t["be"])) * t["s"]
        return (ad.softmax(z) * ad.log_softmax(z)).sum() + (z * z).mean()

    return vals, loss


def test_every_primitive_matches_finite_differences_over_100_fixtures():
    worst = 0.0
    for seed in range(100):
        vals, loss = _primitive_fixture(np.random.default_rng(seed))
        ts = {k: Tensor(v, requires_grad=True) for k, v in vals.items()}
        grads = ad.gradients(loss(ts), list(ts.values()))
        for (k, v), g in zip(vals.items(), grads):

            def f():
                with ad.no_grad():
                    return loss({kk: Tensor(vv) for kk, vv in vals.items()}).item()

            worst = max(worst, rel_err(g, central_diff(f, v)))
    assert worst < 1e-4


def test_backward_is_deterministic():
    vals, loss = _primitive_fixture(np.random.default_rng(5))
    out = []
    for _ in range(2):
        ts = {k: Tensor(v, requires_grad=True) for k, v in vals.items()}
        out.append(ad.gradients(loss(ts), list(ts.values())))
    for a, b in zip(*out):
        assert a.tobytes() == b.tobytes()


def test_tape_is_topological_and_visits_once():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = x * x
    z = (y + x + y).sum()
    tape = ad.Tape(z)
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    assert len(pos) == len(tape.nodes)
    for n in tape.nodes:
        for p in n._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(n)]


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 7)), elements=st.floats(-700, 700)))
def test_softmax_rows_are_distributions(z):
    p = ad.softmax(Tensor(z)).data
    assert np.all(p >= 0) and np.all(p <= 1)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, rtol=0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(arrays(np.float64, st.integers(0, 6), elements=finite), max_size=4))
def test_grad_l2_norm_matches_flat_summation(bufs):
    flat = [v for b in bufs for v in b.tolist()]
    assert math.isclose(ad.grad_l2_norm(bufs), math.sqrt(sum(v * v for v in flat)), rel_tol=1e-12, abs_tol=1e-300)


def test_grad_l2_norm_fixed_values():
    assert ad.grad_l2_norm([np.array([3.0]), np.array([4.0])]) == 5.0
    assert ad.grad_l2_norm([np.zeros(3), np.zeros((2, 2))]) == 0.0
    assert ad.grad_l2_norm([]) == 0.0


def test_errors():
    with pytest.raises(DimensionError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))
    with pytest.raises(DimensionError):
        Tensor(np.ones(3)) + Tensor(np.ones(4))
    with pytest.raises(ParameterError):
        ad.layer_norm(Tensor(np.ones((1, 3))), Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=0.0)
    with pytest.raises(DimensionError):
        ad.layer_norm(Tensor(np.ones((1, 3))), Tensor(np.ones(2)), Tensor(np.zeros(3)))
    with pytest.raises(ContractError):
        ad.backward(Tensor([1.0, 2.0], requires_grad=True) * 2.0)
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])
    with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
        Tensor([1e308], requires_grad=True) * 1e10


def test_no_grad_is_thread_local():
    x = Tensor([1.0], requires_grad=True)
    seen = {}

    def worker():
        seen["other"] = (x * 2.0).requires_grad

    with ad.no_grad():
        assert not (x * 2.0).requires_grad
        t = threading.Thread(target=worker)
        t.start()
        t.join()
    assert seen["other"] is True


def test_grad_shape_matches_data():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    ad.backward(((x + b) * 2.0).sum())
    assert x.grad.shape == x.shape and b.grad.shape == b.shape
    np.testing.assert_array_equal(b.grad, [4.0, 4.0, 4.0])
