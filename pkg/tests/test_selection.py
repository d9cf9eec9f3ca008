import csv
import math

import numpy as np
import pytest
from conftest import random_small_model
from criteria import selection_oracle_mismatches, taylor_residuals
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import grad_norm as oracle_grad_norm

from etage.errors import ContractError, ParameterError
from etage.model import ClassifierModel, adaptable_params, predict_probs
from etage.perturb import PatchShuffleSpec
from etage.selection import (
    CSV_FIELDS,
    Thresholds,
    area_of,
    entropy,
    input_gradient,
    plpd,
    sample_grad_norm,
    select,
    write_records_csv,
)

# H(0.7, 0.2, 0.1) to 20 digits, computed with mpmath
H_721 = 0.80181855254333730856


def test_entropy_reference_values():
    assert entropy(np.full(10, 0.1)) == math.log(10)
    assert entropy([0.0, 1.0, 0.0]) == 0.0
    assert abs(entropy([0.7, 0.2, 0.1]) - H_721) < 1e-15


@given(st.integers(1, 300))
def test_uniform_entropy_is_exactly_log_c(c):
    assert entropy(np.full(c, 1.0 / c)) == math.log(c)


@given(st.integers(2, 8), st.integers(0, 2**31))
def test_entropy_bounds(c, seed):
    p = np.random.default_rng(seed).dirichlet(np.full(c, 0.3), size=5)
    h = entropy(p)
    assert np.all(h >= -1e-15) and np.all(h <= math.log(c) + 1e-12)


def test_entropy_rejects_non_distribution():
    with pytest.raises(ContractError):
        entropy([0.5, 0.6])
    with pytest.raises(ContractError):
        entropy([1.2, -0.2])


def test_plpd_reference_values():
    assert plpd([0.9, 0.1], [0.6, 0.4], 0) == pytest.approx(0.3, abs=1e-15)
    p = [0.2, 0.5, 0.3]
    assert plpd(p, p, 1) == 0.0
    with pytest.raises(ParameterError):
        plpd(p, p, 3)


@given(st.integers(0, 2**31))
def test_plpd_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.dirichlet(np.ones(4), size=2)
    assert -1.0 <= plpd(a, b, int(a.argmax())) <= 1.0


def test_grad_norm_zero_when_nothing_adapts():
    m = random_small_model(0)
    m.freeze_all()
    assert sample_grad_norm(m, np.random.default_rng(0).random(64)) == 0.0


def test_grad_norm_matches_hand_derivation_and_leaves_model_alone():
    m = random_small_model(3)
    x = np.random.default_rng(3).random(64)
    before = m.state_hash()
    assert sample_grad_norm(m, x) == pytest.approx(oracle_grad_norm(m, x), rel=1e-12)
    assert sample_grad_norm(m, x) == sample_grad_norm(m, x.copy())
    assert m.state_hash() == before
    assert all(p.grad is None for p in adaptable_params(m))


def test_grad_norm_tiny_model_finite_differences():
    """One hidden unit feeding two classes, checked against central differences."""
    m = ClassifierModel(input_dim=3, hidden=(2,), num_classes=2, seed=1)
    m.freeze_for_adaptation()
    x = np.array([0.3, -0.7, 1.1])
    params = adaptable_params(m)
    h, fd = 1e-6, []
    from etage.selection import entropy_loss

    for p in params:
        base = p.data.copy()
        for i in range(base.size):
            vals = []
            for s in (1, -1):
                v = base.copy()
                v.flat[i] += s * h
                p.assign(v)
                vals.append(entropy_loss(m, x[None]).item())
            fd.append((vals[0] - vals[1]) / (2 * h))
        p.assign(base)
    assert sample_grad_norm(m, x) == pytest.approx(float(np.linalg.norm(fd)), rel=1e-6)


@pytest.fixture(scope="module")
def batch():
    m = random_small_model(11, num_classes=4)
    imgs = np.random.default_rng(11).random((48, 8, 8))
    return m, imgs


def test_vacuous_gates_select_everything(batch):
    m, imgs = batch
    th = Thresholds(math.log(4), tau_grad=math.inf, grad_quantile=None, tau_plpd=-1.0)
    sel = select(m, imgs, th, PatchShuffleSpec(4, 0))
    assert sel.selected == list(range(len(imgs)))


def test_plpd_threshold_one_selects_nothing(batch):
    m, imgs = batch
    sel = select(m, imgs, Thresholds(math.log(4), tau_plpd=1.0), PatchShuffleSpec(4, 0))
    assert sel.selected == []


def test_matches_brute_force_filter():
    mismatches, sizes = selection_oracle_mismatches(25)
    assert mismatches == 0
    assert max(sizes) > 0


gate_values = st.tuples(st.floats(0.05, 1.4), st.floats(0.01, 5.0), st.floats(-0.3, 0.3))


@settings(max_examples=25)
@given(gate_values, gate_values)
def test_loosening_a_gate_never_shrinks_the_set(a, b):
    m = random_small_model(5, num_classes=4)
    imgs = np.random.default_rng(5).random((24, 8, 8))
    loose = Thresholds(max(a[0], b[0]), tau_grad=max(a[1], b[1]), grad_quantile=None, tau_plpd=min(a[2], b[2]))
    tight = Thresholds(a[0], tau_grad=a[1], grad_quantile=None, tau_plpd=a[2])
    spec = PatchShuffleSpec(4, 2)
    assert select(m, imgs, tight, spec).selected_set <= select(m, imgs, loose, spec).selected_set


def test_quantile_cut_uses_entropy_survivors(batch):
    m, imgs = batch
    th = Thresholds(0.9, grad_quantile=0.5, tau_plpd=-1.0)
    sel = select(m, imgs, th, PatchShuffleSpec(4, 0))
    norms = [r.grad_norm for r in sel.records if r.passed_entropy]
    assert sel.grad_cutoff == pytest.approx(float(np.quantile(norms, 0.5)), rel=0, abs=0)
    assert all(r.grad_norm is None for r in sel.records if not r.passed_entropy)


def test_records_are_exhaustive_and_consistent(batch):
    m, imgs = batch
    th = Thresholds(0.9, grad_quantile=0.7, tau_plpd=0.0)
    sel = select(m, imgs, th, PatchShuffleSpec(4, 1))
    assert [r.index for r in sel.records] == list(range(len(imgs)))
    for r in sel.records:
        assert r.area in (1, 2, 3, 4)
        assert r.area == area_of(r.passed_entropy, r.plpd, th.tau_plpd)
        if r.plpd is None:
            assert not r.selected
        else:
            assert -1 <= r.plpd <= 1
        assert r.selected == (r.index in sel.selected_set)
        if r.selected:
            assert r.entropy < th.tau_ent and r.grad_norm < sel.grad_cutoff and r.plpd > th.tau_plpd


def test_diagnostic_mode_fills_scores_without_changing_selection(batch):
    m, imgs = batch
    th = Thresholds(0.9, grad_quantile=0.7, tau_plpd=0.0)
    plain = select(m, imgs, th, PatchShuffleSpec(4, 1))
    full = select(m, imgs, th, PatchShuffleSpec(4, 1), diagnostic=True)
    assert plain.selected == full.selected
    assert all(r.grad_norm is not None and r.plpd is not None for r in full.records)


def test_area_semantics():
    assert area_of(True, 0.5, 0.2) == 4
    assert area_of(True, None, 0.2) == 3
    assert area_of(False, 0.5, 0.2) == 2
    assert area_of(False, 0.1, 0.2) == 1


def test_unknown_gate_and_threshold_validation(batch):
    m, imgs = batch
    with pytest.raises(ParameterError):
        select(m, imgs, Thresholds(0.5), PatchShuffleSpec(4), gates=("entropy", "vibes"))
    with pytest.raises(ParameterError):
        Thresholds(0.5, tau_grad=1.0, grad_quantile=0.9)
    with pytest.raises(ParameterError):
        Thresholds(0.0)


def test_records_csv(tmp_path, batch):
    m, imgs = batch
    sel = select(m, imgs, Thresholds(0.9), PatchShuffleSpec(4, 0))
    path = write_records_csv(sel.records, tmp_path / "r.csv", extra={"batch": 0})
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["batch", *CSV_FIELDS]
    assert len(rows) == len(imgs)
    assert sum(int(r["selected"]) for r in rows) == len(sel.selected)


def test_taylor_residual_is_second_order():
    r = taylor_residuals(10)
    assert np.all(r[:, 1] / r[:, 0] <= 0.02)
    assert np.all(r[:, 2] / r[:, 1] <= 0.02)


def test_aligned_perturbation_tracks_gradient_magnitude():
    """With delta along grad P, |PLPD| orders like ||grad_x P|| up to O(eps^2)."""
    eps, pts = 1e-4, []
    for seed in range(30):
        m = random_small_model(seed, num_classes=4)
        x = np.random.default_rng(seed).random(64)
        p0 = predict_probs(m, x[None]).data[0]
        y = int(p0.argmax())
        g = input_gradient(m, x, y)
        gn = float(np.linalg.norm(g))
        p1 = predict_probs(m, (x + eps * g / gn)[None]).data[0]
        pts.append((gn, abs(p0[y] - p1[y])))
    pts.sort()
    for (g1, d1), (g2, d2) in zip(pts, pts[1:]):
        if g2 > g1 * 1.001:
            assert d2 >= d1
