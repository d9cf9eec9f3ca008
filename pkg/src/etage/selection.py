"""Per-sample reliability scores and the three-gate selection set.

A test sample enters the adaptation loss only if

* its prediction entropy is below ``tau_ent`` (confident),
* the L2 norm of its entropy gradient over the layer-norm affine parameters
  is below ``tau_grad`` (not a noisy-gradient sample), and
* its pseudo-label probability drops by more than ``tau_plpd`` once the image
  is patch-shuffled (the prediction relied on the object's shape).

The first two gates are evaluated together; patch shuffling and PLPD are only
computed for their survivors. All comparisons are strict.
"""

from __future__ import annotations

import csv
import math
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import xlogy

from . import autodiff as ad
from .errors import ContractError, DimensionError, ParameterError
from .model import ClassifierModel, adaptable_params, predict_probs
from .perturb import PatchShuffleSpec, patch_shuffle

GATES_ETAGE = ("entropy", "grad", "plpd")


@dataclass(frozen=True)
class Thresholds:
    """Selection gates.

    ``tau_grad`` (absolute) and ``grad_quantile`` (batch-relative, computed
    over the entropy-gate survivors) are mutually exclusive.
    """

    tau_ent: float
    tau_grad: float | None = None
    grad_quantile: float | None = 0.9
    tau_plpd: float = 0.2

    def __post_init__(self):
        if not self.tau_ent > 0:
            raise ParameterError(f"tau_ent must be positive, got {self.tau_ent}")
        if (self.tau_grad is None) == (self.grad_quantile is None):
            raise ParameterError("set exactly one of tau_grad and grad_quantile")
        if self.tau_grad is not None and not self.tau_grad > 0:
            raise ParameterError(f"tau_grad must be positive, got {self.tau_grad}")
        if self.grad_quantile is not None and not 0 < self.grad_quantile < 1:
            raise ParameterError(f"grad_quantile must lie in (0, 1), got {self.grad_quantile}")
        if not -1 <= self.tau_plpd <= 1:
            raise ParameterError(f"tau_plpd must lie in [-1, 1], got {self.tau_plpd}")

    @classmethod
    def default(cls, num_classes: int) -> Thresholds:
        return cls(tau_ent=0.4 * math.log(num_classes), grad_quantile=0.9, tau_plpd=0.2)

    def with_(self, **changes) -> Thresholds:
        d = asdict(self)
        if "tau_grad" in changes and "grad_quantile" not in changes:
            d["grad_quantile"] = None
        if "grad_quantile" in changes and "tau_grad" not in changes:
            d["tau_grad"] = None
        d.update(changes)
        return Thresholds(**d)


@dataclass
class SampleRecord:
    index: int
    entropy: float
    grad_norm: float | None
    plpd: float | None
    area: int
    selected: bool
    pseudo_label: int
    passed_entropy: bool = True
    passed_grad: bool = True


@dataclass
class Selection:
    records: list[SampleRecord]
    selected: list[int]
    n_gate1: int
    grad_cutoff: float = math.inf
    probs: np.ndarray | None = field(default=None, repr=False)

    @property
    def selected_set(self) -> frozenset[int]:
        return frozenset(self.selected)


# ---------------------------------------------------------------- scores


def _check_distribution(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < -1e-12) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-6):
        raise ContractError("input is not a probability distribution")
    return p


def entropy(probs) -> float | np.ndarray:
    """Shannon entropy in nats, ``0 * ln 0 = 0``; rows of a 2-D input are scored separately.

    Evaluated as ``ln C - KL(p || uniform)``, which returns ``ln C`` exactly
    for a uniform row.
    """
    p = np.clip(_check_distribution(probs), 0.0, None)
    c = p.shape[-1]
    h = math.log(c) - xlogy(p, p * c).sum(axis=-1)
    return float(h) if np.ndim(h) == 0 else h


def plpd(probs_before, probs_after, pseudo_label: int) -> float:
    """Drop of the pseudo-label probability from the original to the perturbed view."""
    before = _check_distribution(probs_before)
    after = _check_distribution(probs_after)
    if not 0 <= pseudo_label < before.shape[-1]:
        raise ParameterError(f"pseudo_label {pseudo_label} outside [0, {before.shape[-1]})")
    return float(before[pseudo_label] - after[pseudo_label])


def entropy_loss(model: ClassifierModel, x) -> ad.Tensor:
    """Differentiable sum of prediction entropies over the rows of ``x``."""
    return ad.entropy(model.logits(x)).sum()


def sample_grad_norm(model: ClassifierModel, x) -> float:
    """L2 norm of d Ent(x) / d(layer-norm affine params) for one sample.

    Gradients are returned by value; the model's parameters and ``.grad``
    buffers are left untouched.
    """
    params = adaptable_params(model)
    if not params:
        return 0.0
    row = np.asarray(x, dtype=np.float64).reshape(1, -1)
    return ad.grad_l2_norm(ad.gradients(entropy_loss(model, row), params))


def per_sample_grad_norms(model: ClassifierModel, x: np.ndarray, idx: Iterable[int] | None = None) -> np.ndarray:
    """Grad norms for the rows ``idx`` of ``x`` (NaN for rows not requested)."""
    flat = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    out = np.full(len(flat), np.nan)
    for i in range(len(flat)) if idx is None else idx:
        out[i] = sample_grad_norm(model, flat[i])
    return out


def input_gradient(model: ClassifierModel, x: np.ndarray, cls: int) -> np.ndarray:
    """d P(cls | x) / d x for a single image, same shape as ``x``."""
    xt = ad.Tensor(np.asarray(x, dtype=np.float64).reshape(1, -1), requires_grad=True)
    p = ad.softmax(model.logits(xt))
    (g,) = ad.gradients((p * np.eye(model.num_classes)[cls]).sum(), [xt])
    return g.reshape(np.shape(x))


# ---------------------------------------------------------------- selection


def as_square_images(batch) -> np.ndarray:
    """``(B, H, W)`` view of a batch; flat ``(B, D)`` rows are read as square images."""
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 3:
        return x
    if x.ndim == 2:
        side = math.isqrt(x.shape[1])
        if side * side == x.shape[1]:
            return x.reshape(len(x), side, side)
    raise DimensionError(f"cannot interpret batch of shape {x.shape} as square images")


def area_of(passed_entropy: bool, plpd_value: float | None, tau_plpd: float) -> int:
    """Quadrant in the (entropy, PLPD) plane; a missing PLPD counts as not above threshold."""
    high_plpd = plpd_value is not None and plpd_value > tau_plpd
    if passed_entropy:
        return 4 if high_plpd else 3
    return 2 if high_plpd else 1


def select(
    model: ClassifierModel,
    batch: np.ndarray,
    thresholds: Thresholds,
    shuffle_spec: PatchShuffleSpec,
    gates: Sequence[str] = GATES_ETAGE,
    diagnostic: bool = False,
) -> Selection:
    """Run the gates on ``batch`` (``(B, H, W)`` images) and return all records.

    ``gates`` chooses which of ``"entropy"``, ``"grad"``, ``"plpd"`` are active;
    an inactive gate passes everything and its score is not computed. In
    ``diagnostic`` mode every score is computed for every sample, so the areas
    are exact, while selection is unchanged.
    """
    images = as_square_images(batch)
    n = len(images)
    flat = images.reshape(n, -1)
    unknown = set(gates) - set(GATES_ETAGE)
    if unknown:
        raise ParameterError(f"unknown gates {sorted(unknown)}")

    probs = predict_probs(model, flat).data
    ent = entropy(probs)
    pseudo = probs.argmax(axis=1)

    pass_ent = ent < thresholds.tau_ent if "entropy" in gates else np.ones(n, bool)

    grad = np.full(n, np.nan)
    pass_grad = np.ones(n, bool)
    cutoff = math.inf
    if "grad" in gates or diagnostic:
        want = range(n) if diagnostic else np.flatnonzero(pass_ent)
        grad = per_sample_grad_norms(model, flat, want)
    if "grad" in gates:
        if thresholds.tau_grad is not None:
            cutoff = thresholds.tau_grad
        elif pass_ent.any():
            cutoff = float(np.quantile(grad[pass_ent], thresholds.grad_quantile))
        pass_grad = grad < cutoff  # NaN compares False
    gate1 = pass_ent & pass_grad

    plpd_vals = np.full(n, np.nan)
    pass_plpd = np.ones(n, bool)
    if "plpd" in gates or diagnostic:
        want = np.arange(n) if diagnostic else np.flatnonzero(gate1)
        if len(want):
            shuffled = patch_shuffle(images[want], shuffle_spec)
            after = predict_probs(model, shuffled.reshape(len(want), -1)).data
            plpd_vals[want] = probs[want, pseudo[want]] - after[np.arange(len(want)), pseudo[want]]
    if "plpd" in gates:
        pass_plpd = plpd_vals > thresholds.tau_plpd
    chosen = gate1 & pass_plpd

    records = []
    for i in range(n):
        pv = None if np.isnan(plpd_vals[i]) else float(plpd_vals[i])
        records.append(
            SampleRecord(
                index=i,
                entropy=float(ent[i]),
                grad_norm=None if np.isnan(grad[i]) else float(grad[i]),
                plpd=pv,
                area=area_of(bool(pass_ent[i]), pv, thresholds.tau_plpd),
                selected=bool(chosen[i]),
                pseudo_label=int(pseudo[i]),
                passed_entropy=bool(pass_ent[i]),
                passed_grad=bool(pass_grad[i]),
            )
        )
    return Selection(records, [int(i) for i in np.flatnonzero(chosen)], int(gate1.sum()), cutoff, probs)


CSV_FIELDS = ("index", "entropy", "grad_norm", "plpd", "area", "selected", "pseudo_label")


def write_records_csv(records: Sequence[SampleRecord], path: str | Path, extra: dict | None = None) -> Path:
    """One row per sample; ``extra`` columns (e.g. batch index) are prepended."""
    path = Path(path)
    extra = extra or {}
    new = not path.exists()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow([*extra, *CSV_FIELDS])
        for r in records:
            w.writerow(
                [
                    *extra.values(),
                    r.index,
                    repr(r.entropy),
                    "" if r.grad_norm is None else repr(r.grad_norm),
                    "" if r.plpd is None else repr(r.plpd),
                    r.area,
                    int(r.selected),
                    r.pseudo_label,
                ]
            )
    return path
