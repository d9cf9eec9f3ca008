"""Accuracy and calibration metrics over predicted distributions.

All functions accept either a sequence of :class:`EvalRecord` or an
:class:`EvalSet` (the array form used internally). Conventions:

* ECE/MCE use ``n_bins`` equal-width confidence bins on ``(0, 1]``; a
  confidence ``c`` lands in bin ``ceil(c * n_bins) - 1``.
* Brier is the squared error to the one-hot truth averaged over classes
  as well as records, so it lies in ``[0, 2 / C]``.
* AUROC scores confidence as a detector of correct predictions, with tied
  pairs counting one half.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError, ParameterError, UndefinedMetricError

DEFAULT_BINS = 15


@dataclass(frozen=True)
class EvalRecord:
    confidence: float
    predicted: int
    true_label: int
    full_probs: tuple[float, ...]

    def __post_init__(self):
        p = np.asarray(self.full_probs, dtype=np.float64)
        if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
            raise ContractError("full_probs is not a probability distribution")
        if self.confidence != p.max():
            raise ContractError("confidence must equal max(full_probs)")
        if not 0 <= self.true_label < len(p) or not 0 <= self.predicted < len(p):
            raise ContractError("class index out of range")


@dataclass(frozen=True)
class EvalSet:
    """Array form of a record list; ``confidence`` and ``predicted`` default to max/argmax."""

    probs: np.ndarray  # (N, C)
    labels: np.ndarray  # (N,)
    confidence: np.ndarray | None = None
    predicted: np.ndarray | None = None

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if p.ndim != 2 or y.shape != (len(p),):
            raise ContractError(f"probs {p.shape} and labels {y.shape} do not line up")
        object.__setattr__(self, "probs", p)
        object.__setattr__(self, "labels", y)
        if self.confidence is None:
            object.__setattr__(self, "confidence", p.max(axis=1) if len(p) else np.zeros(0))
        if self.predicted is None:
            object.__setattr__(self, "predicted", p.argmax(axis=1) if len(p) else np.zeros(0, np.int64))

    @classmethod
    def from_probs(cls, probs, labels) -> EvalSet:
        return cls(probs, labels)

    @property
    def correct(self) -> np.ndarray:
        return self.predicted == self.labels

    def records(self) -> list[EvalRecord]:
        return [
            EvalRecord(float(c), int(k), int(y), tuple(float(v) for v in p))
            for p, y, c, k in zip(self.probs, self.labels, self.confidence, self.predicted)
        ]


def make_records(probs, labels) -> list[EvalRecord]:
    return EvalSet(probs, labels).records()


def _as_set(records: Sequence[EvalRecord] | EvalSet) -> EvalSet:
    if not isinstance(records, EvalSet):
        records = list(records)
        if not records:
            raise UndefinedMetricError("metric undefined on an empty record set")
        # stored predictions win over argmax so ties stay as recorded
        records = EvalSet(
            np.array([r.full_probs for r in records], dtype=np.float64),
            np.array([r.true_label for r in records]),
            np.array([r.confidence for r in records], dtype=np.float64),
            np.array([r.predicted for r in records]),
        )
    if len(records.labels) == 0:
        raise UndefinedMetricError("metric undefined on an empty record set")
    return records


def accuracy(records) -> float:
    return float(_as_set(records).correct.mean())


def _bins(s: EvalSet, n_bins: int):
    if n_bins < 1:
        raise ParameterError("n_bins must be at least 1")
    conf = s.confidence
    idx = np.clip(np.ceil(conf * n_bins).astype(np.int64) - 1, 0, n_bins - 1)
    # c * n rounds; nudge so that idx / n < c <= (idx + 1) / n holds in floating point
    idx = idx - (conf <= idx / n_bins)
    idx = idx + (conf > (idx + 1) / n_bins)
    idx = np.clip(idx, 0, n_bins - 1)
    count = np.bincount(idx, minlength=n_bins)
    hits = np.bincount(idx, weights=s.correct.astype(np.float64), minlength=n_bins)
    mass = np.bincount(idx, weights=conf, minlength=n_bins)
    nz = count > 0
    gap = np.abs(hits[nz] - mass[nz]) / count[nz]
    return count[nz], gap


def ece(records, n_bins: int = DEFAULT_BINS) -> float:
    s = _as_set(records)
    count, gap = _bins(s, n_bins)
    return float((count * gap).sum() / count.sum())


def mce(records, n_bins: int = DEFAULT_BINS) -> float:
    s = _as_set(records)
    _, gap = _bins(s, n_bins)
    return float(gap.max())


def brier(records) -> float:
    s = _as_set(records)
    n, c = s.probs.shape
    onehot = np.zeros_like(s.probs)
    onehot[np.arange(n), s.labels] = 1.0
    return float(((s.probs - onehot) ** 2).mean())


def auroc(records) -> float:
    """Mann-Whitney estimate of P(conf_correct > conf_wrong) + P(tie) / 2."""
    s = _as_set(records)
    pos = s.correct
    n_pos = int(pos.sum())
    n_neg = len(pos) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both correct and incorrect predictions")
    ranks = rankdata(s.confidence)  # average ranks give ties one half
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def summarize(records, n_bins: int = DEFAULT_BINS) -> dict[str, float | None]:
    """All metrics; AUROC is ``None`` when only one outcome occurs."""
    s = _as_set(records)
    try:
        auc = auroc(s)
    except UndefinedMetricError:
        auc = None
    return {
        "accuracy": accuracy(s),
        "ece": ece(s, n_bins),
        "mce": mce(s, n_bins),
        "brier": brier(s),
        "auroc": auc,
    }
