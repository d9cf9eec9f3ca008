"""Online test-time adaptation loop and its baseline strategies.

Strategies differ only in which selection gates are active:

``no_adapt``      never updates
``tent``          entropy gate (or every sample with ``tent_all_samples``)
``entropy_plpd``  entropy + PLPD gates
``etage``         entropy + gradient-norm + PLPD gates

Each batch is first predicted with the current parameters and then used for
one SGD step on the summed entropy of the selected samples.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import AdaptationDivergenceError, ParameterError
from .model import ClassifierModel, adaptable_params, predict_probs
from .optim import SGD
from .perturb import PatchShuffleSpec
from .selection import Selection, Thresholds, entropy_loss, select

STRATEGIES = ("no_adapt", "tent", "entropy_plpd", "etage")

_GATES = {
    "tent": ("entropy",),
    "entropy_plpd": ("entropy", "plpd"),
    "etage": ("entropy", "grad", "plpd"),
}


@dataclass
class AdaptConfig:
    strategy: str = "etage"
    learning_rate: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 64
    thresholds: Thresholds | None = None
    shuffle_spec: PatchShuffleSpec = field(default_factory=PatchShuffleSpec)
    seed: int = 0
    tent_all_samples: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ParameterError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if not self.learning_rate > 0:
            raise ParameterError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be at least 1")

    def thresholds_for(self, num_classes: int) -> Thresholds:
        return self.thresholds or Thresholds.default(num_classes)

    @property
    def gates(self) -> tuple[str, ...]:
        if self.strategy == "tent" and self.tent_all_samples:
            return ()
        return _GATES.get(self.strategy, ())


@dataclass
class StepTrace:
    batch_index: int
    n_gate1_survivors: int
    n_selected: int
    loss_value: float
    param_update_norm: float


class OnlineAdapter:
    """Holds the model and the optimizer state that persists across batches."""

    def __init__(self, model: ClassifierModel, config: AdaptConfig):
        self.model = model
        self.config = config
        self.thresholds = config.thresholds_for(model.num_classes)
        self.params = adaptable_params(model)
        self.optimizer = (
            SGD(self.params, config.learning_rate, config.momentum) if self.params else None
        )
        self.batches_seen = 0
        self.last_selection: Selection | None = None

    def _shuffle_spec(self, batch_index: int) -> PatchShuffleSpec:
        # permutation resampled per batch, reproducible from the run seed
        seed = int(np.random.SeedSequence([self.config.seed, batch_index]).generate_state(1)[0])
        return self.config.shuffle_spec.with_seed(seed)

    def predict(self, batch: np.ndarray) -> np.ndarray:
        return predict_probs(self.model, np.asarray(batch).reshape(len(batch), -1)).data

    def step(self, batch: np.ndarray, diagnostic: bool = False) -> StepTrace:
        index = self.batches_seen
        self.batches_seen += 1
        images = np.asarray(batch, dtype=np.float64)
        if self.config.strategy == "no_adapt" or self.optimizer is None:
            self.last_selection = None
            return StepTrace(index, 0, 0, 0.0, 0.0)

        sel = select(
            self.model,
            images,
            self.thresholds,
            self._shuffle_spec(index),
            gates=self.config.gates,
            diagnostic=diagnostic,
        )
        self.last_selection = sel
        if not sel.selected:
            return StepTrace(index, sel.n_gate1, 0, 0.0, 0.0)

        flat = images.reshape(len(images), -1)[sel.selected]
        try:
            loss = entropy_loss(self.model, flat)
            value = loss.item()
            grads = ad.gradients(loss, self.params)
            update = self.optimizer.step(grads)
        except FloatingPointError:
            raise AdaptationDivergenceError(index, sel.selected, math.nan) from None
        if not math.isfinite(value):
            raise AdaptationDivergenceError(index, sel.selected, value)
        return StepTrace(index, sel.n_gate1, len(sel.selected), value, update)


def adapt_step(
    model: ClassifierModel,
    batch: np.ndarray,
    config: AdaptConfig,
    adapter: OnlineAdapter | None = None,
) -> StepTrace:
    """One selection + update on ``batch``. Pass ``adapter`` to keep momentum across calls."""
    adapter = adapter or OnlineAdapter(model, config)
    if adapter.model is not model:
        raise ParameterError("adapter was built for a different model")
    return adapter.step(batch)


@dataclass
class StreamResult:
    traces: list[StepTrace]
    probs: np.ndarray
    model: ClassifierModel
    selections: list[Selection | None] = field(default_factory=list, repr=False)

    @property
    def predictions(self) -> np.ndarray:
        return self.probs.argmax(axis=1)

    @property
    def selection_rate(self) -> float:
        seen = sum(1 for _ in self.traces)
        if not seen:
            return 0.0
        total = len(self.probs)
        return sum(t.n_selected for t in self.traces) / max(total, 1)


def run_stream(
    model: ClassifierModel,
    images: np.ndarray,
    config: AdaptConfig,
    copy_model: bool = True,
    keep_selections: bool = False,
    diagnostic: bool = False,
) -> StreamResult:
    """Predict-then-adapt over ``images`` in order, ``config.batch_size`` at a time.

    The last batch may be smaller. With ``copy_model`` the caller's model is
    left untouched and the adapted copy is returned.
    """
    m = model.copy() if copy_model else model
    adapter = OnlineAdapter(m, config)
    images = np.asarray(images, dtype=np.float64)
    probs, traces, sels = [], [], []
    for start in range(0, len(images), config.batch_size):
        batch = images[start : start + config.batch_size]
        probs.append(adapter.predict(batch))
        traces.append(adapter.step(batch, diagnostic=diagnostic))
        if keep_selections:
            sels.append(adapter.last_selection)
    out = np.concatenate(probs) if probs else np.zeros((0, m.num_classes))
    return StreamResult(traces, out, m, sels)


def write_traces(traces: list[StepTrace], path: str | Path) -> Path:
    """Append traces as JSON lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as fh:
        for t in traces:
            fh.write(json.dumps(asdict(t), sort_keys=True) + "\n")
    return path


def read_traces(path: str | Path) -> list[StepTrace]:
    with open(path) as fh:
        return [StepTrace(**json.loads(line)) for line in fh if line.strip()]
