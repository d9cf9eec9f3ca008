"""Feed-forward classifier with layer-norm blocks.

Each hidden block is ``linear -> layer_norm -> relu``; a linear head produces
the logits. After :func:`pretrain` the linear weights are frozen and only the
layer-norm scale/shift pairs stay trainable, which is the parameter subset the
test-time adaptation loop updates.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .errors import DimensionError, ParameterError, SchemaVersionError, TrainingDivergenceError
from .optim import SGD

CHECKPOINT_VERSION = 1
LN_EPS = 1e-5


@dataclass
class Block:
    weight: Tensor
    bias: Tensor
    gamma: Tensor
    beta: Tensor


class ClassifierModel:
    def __init__(
        self,
        input_dim: int = 256,
        hidden: tuple[int, ...] = (128, 128),
        num_classes: int = 4,
        seed: int = 0,
        eps: float = LN_EPS,
    ):
        if input_dim < 1 or num_classes < 1 or any(h < 1 for h in hidden):
            raise ParameterError("dimensions must be positive")
        self.input_dim = int(input_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.num_classes = int(num_classes)
        self.eps = float(eps)
        self.seed = int(seed)
        rng = np.random.default_rng(seed)
        self.blocks: list[Block] = []
        fan_in = self.input_dim
        for width in self.hidden:
            bound = np.sqrt(6.0 / (fan_in + width))
            self.blocks.append(
                Block(
                    weight=Tensor(rng.uniform(-bound, bound, (fan_in, width)), True, "weight"),
                    bias=Tensor(np.zeros(width), True, "bias"),
                    gamma=Tensor(np.ones(width), True, "gamma"),
                    beta=Tensor(np.zeros(width), True, "beta"),
                )
            )
            fan_in = width
        bound = np.sqrt(6.0 / (fan_in + self.num_classes))
        self.head_weight = Tensor(rng.uniform(-bound, bound, (fan_in, self.num_classes)), True, "head_weight")
        self.head_bias = Tensor(np.zeros(self.num_classes), True, "head_bias")

    # -- parameter views

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, b in enumerate(self.blocks):
            out += [
                (f"blocks.{i}.weight", b.weight),
                (f"blocks.{i}.bias", b.bias),
                (f"blocks.{i}.gamma", b.gamma),
                (f"blocks.{i}.beta", b.beta),
            ]
        out += [("head.weight", self.head_weight), ("head.bias", self.head_bias)]
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def norm_params(self) -> list[Tensor]:
        return [t for b in self.blocks for t in (b.gamma, b.beta)]

    def frozen_params(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.named_parameters() if not t.requires_grad]

    def freeze_for_adaptation(self) -> None:
        """Freeze everything except the layer-norm affine tensors."""
        norm = {id(t) for t in self.norm_params()}
        for t in self.parameters():
            t.requires_grad = id(t) in norm

    def freeze_all(self) -> None:
        for t in self.parameters():
            t.requires_grad = False

    def copy(self) -> ClassifierModel:
        return copy.deepcopy(self)

    def frozen_hash(self) -> str:
        """sha256 over names and raw bytes of every frozen tensor."""
        h = hashlib.sha256()
        for name, t in self.frozen_params():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def state_hash(self) -> str:
        h = hashlib.sha256()
        for name, t in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    # -- forward

    def _as_input(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            arr = np.asarray(x, dtype=np.float64)
            x = Tensor(arr.reshape(arr.shape[0], -1) if arr.ndim > 2 else arr)
        if x.data.ndim != 2 or x.shape[1] != self.input_dim:
            raise DimensionError(f"expected input of shape (B, {self.input_dim}), got {x.shape}")
        return x

    def logits(self, x) -> Tensor:
        h = self._as_input(x)
        for b in self.blocks:
            h = ad.relu(ad.layer_norm(h @ b.weight + b.bias, b.gamma, b.beta, self.eps))
        return h @ self.head_weight + self.head_bias

    __call__ = logits


def adaptable_params(model: ClassifierModel) -> list[Tensor]:
    """Layer-norm gamma/beta tensors currently marked trainable, block order."""
    return [t for t in model.norm_params() if t.requires_grad]


def predict_probs(model: ClassifierModel, batch) -> Tensor:
    """Softmax class probabilities, shape ``(B, C)``, recorded on no tape."""
    with no_grad():
        return ad.softmax(model.logits(batch))


def flatten_images(images: np.ndarray) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    return images.reshape(images.shape[0], -1)


# ---------------------------------------------------------------- pretraining


@dataclass
class PretrainConfig:
    epochs: int = 100
    learning_rate: float = 0.05
    batch_size: int = 64
    seed: int = 0
    momentum: float = 0.9

    def __post_init__(self):
        if self.epochs < 0 or self.learning_rate <= 0 or self.batch_size < 1:
            raise ParameterError(f"invalid pretraining config {self}")


@dataclass
class TrainingCurve:
    epoch_loss: list[float] = field(default_factory=list)
    epoch_train_acc: list[float] = field(default_factory=list)
    val_accuracy: float | None = None


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    onehot = np.eye(logits.shape[1])[labels]
    return -(ad.log_softmax(logits) * onehot).sum() / len(labels)


def pretrain(
    model: ClassifierModel,
    images: np.ndarray,
    labels: np.ndarray,
    config: PretrainConfig | None = None,
    val: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[ClassifierModel, TrainingCurve]:
    """Fit all parameters with mini-batch SGD on cross-entropy, then freeze.

    The model is trained in place and returned with its per-epoch curve.
    """
    config = config or PretrainConfig()
    x = flatten_images(images)
    y = np.asarray(labels, dtype=np.int64)
    if len(x) != len(y):
        raise DimensionError("images and labels differ in length")
    if y.size and (y.min() < 0 or y.max() >= model.num_classes):
        raise ParameterError(f"labels must lie in [0, {model.num_classes})")

    for t in model.parameters():
        t.requires_grad = True
    params = model.parameters()
    opt = SGD(params, config.learning_rate, config.momentum)
    rng = np.random.default_rng(config.seed)
    curve = TrainingCurve()

    for epoch in range(config.epochs):
        order = rng.permutation(len(x))
        total, correct = 0.0, 0
        for start in range(0, len(x), config.batch_size):
            idx = order[start : start + config.batch_size]
            try:
                logits = model.logits(x[idx])
                loss = cross_entropy(logits, y[idx])
                grads = ad.gradients(loss, params)
                opt.step(grads)
            except FloatingPointError:
                raise TrainingDivergenceError(epoch, float("nan")) from None
            total += loss.item() * len(idx)
            correct += int((logits.data.argmax(axis=1) == y[idx]).sum())
        mean_loss = total / max(len(x), 1)
        if not np.isfinite(mean_loss):
            raise TrainingDivergenceError(epoch, mean_loss)
        curve.epoch_loss.append(mean_loss)
        curve.epoch_train_acc.append(correct / max(len(x), 1))

    model.freeze_for_adaptation()
    if val is not None:
        probs = predict_probs(model, val[0]).data
        curve.val_accuracy = float((probs.argmax(axis=1) == np.asarray(val[1])).mean())
    return model, curve


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model: ClassifierModel, path: str | Path, pretrain_seed: int | None = None) -> Path:
    """Write an ``.npz`` container: one array per tensor plus a JSON header."""
    path = Path(path)
    header = {
        "version": CHECKPOINT_VERSION,
        "input_dim": model.input_dim,
        "hidden": list(model.hidden),
        "num_classes": model.num_classes,
        "eps": model.eps,
        "init_seed": model.seed,
        "pretrain_seed": pretrain_seed,
        "tensors": [
            {"name": n, "shape": list(t.shape), "adaptable": bool(t.requires_grad)}
            for n, t in model.named_parameters()
        ],
    }
    arrays = {n: t.data for n, t in model.named_parameters()}
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8), **arrays)
    return path


def load_checkpoint(path: str | Path) -> tuple[ClassifierModel, dict]:
    with np.load(Path(path), allow_pickle=False) as npz:
        header = json.loads(npz["__header__"].tobytes().decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise SchemaVersionError(
                f"checkpoint version {header.get('version')} unsupported (expected {CHECKPOINT_VERSION})"
            )
        model = ClassifierModel(
            header["input_dim"], tuple(header["hidden"]), header["num_classes"], header["init_seed"], header["eps"]
        )
        by_name = dict(model.named_parameters())
        for entry in header["tensors"]:
            t = by_name[entry["name"]]
            t.assign(npz[entry["name"]])
            t.requires_grad = entry["adaptable"]
    return model, header


def pretrain_config_dict(cfg: PretrainConfig) -> dict:
    return asdict(cfg)
