"""Adversarial "noisy-gradient" samples for stress-testing the gradient gate.

A salted sample is built from a real test image in two phases:

1. signed input-gradient steps toward a fixed wrong class until the model is
   confident in it;
2. projected sign steps that combine three pulls. One moves the sample's
   entropy gradient (over the adaptable parameters) against the descent
   direction of a labelled reference loss, so an update on it hurts. One
   shrinks the spread of the last hidden block's pre-normalization
   activations, which inflates that gradient. One keeps the entropy just
   below the confidence gate.

Among the phase-2 iterates that still pass the entropy gate and lose enough
confidence under patch shuffling, the one with the largest gradient norm is
kept. Such samples slip through the entropy and PLPD gates, so only the
gradient gate can reject them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ParameterError
from .model import ClassifierModel, adaptable_params, cross_entropy, predict_probs
from .perturb import PatchShuffleSpec, patch_shuffle
from .selection import entropy, sample_grad_norm


@dataclass(frozen=True)
class SaltConfig:
    fraction: float = 0.05
    target_class: int = 0
    attack_steps: int = 60
    attack_step_size: float = 0.01
    steps: int = 100
    step_size: float = 0.005
    entropy_target: float = 0.8  # fraction of the entropy gate aimed for
    entropy_ceiling: float = 0.95  # accepted iterates stay below this fraction
    pin_weight: float = 50.0
    min_plpd: float = 0.3
    probe_permutations: int = 3
    patch_size: int = 4
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.fraction <= 1:
            raise ParameterError("fraction must lie in [0, 1]")
        if self.steps < 0 or self.attack_steps < 0:
            raise ParameterError("step counts must be non-negative")


@dataclass
class SaltedStream:
    images: np.ndarray  # (N, H, W)
    labels: np.ndarray
    salted: np.ndarray  # bool mask

    @property
    def clean_mask(self) -> np.ndarray:
        return ~self.salted


def _flat_grads(grads) -> np.ndarray:
    return np.concatenate([g.ravel() for g in grads])


class _Crafter:
    def __init__(self, model: ClassifierModel, harm: list[np.ndarray], tau_ent: float, config: SaltConfig):
        # private copy: the directional derivatives move its parameters around
        self.model = model.copy()
        self.params = adaptable_params(self.model)
        self.harm = harm
        self.tau_ent = tau_ent
        self.cfg = config
        self.probes = [PatchShuffleSpec(config.patch_size, config.seed + k) for k in range(config.probe_permutations)]
        self.side = math.isqrt(model.input_dim)

    def _input_grad(self, x: np.ndarray, target: int | None = None) -> np.ndarray:
        xt = ad.Tensor(x[None], requires_grad=True)
        logits = self.model.logits(xt)
        if target is None:
            f = ad.entropy(logits).sum()
        else:
            f = (ad.log_softmax(logits) * np.eye(self.model.num_classes)[target]).sum()
        return ad.gradients(f, [xt])[0][0]

    def _mixed(self, x: np.ndarray, direction: list[np.ndarray], h: float = 1e-4) -> np.ndarray:
        """d/dx of <dEnt/dtheta, direction>, by central differences in theta."""
        base = [p.data.copy() for p in self.params]
        out = []
        for sign in (1.0, -1.0):
            for p, b, d in zip(self.params, base, direction):
                p.assign(b + sign * h * d)
            out.append(self._input_grad(x))
        for p, b in zip(self.params, base):
            p.assign(b)
        return (out[0] - out[1]) / (2 * h)

    def _spread_grad(self, x: np.ndarray) -> np.ndarray:
        xt = ad.Tensor(x[None], requires_grad=True)
        h = xt
        for b in self.model.blocks[:-1]:
            h = ad.relu(ad.layer_norm(h @ b.weight + b.bias, b.gamma, b.beta, self.model.eps))
        last = self.model.blocks[-1]
        a = h @ last.weight + last.bias
        c = a - a.mean()
        return ad.gradients((c * c).mean(), [xt])[0][0]

    def _probs(self, x: np.ndarray) -> np.ndarray:
        return predict_probs(self.model, x[None]).data[0]

    def _admissible(self, x: np.ndarray) -> bool:
        p = self._probs(x)
        if entropy(p) >= self.cfg.entropy_ceiling * self.tau_ent:
            return False
        yhat = int(p.argmax())
        img = x.reshape(1, self.side, self.side)
        after = [predict_probs(self.model, patch_shuffle(img, s).reshape(1, -1)).data[0, yhat] for s in self.probes]
        return p[yhat] - float(np.mean(after)) > self.cfg.min_plpd

    @staticmethod
    def _unit(v: np.ndarray) -> np.ndarray:
        n = np.linalg.norm(v)
        return v / n if n > 0 else v

    def craft(self, x0: np.ndarray, target: int) -> np.ndarray:
        cfg = self.cfg
        x = np.asarray(x0, dtype=np.float64).ravel().copy()
        for _ in range(cfg.attack_steps):
            x = np.clip(x + cfg.attack_step_size * np.sign(self._input_grad(x, target)), 0.0, 1.0)
            if self._probs(x)[target] > 0.9:
                break
        best, best_norm = x.copy(), -1.0
        pin = cfg.entropy_target * self.tau_ent
        for _ in range(cfg.steps):
            excess = max(entropy(self._probs(x)) - pin, 0.0)
            d = (
                self._unit(-self._mixed(x, self.harm))
                - self._unit(self._spread_grad(x))
                - 2 * cfg.pin_weight * excess * self._unit(self._input_grad(x))
            )
            x = np.clip(x + cfg.step_size * np.sign(d), 0.0, 1.0)
            if self._admissible(x):
                g = sample_grad_norm(self.model, x)
                if g > best_norm:
                    best, best_norm = x.copy(), g
        return best


def harm_direction(model: ClassifierModel, images: np.ndarray, labels: np.ndarray) -> list[np.ndarray]:
    """Gradient of the labelled cross-entropy on ``images`` w.r.t. the adaptable parameters."""
    x = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    return ad.gradients(cross_entropy(model.logits(ad.Tensor(x)), np.asarray(labels)), adaptable_params(model))


def craft_salted_sample(
    model: ClassifierModel,
    image: np.ndarray,
    target: int,
    harm: list[np.ndarray],
    tau_ent: float,
    config: SaltConfig = SaltConfig(),
) -> np.ndarray:
    """One gradient-scaled sample derived from ``image`` (same shape)."""
    out = _Crafter(model, harm, tau_ent, config).craft(image, target)
    return out.reshape(np.shape(image))


def salt_stream(
    model: ClassifierModel,
    images: np.ndarray,
    labels: np.ndarray,
    reference_images: np.ndarray,
    reference_labels: np.ndarray,
    tau_ent: float,
    config: SaltConfig = SaltConfig(),
) -> SaltedStream:
    """Replace ``config.fraction`` of a stream, at seeded positions, with salted samples.

    The attacker knows the source model and a labelled reference set (used
    only to pick a harmful direction). Samples whose label equals the target
    class are pushed to the next class instead. The model is not modified.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(images)
    k = int(config.fraction * n)
    rng = np.random.default_rng(config.seed)
    pos = np.sort(rng.choice(n, size=k, replace=False)) if k else np.zeros(0, int)
    crafter = _Crafter(model, harm_direction(model, reference_images, reference_labels), tau_ent, config)
    out = images.copy()
    C = model.num_classes
    for i in pos:
        t = config.target_class if labels[i] != config.target_class else (config.target_class + 1) % C
        out[i] = crafter.craft(images[i], t).reshape(images.shape[1:])
    mask = np.zeros(n, bool)
    mask[pos] = True
    return SaltedStream(out, labels.copy(), mask)
