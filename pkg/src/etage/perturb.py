"""Input transformations producing the perturbed view ``x'`` of an image."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParameterError


@dataclass(frozen=True)
class PatchShuffleSpec:
    patch_size: int = 4
    permutation_seed: int = 0
    per_image_permutation: bool = False

    def __post_init__(self):
        if self.patch_size < 1:
            raise ParameterError(f"patch_size must be positive, got {self.patch_size}")

    def with_seed(self, seed: int) -> PatchShuffleSpec:
        return PatchShuffleSpec(self.patch_size, seed, self.per_image_permutation)


def _grid(shape: tuple[int, int], patch_size: int) -> tuple[int, int]:
    h, w = shape
    if h % patch_size or w % patch_size:
        raise ParameterError(f"patch_size {patch_size} does not divide image shape {shape}")
    return h // patch_size, w // patch_size


def patch_permutation(shape: tuple[int, int], spec: PatchShuffleSpec, n: int = 1) -> np.ndarray:
    """Permutations of patch indices, one row per image (rows equal unless per-image)."""
    gh, gw = _grid(shape, spec.patch_size)
    rng = np.random.default_rng(spec.permutation_seed)
    if spec.per_image_permutation:
        return np.stack([rng.permutation(gh * gw) for _ in range(n)])
    return np.tile(rng.permutation(gh * gw), (n, 1))


def apply_patch_permutation(images: np.ndarray, perm: np.ndarray, patch_size: int) -> np.ndarray:
    """Output patch ``j`` of image ``i`` is input patch ``perm[i, j]``."""
    x = np.asarray(images)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    n, h, w = x.shape
    gh, gw = _grid((h, w), patch_size)
    perm = np.broadcast_to(np.atleast_2d(perm), (n, gh * gw))
    tiles = x.reshape(n, gh, patch_size, gw, patch_size).transpose(0, 1, 3, 2, 4).reshape(n, gh * gw, patch_size, patch_size)
    tiles = np.take_along_axis(tiles, perm[:, :, None, None], axis=1)
    out = tiles.reshape(n, gh, gw, patch_size, patch_size).transpose(0, 1, 3, 2, 4).reshape(n, h, w)
    return out[0] if squeeze else out


def patch_shuffle(images: np.ndarray, spec: PatchShuffleSpec) -> np.ndarray:
    """Rearrange non-overlapping ``patch_size`` tiles of a ``(H, W)`` image or ``(N, H, W)`` stack."""
    x = np.asarray(images)
    if x.ndim not in (2, 3):
        raise DimensionError(f"expected (H, W) or (N, H, W), got {x.shape}")
    n = 1 if x.ndim == 2 else x.shape[0]
    perm = patch_permutation(x.shape[-2:], spec, n)
    return apply_patch_permutation(x, perm, spec.patch_size)


def unshuffle(images: np.ndarray, spec: PatchShuffleSpec) -> np.ndarray:
    """Inverse of :func:`patch_shuffle` for the same spec."""
    x = np.asarray(images)
    n = 1 if x.ndim == 2 else x.shape[0]
    perm = patch_permutation(x.shape[-2:], spec, n)
    return apply_patch_permutation(x, np.argsort(perm, axis=1), spec.patch_size)


def unit_direction(shape: tuple[int, ...], seed: int) -> np.ndarray:
    u = np.random.default_rng(seed).standard_normal(shape)
    return u / np.linalg.norm(u)


def additive_perturb(image: np.ndarray, delta: np.ndarray | None = None, *, magnitude: float | None = None,
                     seed: int | None = None) -> np.ndarray:
    """Return ``image + delta`` without clamping.

    Either pass ``delta`` directly, or ``magnitude`` and ``seed`` to use
    ``magnitude`` times a seeded random unit direction.
    """
    x = np.asarray(image, dtype=np.float64)
    if delta is None:
        if magnitude is None or seed is None:
            raise ParameterError("give either delta or (magnitude, seed)")
        delta = magnitude * unit_direction(x.shape, seed)
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != x.shape:
        raise DimensionError(f"delta shape {delta.shape} does not match image shape {x.shape}")
    return x + delta
