"""Stochastic strong augmentation for unlabelled target samples: horizontal
flip, vertical flip, right-angle rotation, and color jitter, each applied
independently with 50% probability. The weak view is the identity."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import GeometryError


@dataclass
class AugmentConfig:
    probability: float = 0.5
    enable_hflip: bool = True
    enable_vflip: bool = True
    enable_rotate: bool = True
    enable_jitter: bool = True
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    hue: float = 0.1           # fraction of a full hue circle
    value_range: tuple = (0.0, 1.0)

    def validate(self):
        if not 0.0 <= self.probability <= 1.0:
            raise GeometryError(f"occurrence probability must lie in [0,1], got {self.probability}")
        for name in ("brightness", "contrast", "saturation", "hue"):
            if getattr(self, name) < 0:
                raise GeometryError(f"jitter range '{name}' must be nonnegative")


def _as_array(x):
    return x.data if isinstance(x, T.Tensor) else np.asarray(x)


def _wrap(data, like):
    return T.Tensor(data, dtype=data.dtype) if isinstance(like, T.Tensor) else data


def hflip(x):
    """Reverse the width axis of a [c,h,w] image."""
    arr = _as_array(x)
    return _wrap(arr[:, :, ::-1].copy(), x)


def vflip(x):
    """Reverse the height axis of a [c,h,w] image."""
    arr = _as_array(x)
    return _wrap(arr[:, ::-1, :].copy(), x)


def rot90k(x, k):
    """Rotate a square [c,h,w] image counter-clockwise by k quarter turns."""
    arr = _as_array(x)
    if arr.shape[1] != arr.shape[2]:
        raise GeometryError(f"rotation requires square images, got {arr.shape}")
    return _wrap(np.rot90(arr, k=k % 4, axes=(1, 2)).copy(), x)


# luma weights and the YIQ-style hue rotation used for 3-channel jitter
_LUMA = np.array([0.299, 0.587, 0.114])
_RGB_TO_YIQ = np.array([[0.299, 0.587, 0.114],
                        [0.596, -0.274, -0.322],
                        [0.211, -0.523, 0.312]])
_YIQ_TO_RGB = np.linalg.inv(_RGB_TO_YIQ)


def _hue_matrix(theta):
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    return _YIQ_TO_RGB @ rot @ _RGB_TO_YIQ


def color_jitter(x, rng, cfg: AugmentConfig):
    """Brightness and contrast for any channel count; saturation and hue only
    for 3-channel imagery. Output clamped to the declared value range."""
    arr = _as_array(x).astype(np.float64)
    channels = arr.shape[0]

    if cfg.brightness > 0:
        arr = arr * rng.uniform(1 - cfg.brightness, 1 + cfg.brightness)
    if cfg.contrast > 0:
        factor = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)
        mean = arr.mean(axis=(1, 2), keepdims=True)
        arr = mean + (arr - mean) * factor
    if channels == 3:
        if cfg.saturation > 0:
            factor = rng.uniform(1 - cfg.saturation, 1 + cfg.saturation)
            gray = np.tensordot(_LUMA, arr, axes=(0, 0))[None, :, :]
            arr = gray + (arr - gray) * factor
        if cfg.hue > 0:
            theta = rng.uniform(-cfg.hue, cfg.hue) * 2.0 * np.pi
            arr = np.tensordot(_hue_matrix(theta), arr, axes=(1, 0))

    lo, hi = cfg.value_range
    arr = np.clip(arr, lo, hi)
    out = arr.astype(_as_array(x).dtype)
    return _wrap(out, x)


def augment(x, rng, cfg: AugmentConfig | None = None):
    """Apply each enabled transform independently with probability
    cfg.probability. Pure for a fixed rng state; shape-preserving."""
    cfg = cfg or AugmentConfig()
    cfg.validate()
    arr = _as_array(x)
    if arr.ndim != 3:
        raise GeometryError(f"augment expects a [c,h,w] image, got shape {arr.shape}")
    if cfg.enable_rotate and arr.shape[1] != arr.shape[2]:
        raise GeometryError(f"rotation enabled but image is {arr.shape[1]}x{arr.shape[2]}")

    out = arr
    if cfg.enable_hflip and rng.random() < cfg.probability:
        out = out[:, :, ::-1]
    if cfg.enable_vflip and rng.random() < cfg.probability:
        out = out[:, ::-1, :]
    if cfg.enable_rotate and rng.random() < cfg.probability:
        out = np.rot90(out, k=int(rng.integers(0, 4)), axes=(1, 2))
    out = out.copy()
    if cfg.enable_jitter and rng.random() < cfg.probability:
        out = _as_array(color_jitter(out, rng, cfg))
    return _wrap(out, x)


def augment_batch(batch: np.ndarray, rng, cfg: AugmentConfig | None = None) -> np.ndarray:
    """Augment each sample of a [b,c,h,w] array in order."""
    return np.stack([_as_array(augment(batch[i], rng, cfg)) for i in range(batch.shape[0])])
