"""Pixel-shuffle downsampling, asymmetric train/test strides and self-ensembling."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Union

import numpy as np

from . import tensor as T
from .tensor import Tensor

Array = Union[np.ndarray, Tensor]


@dataclass
class PDConfig:
    s_train: int = 5
    s_test: int = 2
    pad_mode: str = "reflect"

    def __post_init__(self):
        if self.s_train < 1 or self.s_test < 1:
            raise ValueError("pixel-shuffle strides must be >= 1")

    def stride(self, phase: str) -> int:
        if phase == "train":
            return self.s_train
        if phase == "test":
            return self.s_test
        raise ValueError(f"phase must be 'train' or 'test', got {phase!r}")


def _check_stride(shape, s: int) -> None:
    if s < 1:
        raise ValueError("stride must be >= 1")
    h, w = shape[2:]
    if h % s or w % s:
        raise ValueError(f"stride {s} does not divide {h}x{w}; pad first")


def pd_down(x: Array, s: int) -> Array:
    """(n, c, h, w) -> (n*s*s, c, h/s, w/s).

    Sub-image ``k*s*s + i*s + j`` holds pixels (i + a*s, j + b*s) of image
    ``k``.  Tensors stay on the tape; arrays are rearranged directly.
    """
    _check_stride(x.shape, s)
    n, c, h, w = x.shape
    split = (n, c, h // s, s, w // s, s)
    axes = (0, 3, 5, 1, 2, 4)
    merged = (n * s * s, c, h // s, w // s)
    if isinstance(x, Tensor):
        return T.reshape(T.transpose(T.reshape(x, split), axes), merged)
    return np.ascontiguousarray(x.reshape(split).transpose(axes)).reshape(merged)


def pd_up(mosaic: Array, s: int) -> Array:
    """Inverse of :func:`pd_down`."""
    ns2, c, hs, ws = mosaic.shape
    if ns2 % (s * s):
        raise ValueError(f"batch {ns2} is not a multiple of {s * s}")
    n = ns2 // (s * s)
    split = (n, s, s, c, hs, ws)
    axes = (0, 3, 4, 1, 5, 2)
    merged = (n, c, hs * s, ws * s)
    if isinstance(mosaic, Tensor):
        return T.reshape(T.transpose(T.reshape(mosaic, split), axes), merged)
    return np.ascontiguousarray(mosaic.reshape(split).transpose(axes)).reshape(merged)


def pad_to_multiple(image: np.ndarray, unit: int, mode: str = "reflect") -> np.ndarray:
    """Pad bottom/right so both spatial sizes are multiples of ``unit``."""
    h, w = image.shape[2:]
    ph, pw = -h % unit, -w % unit
    if ph == 0 and pw == 0:
        return image
    return np.pad(image, ((0, 0), (0, 0), (0, ph), (0, pw)), mode=mode)


def denoise_asymmetric(model, image: np.ndarray, cfg: PDConfig, phase: str = "test") -> np.ndarray:
    """Pad, pixel-shuffle with the phase's stride, run the network, undo it all.

    Output has exactly the input's shape.
    """
    image = np.asarray(image)
    if image.ndim != 4 or image.shape[1] != 3:
        raise ValueError(f"expected an (n, 3, h, w) image, got {image.shape}")
    s = cfg.stride(phase)
    h, w = image.shape[2:]
    padded = pad_to_multiple(image, s * model.grid_lcm, cfg.pad_mode)
    with T.no_grad():
        sub = pd_down(padded.astype(T.default_dtype(), copy=False), s)
        out = model(Tensor(sub)).data
    return pd_up(np.asarray(out), s)[:, :, :h, :w]


def dihedral(x: np.ndarray, t: int) -> np.ndarray:
    """Transform ``t`` in 0..7: t % 4 quarter turns, then a horizontal flip if t >= 4."""
    y = np.rot90(x, t % 4, axes=(2, 3))
    return y[..., ::-1] if t >= 4 else y


def dihedral_inverse(x: np.ndarray, t: int) -> np.ndarray:
    y = x[..., ::-1] if t >= 4 else x
    return np.rot90(y, -(t % 4), axes=(2, 3))


def self_ensemble(model, image: np.ndarray, cfg: PDConfig,
                  transforms: Iterable[int] = range(8), phase: str = "test") -> np.ndarray:
    """Mean of :func:`denoise_asymmetric` over dihedral transforms of the input.

    Members are averaged in the order given.
    """
    transforms = list(transforms)
    if not transforms:
        raise ValueError("need at least one transform")
    total = None
    for t in transforms:
        out = dihedral_inverse(denoise_asymmetric(model, np.ascontiguousarray(dihedral(image, t)),
                                                  cfg, phase), t)
        total = out.copy() if total is None else total + out
    return total / len(transforms)
