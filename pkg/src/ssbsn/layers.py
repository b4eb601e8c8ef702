"""Building blocks of the blind-spot network.

Masked convolution creates the blind spot, dilated convolution blocks carry
features along the dilation lattice, and the self-similarity attention mixes
pixels that share a coarser grid of that same lattice.
"""
from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def uniform(rng: np.random.Generator, shape, bound: float) -> Tensor:
    return parameter(rng.uniform(-bound, bound, size=shape))


def zeros(shape) -> Tensor:
    return parameter(np.zeros(shape))


def center_mask(k: int) -> np.ndarray:
    """Binary (k, k) mask that is 0 at the centre tap and 1 elsewhere."""
    if k % 2 != 1:
        raise ValueError(f"masked convolution needs an odd kernel, got {k}")
    mask = np.ones((k, k))
    mask[k // 2, k // 2] = 0
    return mask


def derive_dilation(k_mc: int) -> int:
    """Dilation that keeps later layers off the masked centre: (k_mc + 1) / 2."""
    if k_mc < 1 or k_mc % 2 != 1:
        raise ValueError(f"kernel size must be a positive odd integer, got {k_mc}")
    return (k_mc + 1) // 2


class Module:
    """Minimal parameter container; parameters are listed in attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, dilation: int = 1,
                 rng: Optional[np.random.Generator] = None):
        if k % 2 != 1:
            raise ValueError(f"kernel size must be odd, got {k}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.k = k
        self.dilation = dilation
        self.weight = uniform(rng, (c_out, c_in, k, k), 1 / math.sqrt(c_in * k * k))
        self.bias = zeros(c_out)

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.dilation)


class MaskedConv2d(Conv2d):
    """Convolution whose centre tap is multiplied by zero on every call."""

    def __init__(self, c_in: int, c_out: int, k_mc: int,
                 rng: Optional[np.random.Generator] = None):
        self.mask = center_mask(k_mc)
        super().__init__(c_in, c_out, k_mc, 1, rng)

    @property
    def k_mc(self) -> int:
        return self.k

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, 1, mask=self.mask)


class Conv1x1(Module):
    def __init__(self, c_in: int, c_out: int, rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = uniform(rng, (c_out, c_in), 1 / math.sqrt(c_in))
        self.bias = zeros(c_out)

    def forward(self, x: Tensor) -> Tensor:
        return T.conv1x1(x, self.weight, self.bias)


class DConvBlock(Module):
    """dilated 3x3 -> ReLU -> dilated 3x3 -> ReLU -> 1x1, plus an optional skip."""

    def __init__(self, channels: int, dilation: int, residual: bool = True,
                 rng: Optional[np.random.Generator] = None):
        self.dilation = dilation
        self.residual = residual
        self.conv1 = Conv2d(channels, channels, 3, dilation, rng)
        self.conv2 = Conv2d(channels, channels, 3, dilation, rng)
        self.proj = Conv1x1(channels, channels, rng)

    def forward(self, x: Tensor) -> Tensor:
        with T.flop_scope("dconv"):
            y = T.relu(self.conv1(x))
            y = T.relu(self.conv2(y))
            y = self.proj(y)
        return y + x if self.residual else y


class SSAttention(Module):
    """Single-head grid attention with a shared query/key transform.

    Pixels are grouped on a ``dhat`` lattice; inside each group the logits are
    (1 + cos(Q, K)) / sqrt(C), values are the un-normalised input and the
    input is added back after attention.  ``qk_integration=False`` learns
    separate query and key matrices, ``cosine_similarity=False`` swaps the
    logits for Q K^T / sqrt(C).
    """

    def __init__(self, channels: int, dhat: int, qk_integration: bool = True,
                 cosine_similarity: bool = True, rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels = channels
        self.dhat = dhat
        self.qk_integration = qk_integration
        self.cosine_similarity = cosine_similarity
        self.norm_weight = parameter(np.ones(channels))
        self.norm_shift = zeros(channels)
        bound = 1 / math.sqrt(channels)
        if qk_integration:
            self.w_qk = uniform(rng, (channels, channels), bound)
        else:
            self.w_q = uniform(rng, (channels, channels), bound)
            self.w_k = uniform(rng, (channels, channels), bound)
        self.capture = False
        self.last_attention: Optional[np.ndarray] = None

    def logits(self, y: Tensor) -> Tensor:
        """Attention logits for grouped, normalised features ``y`` (n, G, L, C)."""
        if self.qk_integration:
            q = k = y @ self.w_qk
            transforms = 1
        else:
            q, k = y @ self.w_q, y @ self.w_k
            transforms = 2
        n, groups, length, c = y.shape
        T._record(transforms * n * groups * length * c, "attention")
        if self.cosine_similarity:
            sim = T.cosine_matrix(q, k) + 1.0
        else:
            sim = q @ T.transpose(k, (0, 1, 3, 2))
        return T.scale(sim, 1 / math.sqrt(c))

    def forward(self, z: Tensor) -> Tensor:
        with T.flop_scope("attention"):
            y = T.layer_norm_channels(z, self.norm_weight, self.norm_shift)
            yg = T.grid_partition(y, self.dhat)
            zg = T.grid_partition(z, self.dhat)
            attn = T.softmax_rows(self.logits(yg.blocks))
            if self.capture:
                self.last_attention = attn.data.copy()
            n, groups, length, c = zg.blocks.shape
            T._record(2 * n * groups * length * length * c, "attention")
            out = attn @ zg.blocks + zg.blocks
            return T.grid_merge(T.GridView(out, self.dhat, zg.height, zg.width))


class SSBlock(Module):
    """Self-similarity attention followed by a dilated feed-forward block."""

    def __init__(self, attn: SSAttention, ffn: DConvBlock):
        self.attn = attn
        self.ffn = ffn

    @property
    def dhat(self) -> int:
        return self.attn.dhat

    def forward(self, z: Tensor) -> Tensor:
        return self.ffn(self.attn(z))


class FeatureHead(Module):
    """One 1x1 convolution and ReLU lifting RGB to ``channels`` features."""

    def __init__(self, channels: int, in_channels: int = 3,
                 rng: Optional[np.random.Generator] = None):
        self.conv = Conv1x1(in_channels, channels, rng)

    def forward(self, x: Tensor) -> Tensor:
        with T.flop_scope("head"):
            return T.relu(self.conv(x))


class FeatureTail(Module):
    """1x1 convolutions 2C -> C -> C/2 -> 3 with ReLU between them."""

    def __init__(self, channels: int, paths: int = 2, out_channels: int = 3,
                 rng: Optional[np.random.Generator] = None):
        self.conv1 = Conv1x1(paths * channels, channels, rng)
        self.conv2 = Conv1x1(channels, channels // 2, rng)
        self.conv3 = Conv1x1(channels // 2, out_channels, rng)

    def forward(self, x: Tensor) -> Tensor:
        with T.flop_scope("tail"):
            y = T.relu(self.conv1(x))
            y = T.relu(self.conv2(y))
            return self.conv3(y)
