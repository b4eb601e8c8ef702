"""The two-path self-similarity blind-spot network and its probes."""
from __future__ import annotations

import dataclasses
import math
import struct
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .layers import (
    DConvBlock, FeatureHead, FeatureTail, MaskedConv2d, Module, SSAttention, SSBlock,
    derive_dilation,
)
from .tensor import Tensor

MAGIC = b"SSBSN1"


@dataclass
class NetworkConfig:
    channels: int = 32
    modules_per_path: int = 9
    m: int = 3
    gamma: int = 2
    kernel_sizes: tuple = (3, 5)
    use_ss_attention: bool = True
    qk_integration: bool = True
    cosine_similarity: bool = True
    denoised_feature_placement: bool = True
    residual: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.channels < 4 or self.channels % 2:
            raise ValueError(f"channels must be even and >= 4, got {self.channels}")
        if not 0 <= self.m <= self.modules_per_path:
            raise ValueError(f"m must lie in [0, {self.modules_per_path}], got {self.m}")
        if self.gamma < 1:
            raise ValueError("gamma must be a positive integer")
        for k in self.kernel_sizes:
            if k < 3 or k % 2 != 1:
                raise ValueError(f"masked kernel sizes must be odd and >= 3, got {k}")

    @property
    def ss_blocks_per_path(self) -> int:
        return self.m if self.use_ss_attention else 0

    def dilations(self) -> list[int]:
        return [derive_dilation(k) for k in self.kernel_sizes]

    def grids(self) -> list[int]:
        return [self.gamma * d for d in self.dilations()]

    @classmethod
    def full_scale(cls, **overrides) -> "NetworkConfig":
        return cls(**{"channels": 128, **overrides})


ABLATION_AXES = {
    "SS": "use_ss_attention",
    "QK": "qk_integration",
    "CS": "cosine_similarity",
    "DF": "denoised_feature_placement",
}


def ablation_variant(config: NetworkConfig, axes: dict) -> NetworkConfig:
    """Copy of ``config`` with the named ablation switches (SS/QK/CS/DF) set."""
    unknown = set(axes) - set(ABLATION_AXES)
    if unknown:
        raise ValueError(f"unknown ablation axes: {sorted(unknown)}")
    return dataclasses.replace(config, **{ABLATION_AXES[k]: bool(v) for k, v in axes.items()})


class DilatedPath(Module):
    """Masked convolution followed by a stack of dilated modules."""

    def __init__(self, config: NetworkConfig, k_mc: int, rng: np.random.Generator):
        c = config.channels
        self.k_mc = k_mc
        self.dilation = derive_dilation(k_mc)
        self.dhat = config.gamma * self.dilation
        self.masked = MaskedConv2d(c, c, k_mc, rng)
        n_ss = config.ss_blocks_per_path
        total = config.modules_per_path
        if config.denoised_feature_placement:
            ss_slots = set(range(total - n_ss, total))
        else:
            ss_slots = set(range(n_ss))
        self.modules = []
        for i in range(total):
            if i in ss_slots:
                attn = SSAttention(c, self.dhat, config.qk_integration,
                                   config.cosine_similarity, rng)
                ffn = DConvBlock(c, self.dilation, config.residual, rng)
                self.modules.append(SSBlock(attn, ffn))
            else:
                self.modules.append(DConvBlock(c, self.dilation, config.residual, rng))

    def forward(self, x: Tensor) -> Tensor:
        with T.flop_scope(f"masked{self.k_mc}"):
            y = T.relu(self.masked(x))
        for i, module in enumerate(self.modules):
            with T.flop_scope(f"path{self.k_mc}.module{i}"):
                y = module(y)
        return y


class SSBSN(Module):
    """Shared 1x1 head, one path per masked kernel size, channel concat, 1x1 tail."""

    def __init__(self, config: NetworkConfig, rng_seed: Optional[int] = None):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed if rng_seed is None else rng_seed)
        c = config.channels
        self.head = FeatureHead(c, 3, rng)
        self.paths = [DilatedPath(config, k, rng) for k in config.kernel_sizes]
        self.tail = FeatureTail(c, len(self.paths), 3, rng)

    @property
    def grid_lcm(self) -> int:
        """Spatial sizes fed to ``forward`` must be multiples of this."""
        grids = [p.dhat for p in self.paths if any(isinstance(m, SSBlock) for m in p.modules)]
        return math.lcm(*grids) if grids else 1

    @property
    def layers(self) -> list[Module]:
        """All dilated modules, path by path; this indexing is used by ``attnmap``."""
        return [m for p in self.paths for m in p.modules]

    def ss_blocks(self) -> list[SSBlock]:
        return [m for m in self.layers if isinstance(m, SSBlock)]

    def forward(self, image: Tensor) -> Tensor:
        if image.ndim != 4 or image.shape[1] != 3:
            raise ValueError(f"expected an (n, 3, h, w) image, got shape {image.shape}")
        h, w = image.shape[2:]
        g = self.grid_lcm
        if h % g or w % g:
            raise ValueError(f"spatial size {h}x{w} is not a multiple of {g}; pad first")
        feats = self.head(image)
        merged = T.concat([path(feats) for path in self.paths], axis=1)
        return self.tail(merged)


def build_network(config: NetworkConfig, rng_seed: Optional[int] = None) -> SSBSN:
    return SSBSN(config, rng_seed)


def parameter_count(model: SSBSN) -> int:
    return sum(p.data.size for p in model.parameters())


# ---------------------------------------------------------------------------
# probes


def _pixel_selector(shape, pixel) -> np.ndarray:
    sel = np.zeros(shape)
    sel[:, :, pixel[0], pixel[1]] = 1.0
    return sel


def input_gradient(fn, image: np.ndarray, pixel: tuple[int, int]) -> np.ndarray:
    """d(sum over batch and channels of fn(x)[.., p]) / dx for a plain array ``image``."""
    x = Tensor(image, requires_grad=True)
    out = fn(x)
    loss = (out * _pixel_selector(out.shape, pixel)).sum()
    T.backward(loss)
    return x.grad


def blind_spot_probe(model: SSBSN, image: np.ndarray, pixel: tuple[int, int]) -> np.ndarray:
    """Gradient of the channel-summed output at ``pixel`` w.r.t. the whole input.

    The entry at ``pixel`` itself is zero for a correctly masked network.
    """
    return input_gradient(model.forward, image, pixel)


def receptive_field_probe(layers: Sequence, shape: tuple, pixel: tuple[int, int],
                          rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Boolean (h, w) mask of input pixels with nonzero gradient at ``pixel``."""
    rng = rng if rng is not None else np.random.default_rng(0)

    def run(x):
        for layer in layers:
            x = layer(x)
        return x

    grad = input_gradient(run, rng.normal(size=shape), pixel)
    return np.any(grad != 0, axis=(0, 1))


def lattice_mask(shape: tuple[int, int], pixel: tuple[int, int], step: int,
                 reach: Optional[int] = None) -> np.ndarray:
    """Pixels p + (a*step, b*step) with |a|, |b| <= reach (unbounded if None)."""
    h, w = shape
    rows = np.arange(h)[:, None] - pixel[0]
    cols = np.arange(w)[None, :] - pixel[1]
    mask = (rows % step == 0) & (cols % step == 0)
    if reach is not None:
        mask &= (np.abs(rows) <= reach * step) & (np.abs(cols) <= reach * step)
    return mask


# ---------------------------------------------------------------------------
# checkpoints


def _config_text(config: NetworkConfig, state: Optional[dict]) -> str:
    lines = ["[network]"]
    for f in fields(NetworkConfig):
        value = getattr(config, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name} = {value}")
    if state:
        lines.append("[state]")
        lines.extend(f"{k} = {v}" for k, v in state.items())
    return "\n".join(lines) + "\n"


def _parse_config_text(text: str) -> tuple[NetworkConfig, dict]:
    section, net, state = None, {}, {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("["):
            section = line.strip("[]")
            continue
        key, _, value = (s.strip() for s in line.partition("="))
        (net if section == "network" else state)[key] = value
    types = {f.name: f.type for f in fields(NetworkConfig)}
    kwargs = {}
    for key, value in net.items():
        kind = types[key]
        if kind == "bool":
            kwargs[key] = value == "True"
        elif kind == "tuple":
            kwargs[key] = tuple(int(v) for v in value.split(","))
        else:
            kwargs[key] = int(value)
    return NetworkConfig(**kwargs), state


def encode_tensor(arr: np.ndarray, dtype: str = "<f4") -> bytes:
    head = struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=dtype).tobytes()


def decode_tensors(buf: bytes, offset: int = 0, dtype: str = "<f4") -> list[np.ndarray]:
    out = []
    while offset < len(buf):
        if offset + 4 > len(buf):
            raise ValueError("truncated tensor header")
        (rank,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        dims = struct.unpack_from(f"<{rank}I", buf, offset)
        offset += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        size = np.dtype(dtype).itemsize
        if offset + size * count > len(buf):
            raise ValueError("truncated tensor payload")
        out.append(np.frombuffer(buf, dtype=dtype, count=count, offset=offset).reshape(dims))
        offset += size * count
    return out


def save_checkpoint(path: Union[str, Path], model: SSBSN, state: Optional[dict] = None) -> None:
    """Write ``SSBSN1`` + length-prefixed config text + float32 parameter tensors."""
    text = _config_text(model.config, state).encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", len(text)), text]
    chunks.extend(encode_tensor(p.data) for p in model.parameters())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: Union[str, Path]) -> tuple[SSBSN, dict]:
    buf = Path(path).read_bytes()
    if not buf.startswith(MAGIC):
        raise ValueError(f"{path}: not an SSBSN1 checkpoint")
    (size,) = struct.unpack_from("<I", buf, len(MAGIC))
    start = len(MAGIC) + 4
    config, state = _parse_config_text(buf[start:start + size].decode("utf-8"))
    model = build_network(config)
    arrays = decode_tensors(buf, start + size)
    params = model.parameters()
    if len(arrays) != len(params):
        raise ValueError(f"{path}: expected {len(params)} tensors, found {len(arrays)}")
    for p, arr in zip(params, arrays):
        if p.shape != arr.shape:
            raise ValueError(f"{path}: parameter shape {arr.shape} != model {p.shape}")
        p.data = arr.astype(T.default_dtype())
    return model, state
