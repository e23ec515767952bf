"""Two-branch encoder / kernel-feature decoder network.

A PET branch and an MR branch each run ``L + 1`` encoder levels. At every
level a kernel generator turns MR features into softmax features ``b`` which
define a sparse latent-space kernel; the PET features at that level are the
code vectors it is applied to. The decoder fuses upsampled decoder state,
kernel features and MR features level by level back to full resolution.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor, channel_softmax, concat_channels, maxpool2x2, upsample_bilinear2x
from .autodiff.tensor import ShapeError
from .kernels import RBF_SIGMA, check_coverage, kernel_features
from .nn import Conv2d, ConvBlock, DoubleConv, Module


class ConfigError(ValueError):
    pass


def halving_patches(p_top: int, levels: int) -> list[int]:
    """Patch side per level, halved at each deeper level (minimum 1)."""
    return [max(1, int(p_top) >> l) for l in range(levels + 1)]


def default_stride(p: int) -> int:
    return 1 if p < 16 else max(1, p // 8)


@dataclass(frozen=True)
class LayerSpec:
    level: int
    channels: int
    height: int
    width: int
    patch: int
    stride: int
    family: str
    n_b: int


@dataclass
class NetworkConfig:
    levels: int = 3
    widths: Sequence[int] = (16, 32, 64, 128)
    slices: int = 3
    n_b: int = 4
    patch_top: int = 1
    patch_sizes: Optional[Sequence[int]] = None
    strides: Optional[Sequence[int]] = None
    kernel_family: str = "linear"
    sigma: float = RBF_SIGMA
    dtype: str = "float32"

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) != self.levels + 1:
            raise ConfigError(f"need {self.levels + 1} widths, got {len(self.widths)}")
        if self.patch_sizes is None:
            self.patch_sizes = halving_patches(self.patch_top, self.levels)
        self.patch_sizes = tuple(int(p) for p in self.patch_sizes)
        if len(self.patch_sizes) != self.levels + 1:
            raise ConfigError(f"need {self.levels + 1} patch sizes, got {len(self.patch_sizes)}")
        if self.strides is None:
            self.strides = tuple(default_stride(p) for p in self.patch_sizes)
        self.strides = tuple(int(s) for s in self.strides)
        if len(self.strides) != self.levels + 1:
            raise ConfigError(f"need {self.levels + 1} strides, got {len(self.strides)}")
        if self.kernel_family not in ("linear", "rbf"):
            raise ConfigError(f"unknown kernel family {self.kernel_family!r}")
        if any(p < 1 for p in self.patch_sizes) or any(not 1 <= s <= p for s, p in zip(self.strides, self.patch_sizes)):
            raise ConfigError("patch sizes must be >= 1 and strides within [1, p]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["patch_sizes"] = list(self.patch_sizes)
        d["strides"] = list(self.strides)
        return d

    def layer_specs(self, height: int, width: int) -> list[LayerSpec]:
        if height % (1 << self.levels) or width % (1 << self.levels):
            raise ShapeError(f"input {height}x{width} not divisible by 2^{self.levels}")
        specs = []
        for l in range(self.levels + 1):
            h, w = height >> l, width >> l
            p, s = self.patch_sizes[l], self.strides[l]
            if p > min(h, w):
                raise ConfigError(f"patch {p} exceeds feature map {h}x{w} at level {l}")
            if p > 1:
                check_coverage(h, w, p, s)
            specs.append(LayerSpec(l, self.widths[l], h, w, p, s, self.kernel_family, self.n_b))
        return specs


class Encoder(Module):
    """``L + 1`` double-conv levels with 2x2 max pooling between them."""

    def __init__(self, cin: int, widths: Sequence[int], rng, dtype):
        self.blocks = []
        prev = cin
        for w in widths:
            self.blocks.append(DoubleConv(prev, w, rng, dtype))
            prev = w

    def __call__(self, x: Tensor) -> list[Tensor]:
        feats = []
        for l, block in enumerate(self.blocks):
            if l:
                x = maxpool2x2(x)
            x = block(x)
            feats.append(x)
        return feats


class KernelGenerator(Module):
    """Conv block then a convolution to ``C * Nb`` logits and a grouped softmax."""

    def __init__(self, channels: int, n_b: int, rng, dtype):
        self.block = ConvBlock(channels, channels, rng, dtype)
        self.logits = Conv2d(channels, channels * n_b, 3, rng, dtype)
        self.n_b = n_b

    def __call__(self, f_mr: Tensor) -> Tensor:
        return channel_softmax(self.logits(self.block(f_mr)), self.n_b)


class DeepKernelNet(Module):
    def __init__(self, config: NetworkConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        dtype = np.dtype(config.dtype)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD1]))
        widths = config.widths
        self.pet_encoder = Encoder(config.slices, widths, rng, dtype)
        self.mr_encoder = Encoder(2 * config.slices, widths, rng, dtype)
        self.kernel_generators = [KernelGenerator(w, config.n_b, rng, dtype) for w in widths]
        top = config.levels
        self.decoder = [DoubleConv(2 * widths[top], widths[top], rng, dtype)]
        for l in range(top - 1, -1, -1):
            self.decoder.append(DoubleConv(widths[l + 1] + 2 * widths[l], widths[l], rng, dtype))
        self.head = Conv2d(widths[0], 1, 1, rng, dtype)

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def parameter_groups(self) -> dict[str, list[tuple[str, Tensor]]]:
        """Parameters split into PET encoder, MR encoder, kernel generators and decoder."""
        groups: dict[str, list[tuple[str, Tensor]]] = {"pet": [], "mr": [], "kernel": [], "decoder": []}
        for name, p in self.named_parameters():
            if name.startswith("pet_encoder"):
                groups["pet"].append((name, p))
            elif name.startswith("mr_encoder"):
                groups["mr"].append((name, p))
            elif name.startswith("kernel_generators"):
                groups["kernel"].append((name, p))
            else:
                groups["decoder"].append((name, p))
        return groups

    def encode(self, pet: Tensor, mr: Tensor) -> tuple[list[Tensor], list[Tensor]]:
        return self.pet_encoder(pet), self.mr_encoder(mr)

    def kernel_softmax(self, level: int, f_mr: Tensor) -> Tensor:
        return self.kernel_generators[level](f_mr)

    def apply_kernel(self, level: int, b: Optional[Tensor], alpha: Tensor) -> Tensor:
        cfg = self.config
        p, s = cfg.patch_sizes[level], cfg.strides[level]
        if p == 1:
            return alpha
        return kernel_features(b, alpha, p, s, cfg.kernel_family, cfg.sigma)

    def __call__(self, pet, t1, t2, compute_b: bool = False):
        return self.forward(pet, t1, t2, compute_b)

    def forward(self, pet, t1, t2, compute_b: bool = False):
        """Predict the standard-dose centre slice.

        ``pet``, ``t1`` and ``t2`` are ``[N, H, W, slices]`` slabs. Returns the
        ``[N, H, W, 1]`` prediction and a dict of internals with per-level
        ``f_pet``, ``f_mr``, ``b`` (``None`` where the patch side is 1 unless
        ``compute_b``) and ``f_k``.
        """
        pet, t1, t2 = (x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype)) for x in (pet, t1, t2))
        cfg = self.config
        for name, x in (("pet", pet), ("t1", t1), ("t2", t2)):
            if x.ndim != 4 or x.shape[-1] != cfg.slices:
                raise ConfigError(f"{name} input must be [N,H,W,{cfg.slices}], got {x.shape}")
        if not (pet.shape == t1.shape == t2.shape):
            raise ConfigError("PET and MR inputs must share their shape")
        cfg.layer_specs(pet.shape[1], pet.shape[2])
        f_pet, f_mr = self.encode(pet, concat_channels([t1, t2]))
        bs, f_k = [], []
        for l in range(cfg.levels + 1):
            b = None
            if cfg.patch_sizes[l] > 1 or compute_b:
                b = self.kernel_softmax(l, f_mr[l])
            bs.append(b)
            f_k.append(self.apply_kernel(l, b, f_pet[l]))
        top = cfg.levels
        d = self.decoder[0](concat_channels([f_k[top], f_mr[top]]))
        for i, l in enumerate(range(top - 1, -1, -1), start=1):
            d = self.decoder[i](concat_channels([upsample_bilinear2x(d), f_k[l], f_mr[l]]))
        out = self.head(d)
        return out, {"f_pet": f_pet, "f_mr": f_mr, "b": bs, "f_k": f_k}


def full_scale_config() -> NetworkConfig:
    """Six encoder/decoder levels, 5-slice slabs, 192x192 inputs."""
    return NetworkConfig(
        levels=5,
        widths=(16, 32, 64, 128, 128, 128),
        slices=5,
        n_b=4,
    )
