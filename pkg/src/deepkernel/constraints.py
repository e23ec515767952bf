"""Mutual-information constraints on the deepest PET features.

The minimisation constraint penalises deep PET features that a discriminator
can pair with shallow kernel features; the maximisation constraint rewards
deep features that a cooperative discriminator can pair with local patches of
shallow PET features. Marginal samples are formed by rolling one side of each
pair one step along the batch axis.

Only PET-branch parameters receive gradient from these losses: kernel
features entering the constraints are recomputed from detached softmax
features, and nothing from the decoder enters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import (
    Tensor,
    clip,
    concat,
    concat_channels,
    log,
    maxpool2x2,
    relu,
    roll,
    sigmoid,
    transpose,
)
from .autodiff import backward as _backward
from .autodiff.functional import DegenerateBatchError
from .autodiff.tensor import ShapeError, getitem, mean
from .nn import ConvBlock, Dense, DoubleConv, Module
from .optim import Adam

CLAMP = 1e-7
MLP_UNITS = (16, 8, 1)


@dataclass
class ConstraintConfig:
    gamma_max: float = 0.0
    gamma_min: float = 0.0
    max_shallow: int = 0
    max_deep: Optional[int] = None
    min_taps: Sequence[int] = (0, 1, 2)
    min_deep: Optional[int] = None
    width: int = 16

    def __post_init__(self):
        if self.gamma_max < 0 or self.gamma_min < 0:
            raise ValueError("constraint weights must be non-negative")
        self.min_taps = tuple(int(t) for t in self.min_taps)

    def resolve(self, levels: int) -> "ConstraintConfig":
        """Fill deep-level defaults and validate tap indices against ``levels``."""
        max_deep = levels if self.max_deep is None else self.max_deep
        min_deep = levels if self.min_deep is None else self.min_deep
        for name, lvl in (("max_shallow", self.max_shallow), ("max_deep", max_deep), ("min_deep", min_deep)):
            if not 0 <= lvl <= levels:
                raise ValueError(f"{name}={lvl} outside [0, {levels}]")
        if self.max_shallow >= max_deep:
            raise ValueError("max_shallow must be shallower than max_deep")
        if not self.min_taps or any(not 0 <= t < min_deep for t in self.min_taps):
            raise ValueError(f"min_taps {self.min_taps} must lie in [0, {min_deep})")
        if list(self.min_taps) != sorted(set(self.min_taps)):
            raise ValueError("min_taps must be strictly increasing")
        return ConstraintConfig(
            self.gamma_max, self.gamma_min, self.max_shallow, max_deep, self.min_taps, min_deep, self.width
        )

    @property
    def enabled(self) -> bool:
        return self.gamma_max > 0 or self.gamma_min > 0


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def extract_patches(f, size: int) -> Tensor:
    """Non-overlapping ``size x size`` tiles, shaped ``[N, Np, size, size, C]``.

    Tiles are ordered row-major over the tile grid.
    """
    f = _as_tensor(f)
    n, h, w, c = f.shape
    if size < 1 or h % size or w % size:
        raise ShapeError(f"{h}x{w} map cannot be tiled by {size}x{size} patches")
    gh, gw = h // size, w // size
    tiles = f.reshape(n, gh, size, gw, size, c)
    tiles = transpose(tiles, (0, 1, 3, 2, 4, 5))
    return tiles.reshape(n, gh * gw, size, size, c)


def reassemble_patches(patches, height: int, width: int) -> Tensor:
    patches = _as_tensor(patches)
    n, n_p, size, _, c = patches.shape
    gh, gw = height // size, width // size
    if gh * gw != n_p:
        raise ShapeError("patch count does not tile the requested size")
    tiles = patches.reshape(n, gh, gw, size, size, c)
    return transpose(tiles, (0, 1, 3, 2, 4, 5)).reshape(n, height, width, c)


def marginal_shuffle(batch):
    """Pair item ``i`` with item ``(i + 1) mod N``: ``[A, B, C] -> [B, C, A]``."""
    n = batch.shape[0]
    if n < 2:
        raise DegenerateBatchError(f"marginal sampling needs a batch of at least 2, got {n}")
    if isinstance(batch, Tensor):
        return roll(batch, -1, axis=0)
    return np.roll(np.asarray(batch), -1, axis=0)


def _mlp(width, rng, dtype):
    layers = []
    prev = width
    for units in MLP_UNITS:
        layers.append(Dense(prev, units, rng, dtype))
        prev = units
    return layers


def _run_mlp(layers, x: Tensor) -> Tensor:
    for i, layer in enumerate(layers):
        x = layer(x)
        if i < len(layers) - 1:
            x = relu(x)
    return sigmoid(x)


class MaxDiscriminator(Module):
    """Up to three conv/BN/ReLU/max-pool blocks and a 16-8-1 sigmoid MLP."""

    def __init__(self, in_channels: int, spatial: int, rng, dtype=np.float32, width: int = 16):
        self.blocks = []
        self.pools = []
        prev, size = in_channels, spatial
        for _ in range(3):
            self.blocks.append(ConvBlock(prev, width, rng, dtype))
            pool = size % 2 == 0 and size > 1
            self.pools.append(pool)
            size = size // 2 if pool else size
            prev = width
        self.flat = width * size * size
        self.mlp = _mlp(self.flat, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        for block, pool in zip(self.blocks, self.pools):
            x = block(x)
            if pool:
                x = maxpool2x2(x)
        return _run_mlp(self.mlp, x.reshape(x.shape[0], self.flat))


class MinDiscriminator(Module):
    """Convolutional encoder over shallow kernel features with the deep PET
    features concatenated at its last level, then a 16-8-1 sigmoid MLP."""

    def __init__(self, tap_channels: dict[int, int], deep_level: int, deep_channels: int, rng, dtype=np.float32, width: int = 16):
        self.taps = tuple(sorted(tap_channels))
        self.first = self.taps[0]
        self.deep_level = deep_level
        self.blocks = []
        prev = 0
        for level in range(self.first, deep_level):
            cin = prev + tap_channels.get(level, 0)
            self.blocks.append(DoubleConv(cin, width, rng, dtype))
            prev = width
        self.final = ConvBlock(prev + deep_channels, width, rng, dtype)
        self.mlp = _mlp(width, rng, dtype)

    def __call__(self, taps: Sequence[Tensor], deep: Tensor) -> Tensor:
        by_level = dict(zip(self.taps, taps))
        x = None
        for i, level in enumerate(range(self.first, self.deep_level)):
            inp = by_level.get(level)
            if x is None:
                x = inp
            elif inp is not None:
                x = concat_channels([x, inp])
            x = maxpool2x2(self.blocks[i](x))
        x = self.final(concat_channels([x, deep]))
        return _run_mlp(self.mlp, mean(x, axis=(1, 2)))


def max_pairs(patches: Tensor, deep: Tensor, marginal: bool = False) -> Tensor:
    """Channel-concatenate every patch with the deep map of its own item
    (or, for marginal pairs, of the next item in the batch)."""
    n, n_p, size, _, c = patches.shape
    if deep.shape[0] != n or deep.shape[1:3] != (size, size):
        raise ShapeError(f"patches {patches.shape} do not match deep features {deep.shape}")
    if marginal:
        deep = marginal_shuffle(deep)
    rep = getitem(deep, np.repeat(np.arange(n), n_p))
    return concat_channels([patches.reshape(n * n_p, size, size, c), rep])


def _clamped(t: Tensor) -> Tensor:
    return clip(t, CLAMP, 1.0 - CLAMP)


def loss_min(fk_taps: Sequence[Tensor], deep: Tensor, t_min) -> Tensor:
    """``-mean log(1 - T_min(f_k, f_deep))`` over joint pairs."""
    out = t_min(fk_taps, deep)
    return -mean(log(1.0 - _clamped(out)))


def loss_max(patches: Tensor, deep: Tensor, t_max) -> Tensor:
    """``-(1/Np) sum_patches mean_batch log T_max(patch, f_deep)``."""
    out = t_max(max_pairs(patches, deep))
    return -mean(log(_clamped(out)))


def loss_info(l_max, l_min, gamma_max: float, gamma_min: float):
    if gamma_max < 0 or gamma_min < 0:
        raise ValueError("constraint weights must be non-negative")
    return l_max * gamma_max + l_min * gamma_min


def bce_from_outputs(t_joint: Tensor, t_marginal: Tensor) -> Tensor:
    """Binary cross-entropy with joint samples labelled 1 and marginals 0."""
    return (mean(log(_clamped(t_joint))) + mean(log(1.0 - _clamped(t_marginal)))) * -0.5


def discriminator_bce(disc, joint: tuple, marginal: tuple) -> Tensor:
    """Run ``disc`` once on joint and marginal inputs stacked along the batch."""
    n = _first_batch(joint)
    if n < 2:
        raise DegenerateBatchError(f"discriminator batch must be >= 2, got {n}")
    stacked = tuple(_stack_pair(j, m) for j, m in zip(joint, marginal))
    out = disc(*stacked)
    return bce_from_outputs(getitem(out, slice(0, n)), getitem(out, slice(n, None)))


def _first_batch(inputs) -> int:
    first = inputs[0]
    if isinstance(first, (list, tuple)):
        first = first[0]
    return first.shape[0]


def _stack_pair(j, m):
    if isinstance(j, (list, tuple)):
        return [concat([a, b], axis=0) for a, b in zip(j, m)]
    return concat([j, m], axis=0)


def discriminator_step(disc: Module, optimizer: Adam, joint: tuple, marginal: tuple) -> float:
    """One optimiser step on the discriminator BCE; returns the pre-step loss."""
    optimizer.zero_grad()
    loss = discriminator_bce(disc, joint, marginal)
    _backward(loss)
    optimizer.step()
    return float(loss.data)


def _detach(x):
    if isinstance(x, (list, tuple)):
        return [t.detach() for t in x]
    return x.detach()


@dataclass
class ConstraintTerms:
    l_max: Optional[Tensor] = None
    l_min: Optional[Tensor] = None
    max_joint: Optional[tuple] = None
    max_marginal: Optional[tuple] = None
    min_joint: Optional[tuple] = None
    min_marginal: Optional[tuple] = None
    extras: dict = field(default_factory=dict)


class InfoConstraints:
    """Holds both discriminators and builds the constraint terms for a batch."""

    def __init__(self, config: ConstraintConfig, net, height: int, width: int, seed: int = 0):
        cfg = config.resolve(net.config.levels)
        self.config = cfg
        dtype = net.dtype
        widths = net.config.widths
        rng_max = np.random.default_rng(np.random.SeedSequence([seed, 0xA1]))
        rng_min = np.random.default_rng(np.random.SeedSequence([seed, 0xA2]))
        deep_size = height >> cfg.max_deep
        self.patch_size = deep_size
        self.t_max = MaxDiscriminator(
            widths[cfg.max_shallow] + widths[cfg.max_deep], deep_size, rng_max, dtype, cfg.width
        )
        self.t_min = MinDiscriminator(
            {t: widths[t] for t in cfg.min_taps}, cfg.min_deep, widths[cfg.min_deep], rng_min, dtype, cfg.width
        )

    def kernel_taps(self, net, internals) -> list[Tensor]:
        """Shallow kernel features with the MR-derived softmax features detached."""
        taps = []
        for level in self.config.min_taps:
            b = internals["b"][level]
            b = None if b is None else b.detach()
            taps.append(net.apply_kernel(level, b, internals["f_pet"][level]))
        return taps

    def terms(self, net, internals) -> ConstraintTerms:
        cfg = self.config
        out = ConstraintTerms()
        f_pet = internals["f_pet"]
        if cfg.gamma_max > 0:
            deep = f_pet[cfg.max_deep]
            patches = extract_patches(f_pet[cfg.max_shallow], self.patch_size)
            out.l_max = loss_max(patches, deep, self.t_max)
            p_d, deep_d = patches.detach(), deep.detach()
            out.max_joint = (max_pairs(p_d, deep_d),)
            out.max_marginal = (max_pairs(p_d, deep_d, marginal=True),)
        if cfg.gamma_min > 0:
            deep = f_pet[cfg.min_deep]
            taps = self.kernel_taps(net, internals)
            out.l_min = loss_min(taps, deep, self.t_min)
            taps_d, deep_d = _detach(taps), deep.detach()
            out.min_joint = (taps_d, deep_d)
            out.min_marginal = (taps_d, marginal_shuffle(deep_d))
        return out

    def modules(self) -> dict[str, Module]:
        return {"t_max": self.t_max, "t_min": self.t_min}
