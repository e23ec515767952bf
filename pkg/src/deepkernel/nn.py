"""Small module system over the autodiff primitives."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .autodiff import BatchNormState, Tensor, batchnorm2d, conv2d, matmul, relu


class Module:
    training: bool = True

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Module, Tensor, BatchNormState)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Module, Tensor, BatchNormState)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, BatchNormState]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, BatchNormState):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_buffers(full + ".")

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, value in self._children():
            if isinstance(value, Module):
                value.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, buf in self.named_buffers():
            out[f"{name}.mean"] = buf.mean.copy()
            out[f"{name}.var"] = buf.var.copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | {f"{b}.{k}" for b in buffers for k in ("mean", "var")}
        missing = expected - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)[:5]}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype)
        for name, b in buffers.items():
            b.mean = np.array(state[f"{name}.mean"], dtype=b.mean.dtype)
            b.var = np.array(state[f"{name}.var"], dtype=b.var.dtype)


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype), requires_grad=True)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, dtype=np.float32):
        self.weight = he_normal(rng, (k, k, cin, cout), k * k * cin, dtype)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias)


class BatchNorm(Module):
    def __init__(self, channels: int, dtype=np.float32):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.stats = BatchNormState(channels, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return batchnorm2d(x, self.gamma, self.beta, self.stats, self.training)


class ConvBlock(Module):
    """3x3 convolution, batch normalisation, ReLU."""

    def __init__(self, cin: int, cout: int, rng, dtype=np.float32):
        self.conv = Conv2d(cin, cout, 3, rng, dtype)
        self.bn = BatchNorm(cout, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return relu(self.bn(self.conv(x)))


class DoubleConv(Module):
    def __init__(self, cin: int, cout: int, rng, dtype=np.float32):
        self.first = ConvBlock(cin, cout, rng, dtype)
        self.second = ConvBlock(cout, cout, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.second(self.first(x))


class Dense(Module):
    def __init__(self, fin: int, fout: int, rng, dtype=np.float32):
        self.weight = he_normal(rng, (fin, fout), fin, dtype)
        self.bias = Tensor(np.zeros(fout, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.weight) + self.bias
