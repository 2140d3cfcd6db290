"""Parameter containers: a small module tree with dotted parameter names."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import Parameter, Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall inside +-bound*std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


class Module:
    """Registers Parameters and sub-Modules assigned as attributes."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._modules.pop(name, None)
            self._params[name] = value
        elif isinstance(value, Module):
            self._params.pop(name, None)
            self._modules[name] = value
        elif value is None:
            self._params.pop(name, None)
            self._modules.pop(name, None)
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self, prefix: str = "") -> None:
        """Stamp each parameter with its dotted path."""
        for name, p in self.named_parameters(prefix):
            p.name = name

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def freeze(self, flag: bool = True) -> None:
        for p in self.parameters():
            p.frozen = flag

    def cast(self, dtype) -> None:
        for p in self.parameters():
            p.data = p.data.astype(dtype)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float32, zero: bool = False):
        super().__init__()
        w = np.zeros((n_out, n_in)) if zero else trunc_normal(rng, (n_out, n_in))
        self.weight = Parameter(w, dtype=dtype)
        self.bias = Parameter(np.zeros(n_out), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, stride: int, pad: int,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.stride, self.pad = stride, pad
        self.weight = Parameter(trunc_normal(rng, (cout, cin, kernel, kernel)), dtype=dtype)
        self.bias = Parameter(np.zeros(cout), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = Parameter(np.ones(dim), dtype=dtype)
        self.bias = Parameter(np.zeros(dim), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.weight, self.bias, self.eps)
