"""Module container, convolution and layer-norm layers."""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError
from .tensor import DEFAULT_DTYPE, Tensor, parameter


class Module:
    """Parameters are discovered from attributes, in assignment order."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, val in vars(self).items():
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def named_children(self) -> Iterator[tuple[str, "Module"]]:
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield name, val
            elif isinstance(val, (list, tuple)) and val and all(isinstance(v, Module) for v in val):
                for i, item in enumerate(val):
                    yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = own.keys() - state.keys()
        extra = state.keys() - own.keys()
        if missing or extra:
            raise DimensionError(f"state mismatch: missing={sorted(missing)[:5]} extra={sorted(extra)[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype).copy()

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def macs(self, h: int, w: int) -> int:
        """Multiply-accumulates of one forward pass for an input of h x w pixels."""
        raise NotImplementedError


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int = 1, rng: Optional[np.random.Generator] = None,
                 padding: Optional[int] = None, groups: int = 1, stride: int = 1, bias: bool = True):
        if cin % groups or cout % groups:
            raise ConfigError(f"groups={groups} must divide {cin} and {cout}")
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = cin // groups * kernel * kernel
        bound = 1.0 / math.sqrt(fan_in)
        self.cin, self.cout, self.kernel, self.groups, self.stride = cin, cout, kernel, groups, stride
        self.padding = kernel // 2 if padding is None else padding
        self.weight = parameter(rng.uniform(-bound, bound, (cout, cin // groups, kernel, kernel)))
        self.bias = parameter(rng.uniform(-bound, bound, cout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding,
                          groups=self.groups)

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        k, p, s = self.kernel, self.padding, self.stride
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def macs(self, h: int, w: int) -> int:
        ho, wo = self.out_size(h, w)
        return self.cout * (self.cin // self.groups) * self.kernel ** 2 * ho * wo


class LayerNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-6):
        self.eps = eps
        self.weight = parameter(np.ones(channels, dtype=DEFAULT_DTYPE))
        self.bias = parameter(np.zeros(channels, dtype=DEFAULT_DTYPE))

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.weight, self.bias, self.eps)

    def macs(self, h: int, w: int) -> int:
        return 0


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x

    def __len__(self) -> int:
        return len(self.layers)

    def __getitem__(self, i: int) -> Module:
        return self.layers[i]

    def macs(self, h: int, w: int) -> int:
        # every layer used inside a Sequential here preserves spatial size
        return sum(layer.macs(h, w) for layer in self.layers)
