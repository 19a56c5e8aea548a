"""Parameter containers and the small layers the model is assembled from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Base class: any ``Tensor`` attribute with ``requires_grad`` is a parameter.

    Sub-modules and lists of sub-modules are walked recursively in attribute
    insertion order, which fixes the parameter naming and ordering used by
    the optimizer and the checkpoint format. A module shared under two names
    (tied weights) is reported once, under the first name.
    """

    def named_parameters(self, prefix: str = "", _seen: set | None = None) -> Iterator[tuple[str, Tensor]]:
        seen = set() if _seen is None else _seen
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad and id(value) not in seen:
                    seen.add(id(value))
                    yield full, value
            elif isinstance(value, Module):
                if id(value) not in seen:
                    seen.add(id(value))
                    yield from value.named_parameters(full + ".", seen)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module) and id(item) not in seen:
                        seen.add(id(item))
                        yield from item.named_parameters(f"{full}.{i}.", seen)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        if missing:
            raise KeyError(f"state is missing parameters: {', '.join(missing)}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=T.DTYPE)
            if value.shape != p.shape:
                raise T.ShapeError(f"parameter {name}: checkpoint shape {value.shape} != model shape {p.shape}")
            p.data = value.copy()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = T.param(glorot(rng, d_in, d_out))
        self.bias = T.param(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        if self.bias is not None:
            y = y + self.bias.expand(y.shape)
        return y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = T.param(np.ones(d))
        self.beta = T.param(np.zeros(d))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class Conv3x3(Module):
    """Channels-last 3x3 convolution on token grids ``[..., L, D]`` laid out as ``H x W``."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.weight = T.param(glorot(rng, 9 * d_in, d_out, shape=(3, 3, d_in, d_out)))
        self.bias = T.param(np.zeros(d_out))

    def forward(self, x: Tensor, grid: tuple[int, int]) -> Tensor:
        h, w = grid
        if x.shape[-2] != h * w:
            raise T.ShapeError(f"token count {x.shape[-2]} does not match grid {h}x{w}")
        lead = x.shape[:-2]
        y = T.conv3x3(x.reshape(lead + (h, w, x.shape[-1])), self.weight, self.bias)
        return y.reshape(lead + (h * w, y.shape[-1]))


class SwiGLU(Module):
    """``(SiLU(x W_gate) * x W_up) W_down`` without biases."""

    def __init__(self, d: int, hidden: int, rng: np.random.Generator):
        self.w_gate = T.param(glorot(rng, d, hidden))
        self.w_up = T.param(glorot(rng, d, hidden))
        self.w_down = T.param(glorot(rng, hidden, d))

    def forward(self, x: Tensor) -> Tensor:
        return T.matmul(T.silu(T.matmul(x, self.w_gate)) * T.matmul(x, self.w_up), self.w_down)
