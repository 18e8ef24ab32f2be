"""Layers built on the tensor ops: shared MLPs, batch norm, neighbor reduction."""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

REDUCTIONS = ("mean", "max", "mean_max", "attentive")

_norm_state = threading.local()


@contextlib.contextmanager
def normalization_disabled():
    """Make every BatchNorm an identity inside the block (thread-local).

    Used by gradient checks to test the MLP stacks without batch coupling.
    """
    prev = getattr(_norm_state, "off", False)
    _norm_state.off = True
    try:
        yield
    finally:
        _norm_state.off = prev


class Module:
    """Minimal container with recursive parameter/buffer discovery.

    Attributes holding a :class:`Tensor` with ``requires_grad`` are
    parameters, other tensors are buffers. Submodules may be attributes or
    lists of modules.
    """

    training = True

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Tensor, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Tensor, Module)):
                        yield f"{name}.{i}", item

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Module):
                yield from value.named_tensors(full + ".")
            else:
                yield full, value

    def named_parameters(self) -> dict[str, Tensor]:
        return {n: t for n, t in self.named_tensors() if t.requires_grad}

    def named_buffers(self) -> dict[str, Tensor]:
        return {n: t for n, t in self.named_tensors() if not t.requires_grad}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.named_tensors()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_tensors())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, t in own.items():
            arr = np.asarray(state[name])
            if arr.shape != t.shape:
                raise ValueError(f"{name}: shape {arr.shape} != expected {t.shape}")
            t.data = arr.astype(t.dtype, copy=True)

    def zero_grad(self) -> None:
        for t in self.named_parameters().values():
            t.grad = None

    def astype(self, dtype) -> "Module":
        for _, t in self.named_tensors():
            t.data = t.data.astype(dtype)
            t.grad = None
        return self

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, value in self._children():
            if isinstance(value, Module):
                value.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.named_parameters().values())


def uniform_fan_in(rng: np.random.Generator, fan_in: int, shape, dtype=np.float32) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5, dtype=np.float32):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = Tensor(np.zeros(channels, dtype=dtype))
        self.running_var = Tensor(np.ones(channels, dtype=dtype))
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        if getattr(_norm_state, "off", False):
            return x
        return T.batch_norm(
            x, self.gamma, self.beta,
            self.running_mean.data, self.running_var.data,
            training=self.training, momentum=self.momentum, eps=self.eps,
        )


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths ``[c_in, w1, ..., wL]`` and per-layer norm/activation flags.

    Flags default to on for every layer; ``head=True`` turns both off for
    the last layer.
    """

    widths: tuple[int, ...]
    norm: tuple[bool, ...] = field(default=())
    act: tuple[bool, ...] = field(default=())

    def __post_init__(self):
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise ValueError(f"bad MLP widths {self.widths}")
        n = len(self.widths) - 1
        if not self.norm:
            object.__setattr__(self, "norm", (True,) * n)
        if not self.act:
            object.__setattr__(self, "act", (True,) * n)
        if len(self.norm) != n or len(self.act) != n:
            raise ValueError("flag count must equal layer count")

    @classmethod
    def of(cls, *widths: int, head: bool = False) -> "MlpSpec":
        n = len(widths) - 1
        flags = (True,) * (n - 1) + (not head,)
        return cls(tuple(widths), flags, flags)

    @property
    def c_in(self) -> int:
        return self.widths[0]

    @property
    def c_out(self) -> int:
        return self.widths[-1]


class SharedMLP(Module):
    """Per-point stack of linear -> batch norm -> ReLU, weights shared across rows.

    A linear layer followed by normalization carries no bias (it would be
    cancelled by the mean subtraction).
    """

    def __init__(self, spec: MlpSpec, rng: np.random.Generator, dtype=np.float32):
        self.spec = spec
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        self.norms: list[BatchNorm] = []
        for i, (c_in, c_out) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
            self.weights.append(uniform_fan_in(rng, c_in, (c_in, c_out), dtype))
            if spec.norm[i]:
                self.norms.append(BatchNorm(c_out, dtype=dtype))
            else:
                self.biases.append(uniform_fan_in(rng, c_in, (c_out,), dtype))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.spec.c_in:
            raise ValueError(
                f"MLP expects {self.spec.c_in} input channels, got {x.shape[-1]}"
            )
        nb = bb = 0
        for i, w in enumerate(self.weights):
            if self.spec.norm[i]:
                x = self.norms[nb](T.linear(x, w))
                nb += 1
            else:
                x = T.linear(x, w, self.biases[bb])
                bb += 1
            if self.spec.act[i]:
                x = T.relu(x)
        return x


def shared_mlp_forward(spec: MlpSpec, mlp: SharedMLP, x: Tensor) -> Tensor:
    if mlp.spec != spec:
        raise ValueError("MLP parameters were built for a different spec")
    return mlp(x)


def reduce(neighbors: Tensor, mode: str, attention: "AttentiveScores | None" = None) -> Tensor:
    """Collapse the neighbor axis (-2) of a (..., k, C) tensor.

    ``mean_max`` returns the channel concatenation ``[max, mean]`` (2C
    wide); ``attentive`` needs a scoring module and returns the
    softmax(score)-weighted sum.
    """
    if neighbors.shape[-2] < 1:
        raise ValueError("cannot reduce over zero neighbors")
    axis = neighbors.ndim - 2
    if mode == "mean":
        return T.mean(neighbors, axis=axis)
    if mode == "max":
        return T.max_(neighbors, axis=axis)
    if mode == "mean_max":
        return T.concat([T.max_(neighbors, axis=axis), T.mean(neighbors, axis=axis)], axis=-1)
    if mode == "attentive":
        if attention is None:
            raise ValueError("attentive reduction needs scoring parameters")
        weights = T.softmax(attention(neighbors), axis=axis)
        return T.sum_(T.mul(weights, neighbors), axis=axis)
    raise ValueError(f"unknown reduction {mode!r}; choose from {REDUCTIONS}")


class AttentiveScores(Module):
    """Shared linear map giving one score per neighbor and channel."""

    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float32):
        self.weight = uniform_fan_in(rng, channels, (channels, channels), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight)


def reduced_width(channels: int, mode: str) -> int:
    return 2 * channels if mode == "mean_max" else channels
