"""Module containers and the small set of generic layers the models share."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Base class: parameters are ``Tensor`` attributes with ``requires_grad``.

    Tied parameters are the *same* Tensor object reachable under several
    attribute paths; :meth:`named_parameters` yields each object once, under
    the first path found in attribute-definition order.
    """

    training = True
    _rng: np.random.Generator | None = None

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(value, (Tensor, Module)):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Tensor, Module)):
                        yield f"{key}.{i}", item

    def named_parameter_paths(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        """Every (path, parameter) pair, including duplicate paths for tied storage."""
        for key, value in self._children():
            path = f"{prefix}{key}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield path, value
            else:
                yield from value.named_parameter_paths(path + ".")

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        seen: set[int] = set()
        for path, p in self.named_parameter_paths():
            if id(p) not in seen:
                seen.add(id(p))
                yield path, p

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def sharing_graph(self) -> dict[str, str]:
        """Map each alias path to the canonical path owning its storage."""
        owner: dict[int, str] = {}
        aliases: dict[str, str] = {}
        for path, p in self.named_parameter_paths():
            if id(p) in owner:
                aliases[path] = owner[id(p)]
            else:
                owner[id(p)] = path
        return aliases

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def set_rng(self, rng: np.random.Generator) -> None:
        """Share one dropout generator across the module tree."""
        for m in self.modules():
            m._rng = rng

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def get_path(self, path: str):
        obj: object = self
        for part in path.split("."):
            obj = obj[int(part)] if isinstance(obj, (list, tuple)) else getattr(obj, part)
        return obj

    def set_path(self, path: str, value) -> None:
        head, _, last = path.rpartition(".")
        parent = self.get_path(head) if head else self
        if isinstance(parent, list):
            parent[int(last)] = value
        else:
            setattr(parent, last, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def init_normal(rng: np.random.Generator, shape, std: float, dtype) -> Tensor:
    return T.parameter(rng.normal(0.0, std, size=shape), dtype=dtype)


def init_uniform_fan_in(rng: np.random.Generator, shape, dtype) -> Tensor:
    """Variance-preserving uniform init: Var = 1 / fan_in, fan_in = shape[0]."""
    bound = math.sqrt(3.0 / shape[0])
    return T.parameter(rng.uniform(-bound, bound, size=shape), dtype=dtype)


class Linear(Module):
    """``y = x @ weight (+ bias)``, weight stored as [in, out]."""

    def __init__(self, n_in: int, n_out: int, bias: bool, rng: np.random.Generator, dtype=np.float32):
        self.weight = init_uniform_fan_in(rng, (n_in, n_out), dtype)
        self.bias = T.parameter(np.zeros(n_out), dtype=dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y if self.bias is None else T.add(y, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32):
        self.gain = T.parameter(np.ones(dim), dtype=dtype)
        self.bias = T.parameter(np.zeros(dim), dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return T.add(T.mul(T.layer_norm(x), self.gain), self.bias)
