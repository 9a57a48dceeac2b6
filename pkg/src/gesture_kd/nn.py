"""Minimal module system: named parameters, buffers, train/eval mode."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class Parameter(Tensor):
    """Trainable leaf tensor; ``decay`` marks it for decoupled weight decay."""

    __slots__ = ("decay",)

    def __init__(self, data, decay: bool = False):
        super().__init__(np.array(data, dtype=ag.DTYPE), requires_grad=True)
        self.decay = decay


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    training: bool = True

    def __init__(self):
        self._buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = np.asarray(value, dtype=ag.DTYPE)

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in self._children():
            if isinstance(value, Parameter):
                yield prefix + name, value
            else:
                yield from value.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self._buffers.items():
            yield prefix + name, value
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(prefix + name + ".")

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

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((name, p.data) for name, p in self.named_parameters())
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict) -> None:
        own = self.state_dict()
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)}")
        for name, target in own.items():
            value = np.asarray(state[name], dtype=ag.DTYPE)
            if value.shape != target.shape:
                raise ValueError(f"shape mismatch for {name}: expected {target.shape}, got {value.shape}")
            # in-place so parameter identity (optimizer state) survives
            target[...] = value


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        super().__init__()
        self.weight = Parameter(uniform_init(rng, (in_features, out_features), in_features), decay=True)
        self.bias = Parameter(uniform_init(rng, (out_features,), in_features))

    def forward(self, x):
        return ag.matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    def __init__(self, features: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = Parameter(np.ones(features))
        self.bias = Parameter(np.zeros(features))

    def forward(self, x):
        return ag.layer_norm(x, self.weight, self.bias, self.eps)


class BatchNorm1d(Module):
    """Batch normalisation; counts 4 values per feature (affine + running stats)."""

    def __init__(self, features: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.weight = Parameter(np.ones(features))
        self.bias = Parameter(np.zeros(features))
        self.register_buffer("running_mean", np.zeros(features))
        self.register_buffer("running_var", np.ones(features))

    def forward(self, x):
        return ag.batch_norm(x, self.weight, self.bias, self._buffers["running_mean"],
                             self._buffers["running_var"], self.training, self.momentum, self.eps)


class Dropout(Module):
    def __init__(self, p: float, rng: np.random.Generator):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
        self.p = p
        self._rng = rng

    def forward(self, x):
        return ag.dropout(x, self.p, self.training, self._rng)


class ClassifierHead(Module):
    """[FC, BN, Mish, Dropout] x2 then [FC, BN]; returns (feature, logits).

    The feature is the second Mish output, taken before its dropout.
    """

    def __init__(self, in_features: int, hidden: int, num_classes: int, dropout: float,
                 rng: np.random.Generator):
        super().__init__()
        self.fc1 = Linear(in_features, hidden, rng)
        self.bn1 = BatchNorm1d(hidden)
        self.drop1 = Dropout(dropout, rng)
        self.fc2 = Linear(hidden, hidden, rng)
        self.bn2 = BatchNorm1d(hidden)
        self.drop2 = Dropout(dropout, rng)
        self.fc3 = Linear(hidden, num_classes, rng)
        self.bn3 = BatchNorm1d(num_classes)

    def forward(self, x):
        h = self.drop1(ag.mish(self.bn1(self.fc1(x))))
        feature = ag.mish(self.bn2(self.fc2(h)))
        logits = self.bn3(self.fc3(self.drop2(feature)))
        return feature, logits


def count_parameters(module: Module | None) -> dict[str, int]:
    """Per-layer scalar counts (trainable + batch-norm running stores) and ``total``.

    Layers are keyed by the owning module path, e.g. ``head.fc1``.
    """
    counts: "OrderedDict[str, int]" = OrderedDict()
    if module is not None:
        for name, value in list(module.named_parameters()) + list(module.named_buffers()):
            layer = name.rsplit(".", 1)[0] if "." in name else name
            counts[layer] = counts.get(layer, 0) + int(np.asarray(value.data if isinstance(value, Tensor) else value).size)
    counts["total"] = sum(counts.values())
    return counts
