"""Parameter containers built on :mod:`rangepdm.nn.tensor`."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from rangepdm.nn import tensor as T
from rangepdm.nn.tensor import Tensor


class Module:
    """Minimal parameter/buffer registry.

    Parameters are ``Tensor`` attributes with ``requires_grad``; buffers are
    plain ndarrays listed in ``_buffers``. Sub-modules are walked in
    attribute-insertion order, which fixes the parameter order.
    """

    training = True
    _buffers: tuple = ()

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + name + ".")
            elif isinstance(value, (list, tuple)):
                for i, m in enumerate(value):
                    if isinstance(m, Module):
                        yield from m.named_parameters(f"{prefix}{name}.{i}.")

    def named_buffers(self, prefix: str = ""):
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_buffers(prefix + name + ".")
            elif isinstance(value, (list, tuple)):
                for i, m in enumerate(value):
                    if isinstance(m, Module):
                        yield from m.named_buffers(f"{prefix}{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for m in value:
                    if isinstance(m, Module):
                        yield from m.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((k, p.data.copy()) for k, p in self.named_parameters())
        state.update((k, b.copy()) for k, b in self.named_buffers())
        return state

    def load_state_dict(self, state) -> None:
        targets = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = (set(targets) | set(bufs)) - set(state)
        extra = set(state) - set(targets) - set(bufs)
        if missing or extra:
            raise ValueError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in targets.items():
            if state[k].shape != p.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)
        for k, b in bufs.items():
            if state[k].shape != b.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {b.shape}")
            b[...] = state[k]

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        bound = np.sqrt(6.0 / d_in)
        self.w = Tensor(rng.uniform(-bound, bound, size=(d_in, d_out)), requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True)

    def forward(self, x):
        return T.linear(x, self.w, self.b)


class BatchNorm(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, d: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(d), requires_grad=True)
        self.beta = Tensor(np.zeros(d), requires_grad=True)
        self.running_mean = np.zeros(d)
        self.running_var = np.ones(d)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x):
        return T.batchnorm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            train=self.training, momentum=self.momentum, eps=self.eps,
        )


class MlpBlock(Module):
    """linear -> batchnorm -> relu -> linear, applied over the last axis."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator):
        self.lin1 = Linear(d_in, d_hidden, rng)
        self.bn = BatchNorm(d_hidden)
        self.lin2 = Linear(d_hidden, d_out, rng)
        self.d_in, self.d_out = d_in, d_out

    def forward(self, x):
        return self.lin2(T.relu(self.bn(self.lin1(x))))


class Classifier(MlpBlock):
    """MlpBlock whose output width is the class count."""
