"""Parameter containers built on the autodiff engine."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from ..autodiff import DiffTensor, kaiming_init, ops


class Module:
    """Named parameters, named buffers and a train/eval switch.

    Children are discovered from attributes (modules and lists of modules),
    in attribute insertion order, which keeps parameter order stable.
    """

    training: bool = True

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield name, val
            elif isinstance(val, list) and val and all(isinstance(v, Module) for v in val):
                for i, v in enumerate(val):
                    yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, DiffTensor]]:
        for name, val in vars(self).items():
            if isinstance(val, DiffTensor):
                yield prefix + name, val
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, val in vars(self).items():
            if isinstance(val, np.ndarray):
                yield prefix + name, val
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> list[DiffTensor]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.value.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.value = np.array(state[name], dtype=np.float64)
        for name, b in buffers.items():
            b[...] = state[name]


class Conv3d(Module):
    def __init__(self, cin: int, cout: int, kernel: int = 3, seed: int = 0,
                 bias: bool = True, zero: bool = False):
        k = kernel
        if zero:
            self.weight = DiffTensor(np.zeros((k, k, k, cin, cout)), requires_grad=True)
        else:
            self.weight = kaiming_init((k, k, k, cin, cout), fan_in=k ** 3 * cin, seed=seed)
        self.bias = DiffTensor(np.zeros(cout), requires_grad=True) if bias else None
        self.padding = k // 2

    def __call__(self, x):
        y = ops.conv3d(x, self.weight, self.padding)
        return y + self.bias if self.bias is not None else y


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        self.gamma = DiffTensor(np.ones(channels), requires_grad=True)
        self.beta = DiffTensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps
        self.update_running = True

    def __call__(self, x):
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                              training=self.training, momentum=self.momentum, eps=self.eps,
                              update_running=self.update_running)


class Linear(Module):
    def __init__(self, cin: int, cout: int, seed: int = 0):
        self.weight = kaiming_init((cin, cout), fan_in=cin, seed=seed)
        self.bias = DiffTensor(np.zeros(cout), requires_grad=True)

    def __call__(self, x):
        return ops.matmul(x, self.weight) + self.bias


class frozen_stats:
    """Context manager: batch-norm layers of ``module`` stop updating running stats."""

    def __init__(self, module: Module):
        self.layers = [m for m in _walk(module) if isinstance(m, BatchNorm)]

    def __enter__(self):
        self.saved = [m.update_running for m in self.layers]
        for m in self.layers:
            m.update_running = False

    def __exit__(self, *exc):
        for m, s in zip(self.layers, self.saved):
            m.update_running = s


def _walk(module: Module) -> Iterator[Module]:
    yield module
    for _, child in module.children():
        yield from _walk(child)


def seeds_for(seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n)]
