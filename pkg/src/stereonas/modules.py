"""Parameter containers, fan-in initialization, seeded RNG, and SGD."""

from __future__ import annotations

import zlib

import numpy as np

from .tensor import Tensor


def rng_for(seed: int, *tags) -> np.random.Generator:
    """Deterministic child generator for a subsystem.

    Tags (strings or ints) are folded into the seed sequence so different
    subsystems draw independent, reproducible streams from one master seed.
    """
    words = [int(seed) & 0xFFFFFFFF]
    for t in tags:
        if isinstance(t, str):
            words.append(zlib.crc32(t.encode()))
        else:
            words.append(int(t) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(words))


def uniform_fanin(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    """Weight tensor drawn uniformly from [-b, b], b = sqrt(1/fan_in)."""
    b = float(np.sqrt(1.0 / fan_in))
    return Tensor(rng.uniform(-b, b, size=shape), requires_grad=True)


class Module:
    """Minimal parameter tree: attribute assignment registers tensors/children."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield (prefix + name, p)
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, mods=()):
        super().__init__()
        self._items = []
        for m in mods:
            self.append(m)

    def append(self, mod: Module):
        self._children[str(len(self._items))] = mod
        self._items.append(mod)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class ModuleDict(Module):
    def __init__(self, mods=None):
        super().__init__()
        self._items = {}
        for k, m in (mods or {}).items():
            self[k] = m

    def __setitem__(self, key, mod: Module):
        key = str(key)
        self._children[key] = mod
        self._items[key] = mod

    def __getitem__(self, key):
        return self._items[str(key)]

    def __contains__(self, key):
        return str(key) in self._items

    def keys(self):
        return self._items.keys()


def sgd_step(param: Tensor, grad: np.ndarray, velocity: np.ndarray,
             lr: float, momentum: float, weight_decay: float) -> None:
    """One SGD-momentum update in place:

        v <- momentum*v + grad + weight_decay*param
        param <- param - lr*v
    """
    if grad.shape != param.data.shape or velocity.shape != param.data.shape:
        raise ValueError(
            f"sgd_step shape mismatch: param {param.data.shape}, "
            f"grad {grad.shape}, velocity {velocity.shape}")
    velocity *= momentum
    velocity += grad
    if weight_decay:
        velocity += weight_decay * param.data
    param.data -= lr * velocity


class SGD:
    """SGD with momentum and L2 weight decay over named parameters."""

    def __init__(self, named_params, momentum=0.0, weight_decay=0.0):
        self.items = list(named_params)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.items}

    def zero_grad(self):
        for _, p in self.items:
            p.zero_grad()

    def step(self, lr: float):
        for name, p in self.items:
            if p.grad is None:
                continue
            sgd_step(p, p.grad, self.velocity[name], lr,
                     self.momentum, self.weight_decay)

    def state_arrays(self, prefix="opt."):
        """Velocity buffers keyed for checkpointing."""
        return {prefix + name: v for name, v in self.velocity.items()}

    def load_state_arrays(self, arrays, prefix="opt."):
        for name in self.velocity:
            key = prefix + name
            if key in arrays:
                got = np.asarray(arrays[key], dtype=np.float64)
                if got.shape != self.velocity[name].shape:
                    raise ValueError(f"velocity shape mismatch for {name}")
                self.velocity[name] = got.copy()
