"""Small module system over the tensor engine.

Modules own Parameters and submodules in attribute insertion order; the
dotted attribute path of a parameter is its checkpoint identity.
"""

from __future__ import annotations

import math

import numpy as np

from .core import Parameter, ops


def init_param(shape, spec: str, rng: np.random.Generator | None = None, dtype=np.float32) -> Parameter:
    """Build a Parameter from an init recipe: normal(std) | uniform(bound) | zeros | ones."""
    if spec == "zeros":
        data = np.zeros(shape, dtype=dtype)
    elif spec == "ones":
        data = np.ones(shape, dtype=dtype)
    elif rng is None:
        raise ValueError(f"init spec '{spec}' needs an rng")
    elif spec.startswith("normal(") and spec.endswith(")"):
        std = float(spec[len("normal("):-1])
        data = rng.normal(0.0, std, size=shape).astype(dtype)
    elif spec.startswith("uniform(") and spec.endswith(")"):
        bound = float(spec[len("uniform("):-1])
        data = rng.uniform(-bound, bound, size=shape).astype(dtype)
    else:
        raise ValueError(f"unknown init spec '{spec}'")
    return Parameter(data, init_spec=spec, dtype=dtype)


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
            self.__dict__.pop(name, None)
        elif isinstance(value, Module):
            self._modules[name] = value
            self.__dict__.pop(name, None)
        else:
            object.__setattr__(self, name, value)

    def __getattr__(self, name):
        # only consulted when normal lookup fails
        params = self.__dict__.get("_params", {})
        if name in params:
            return params[name]
        modules = self.__dict__.get("_modules", {})
        if name in modules:
            return modules[name]
        raise AttributeError(f"{type(self).__name__} has no attribute '{name}'")

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            full = f"{prefix}{name}"
            p.name = full
            yield full, p
        for name, mod in self._modules.items():
            yield from mod.named_parameters(prefix=f"{prefix}{name}.")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def modules(self):
        yield self
        for mod in self._modules.values():
            yield from mod.modules()

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def cast(self, dtype):
        """In-place dtype conversion of all parameters (grads dropped)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class ModuleList(Module):
    def __init__(self, mods=()):
        super().__init__()
        self._order = []
        for m in mods:
            self.append(m)

    def append(self, mod: Module):
        key = str(len(self._order))
        self._modules[key] = mod
        self._order.append(key)

    def __iter__(self):
        return (self._modules[k] for k in self._order)

    def __len__(self):
        return len(self._order)

    def __getitem__(self, i):
        return self._modules[self._order[i]]


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, *, stride: int = 1, padding: int = 0,
                 groups: int = 1, bias: bool = True, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        fan_in = (cin // groups) * kernel * kernel
        bound = 1.0 / math.sqrt(fan_in)
        self.weight = init_param((cout, cin // groups, kernel, kernel), f"uniform({bound})", rng, dtype)
        self.bias = init_param((cout,), f"uniform({bound})", rng, dtype) if bias else None
        self.stride = stride
        self.padding = padding
        self.groups = groups
        self.pad_mode = "zeros"

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride,
                          padding=self.padding, groups=self.groups, pad_mode=self.pad_mode)


class Linear(Module):
    def __init__(self, din: int, dout: int, *, bias: bool = True, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        bound = 1.0 / math.sqrt(din)
        self.weight = init_param((dout, din), f"uniform({bound})", rng, dtype)
        self.bias = init_param((dout,), f"uniform({bound})", rng, dtype) if bias else None

    def forward(self, x):
        return ops.linear(x, self.weight, self.bias)


class ChannelNorm(Module):
    """LayerNorm over channels at each spatial position, eps fixed at 1e-6."""

    def __init__(self, channels: int, *, dtype=np.float32):
        super().__init__()
        self.gamma = init_param((channels,), "ones", dtype=dtype)
        self.beta = init_param((channels,), "zeros", dtype=dtype)
        self.eps = 1e-6

    def forward(self, x):
        return ops.layer_norm(x, self.gamma, self.beta, eps=self.eps)


def set_conv_pad_mode(root: Module, mode: str) -> None:
    """Switch every convolution under ``root`` to the given padding mode."""
    if mode not in ("zeros", "circular"):
        raise ValueError(f"unknown pad mode '{mode}'")
    for mod in root.modules():
        if isinstance(mod, Conv2d):
            mod.pad_mode = mode


def check_param_cover(groups, model: Module) -> None:
    """Assert the name->param groups partition exactly the model's parameters."""
    seen = {}
    for g in groups:
        for name, _ in g:
            if name in seen:
                raise ValueError(f"parameter '{name}' appears in more than one group")
            seen[name] = True
    missing = [n for n, _ in model.named_parameters() if n not in seen]
    extra = set(seen) - {n for n, _ in model.named_parameters()}
    if missing or extra:
        raise ValueError(f"param groups do not cover the model: missing={missing} extra={sorted(extra)}")
