"""Module system: parameter registration, naming, grouping invariants."""

import numpy as np
import pytest

from deco.core import Tensor
from deco.nn import (ChannelNorm, Conv2d, Linear, Module, ModuleList,
                     check_param_cover, init_param, set_conv_pad_mode)


class Toy(Module):
    def __init__(self, rng):
        super().__init__()
        self.fc = Linear(4, 3, rng=rng)
        self.blocks = ModuleList([Linear(3, 3, rng=rng), Linear(3, 2, rng=rng)])
        self.norm = ChannelNorm(2)


def test_named_parameters_dotted_paths(rng):
    names = [n for n, _ in Toy(rng).named_parameters()]
    assert names == [
        "fc.weight", "fc.bias",
        "blocks.0.weight", "blocks.0.bias",
        "blocks.1.weight", "blocks.1.bias",
        "norm.gamma", "norm.beta",
    ]


def test_parameter_name_assigned_on_walk(rng):
    m = Toy(rng)
    list(m.named_parameters())
    assert m.fc.weight.name == "fc.weight"


def test_zero_grad_clears_all(rng):
    m = Toy(rng)
    for p in m.parameters():
        p.grad = np.ones_like(p.data)
    m.zero_grad()
    assert all(p.grad is None for p in m.parameters())


def test_cast_converts_dtype(rng):
    m = Toy(rng).cast(np.float64)
    assert all(p.dtype == np.float64 for p in m.parameters())


def test_init_param_specs(rng):
    assert np.array_equal(init_param((3,), "zeros").data, np.zeros(3, np.float32))
    assert np.array_equal(init_param((3,), "ones").data, np.ones(3, np.float32))
    u = init_param((1000,), "uniform(0.25)", rng)
    assert u.data.min() >= -0.25 and u.data.max() <= 0.25
    with pytest.raises(ValueError):
        init_param((3,), "normal(0.1)")  # rng required
    with pytest.raises(ValueError):
        init_param((3,), "cauchy(1.0)", rng)


def test_conv2d_module_shapes(rng):
    conv = Conv2d(3, 8, 3, stride=2, padding=1, rng=rng)
    out = conv(Tensor(np.zeros((2, 3, 9, 9), np.float32)))
    assert out.shape == (2, 8, 5, 5)


def test_set_conv_pad_mode_recurses(rng):
    class Net(Module):
        def __init__(self):
            super().__init__()
            self.a = Conv2d(1, 1, 3, padding=1, rng=rng)
            self.inner = ModuleList([Conv2d(1, 1, 3, padding=1, rng=rng)])

    net = Net()
    set_conv_pad_mode(net, "circular")
    assert net.a.pad_mode == "circular"
    assert net.inner[0].pad_mode == "circular"
    with pytest.raises(ValueError):
        set_conv_pad_mode(net, "reflect")


def test_check_param_cover_accepts_partition(rng):
    m = Toy(rng)
    named = list(m.named_parameters())
    check_param_cover([named[:3], named[3:]], m)


def test_check_param_cover_rejects_overlap_and_gap(rng):
    m = Toy(rng)
    named = list(m.named_parameters())
    with pytest.raises(ValueError, match="more than one group"):
        check_param_cover([named, named[:1]], m)
    with pytest.raises(ValueError, match="missing"):
        check_param_cover([named[:-1]], m)
