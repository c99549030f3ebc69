"""Network building blocks.

The multi-scale block here keeps full spatial resolution through two
nested banks of dilated convolutions and adds the result back onto the
locally-convolved input, so one block sees context far beyond a plain
3x3 while staying cheap in parameters.  A single-level variant (one bank
instead of two) serves as the comparison baseline, and a small residual
block builds the encoders.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd, tensor
from .autograd import Parameter, Var
from .tensor import ConvSpec


class Module:
    """Composite with recursive parameter/buffer discovery.

    Submodules and parameters register by plain attribute assignment;
    lists (possibly nested) of submodules are walked in index order.
    """

    def __init__(self):
        self.training = True

    def _children(self):
        for attr, v in self.__dict__.items():
            if attr.startswith("_"):
                continue
            yield from _flatten(attr, v)

    def named_parameters(self, prefix=""):
        for attr, v in self._children():
            name = f"{prefix}{attr}"
            if isinstance(v, Parameter):
                if not v.name:
                    v.name = name
                yield name, v
            else:
                yield from v.named_parameters(f"{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffer_slots(self, prefix=""):
        """(name, owner, attr) triples for assignable non-parameter state."""
        for attr, v in self._children():
            name = f"{prefix}{attr}"
            if isinstance(v, Module):
                yield from v.named_buffer_slots(f"{name}.")
        for attr in getattr(self, "buffer_names", ()):
            yield f"{prefix}{attr}", self, attr

    def named_buffers(self, prefix=""):
        for name, owner, attr in self.named_buffer_slots(prefix):
            yield name, getattr(owner, attr)

    def submodules(self):
        yield self
        for _, v in self._children():
            if isinstance(v, Module):
                yield from v.submodules()

    def train(self, mode=True):
        for m in self.submodules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)


def _flatten(name, v):
    if isinstance(v, (Parameter, Module)):
        yield name, v
    elif isinstance(v, (list, tuple)):
        for i, item in enumerate(v):
            yield from _flatten(f"{name}.{i}", item)


def param_count(module):
    return sum(p.data.size for p in module.parameters())


class Conv2d(Module):
    """Convolution layer; weights drawn He-style (fan-in scaled normal)."""

    def __init__(self, spec: ConvSpec, rng, bias=False):
        super().__init__()
        self.spec = spec
        fan_in = (spec.in_channels // spec.groups) * spec.kernel[0] * spec.kernel[1]
        std = np.sqrt(2.0 / fan_in)
        self.weight = Parameter(rng.normal(0.0, std, spec.weight_shape))
        self.bias = Parameter(np.zeros(spec.out_channels)) if bias else None

    def forward(self, x):
        return autograd.conv2d(x, self.weight, self.bias, self.spec)


class BatchNorm2d(Module):
    buffer_names = ("running_mean", "running_var")

    def __init__(self, channels, eps=1e-5, momentum=0.1):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels, tensor.DTYPE)
        self.running_var = np.ones(channels, tensor.DTYPE)

    def forward(self, x):
        if x.data.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {x.data.shape[1]}")
        return autograd.batchnorm(x, self.gamma, self.beta, self, self.training)


class ConvBNReLU(Module):
    """conv -> batchnorm -> optional ReLU; the conv carries no bias."""

    def __init__(self, spec: ConvSpec, rng, act=True):
        super().__init__()
        self.conv = Conv2d(spec, rng, bias=False)
        self.bn = BatchNorm2d(spec.out_channels)
        self.act = act

    def forward(self, x):
        y = self.bn.forward(self.conv.forward(x))
        return autograd.relu(y) if self.act else y


@dataclass(frozen=True)
class ResASPP2Config:
    """Channel plan for the nested multi-scale block.

    c_in -> c_out via the input conv; each dilated branch runs at width m;
    dilations apply to both nesting levels.
    """

    c_in: int
    m: int
    c_out: int
    dilations: tuple = (1, 3, 5, 7)

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if self.c_in < 1 or self.m < 1 or self.c_out < 1:
            raise ValueError("channel counts must be >= 1")
        ds = self.dilations
        if not ds or any(d % 2 == 0 for d in ds):
            raise ValueError(f"dilations must be odd, got {ds}")
        if any(b <= a for a, b in zip(ds, ds[1:])):
            raise ValueError(f"dilations must be strictly increasing, got {ds}")


def _dilated_spec(c_in, c_out, d):
    return ConvSpec(c_in, c_out, kernel=3, padding=d, dilation=d)


class ResASPP2(Module):
    """Residual block with a two-level bank of parallel dilated convolutions.

    F(x) comes from a 3x3 input conv; every level-1 branch output is
    re-expanded by a full second bank, the 16 paths are concatenated and
    fused by a linear 1x1 conv+BN, and the fusion is added back to F(x).
    Spatial size is preserved throughout (pad = dilation everywhere).
    """

    def __init__(self, cfg: ResASPP2Config, rng):
        super().__init__()
        self.cfg = cfg
        c_in, m, c_out, ds = cfg.c_in, cfg.m, cfg.c_out, cfg.dilations
        self.input_conv = ConvBNReLU(ConvSpec(c_in, c_out, kernel=3, padding=1), rng)
        self.level1 = [ConvBNReLU(_dilated_spec(c_out, m, d), rng) for d in ds]
        self.level2 = [[ConvBNReLU(_dilated_spec(m, m, d), rng) for d in ds]
                       for _ in ds]
        self.fuse = ConvBNReLU(
            ConvSpec(m * len(ds) ** 2, c_out, kernel=1), rng, act=False)

    def forward(self, x):
        if x.data.shape[1] != self.cfg.c_in:
            raise ValueError(
                f"expected {self.cfg.c_in} channels, got {x.data.shape[1]}")
        f = self.input_conv.forward(x)
        paths = []
        for branch, second in zip(self.level1, self.level2):
            y1 = branch.forward(f)
            for leaf in second:
                paths.append(leaf.forward(y1))
        return autograd.add(f, self.fuse.forward(autograd.concat(paths)))


class ASPP(Module):
    """Single-level counterpart: one bank of dilated branches, then fuse."""

    def __init__(self, cfg: ResASPP2Config, rng):
        super().__init__()
        self.cfg = cfg
        c_in, m, c_out, ds = cfg.c_in, cfg.m, cfg.c_out, cfg.dilations
        self.input_conv = ConvBNReLU(ConvSpec(c_in, c_out, kernel=3, padding=1), rng)
        self.branches = [ConvBNReLU(_dilated_spec(c_out, m, d), rng) for d in ds]
        self.fuse = ConvBNReLU(ConvSpec(m * len(ds), c_out, kernel=1), rng, act=False)

    def forward(self, x):
        if x.data.shape[1] != self.cfg.c_in:
            raise ValueError(
                f"expected {self.cfg.c_in} channels, got {x.data.shape[1]}")
        f = self.input_conv.forward(x)
        paths = [b.forward(f) for b in self.branches]
        return autograd.add(f, self.fuse.forward(autograd.concat(paths)))


class BasicBlock(Module):
    """Residual encoder block: 3x3-BN-ReLU, 3x3-BN, projected skip, ReLU."""

    def __init__(self, c_in, c_out, stride, rng):
        super().__init__()
        if stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {stride}")
        self.conv1 = ConvBNReLU(
            ConvSpec(c_in, c_out, kernel=3, stride=stride, padding=1), rng)
        self.conv2 = ConvBNReLU(ConvSpec(c_out, c_out, kernel=3, padding=1),
                                rng, act=False)
        if stride != 1 or c_in != c_out:
            self.skip = ConvBNReLU(
                ConvSpec(c_in, c_out, kernel=1, stride=stride), rng, act=False)
        else:
            self.skip = None

    def forward(self, x):
        y = self.conv2.forward(self.conv1.forward(x))
        s = x if self.skip is None else self.skip.forward(x)
        return autograd.relu(autograd.add(y, s))


class SideHead(Module):
    """3x3 conv to one channel, upsample to target size, sigmoid."""

    def __init__(self, c_in, rng):
        super().__init__()
        self.conv = Conv2d(ConvSpec(c_in, 1, kernel=3, padding=1), rng, bias=True)

    def forward(self, x, out_h, out_w):
        y = self.conv.forward(x)
        if y.data.shape[2] != out_h or y.data.shape[3] != out_w:
            y = autograd.upsample_bilinear(y, out_h, out_w)
        return autograd.sigmoid(y)
