"""Shared test helpers."""

import numpy as np

from dcnet.tensor import ConvSpec


def random_conv_case(rng, max_extra=4):
    """Random (spec, x, weight, bias) draw covering stride, padding,
    dilation and grouping; sizes kept small enough for loop oracles."""
    groups = int(rng.integers(1, 4))
    cig, cog = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    spec = ConvSpec(
        groups * cig, groups * cog,
        kernel=(int(rng.integers(1, 4)), int(rng.integers(1, 4))),
        stride=(int(rng.integers(1, 3)), int(rng.integers(1, 3))),
        padding=(int(rng.integers(0, 3)), int(rng.integers(0, 3))),
        dilation=(int(rng.integers(1, 3)), int(rng.integers(1, 3))),
        groups=groups)
    ekh = (spec.kernel[0] - 1) * spec.dilation[0] + 1
    ekw = (spec.kernel[1] - 1) * spec.dilation[1] + 1
    h = max(1, ekh - 2 * spec.padding[0]) + int(rng.integers(0, max_extra))
    w = max(1, ekw - 2 * spec.padding[1]) + int(rng.integers(0, max_extra))
    n = int(rng.integers(1, 3))
    x = rng.normal(0, 1, (n, spec.in_channels, h, w)).astype(np.float32)
    wt = rng.normal(0, 0.5, spec.weight_shape).astype(np.float32)
    b = (rng.normal(0, 0.5, spec.out_channels).astype(np.float32)
         if rng.random() < 0.5 else None)
    return spec, x, wt, b


def gapped_values(rng, shape, lo=-1.0, hi=1.0):
    """Shuffled evenly spaced values: all distinct with pairwise gaps well
    above the finite-difference step, so max-pool selections are stable."""
    size = int(np.prod(shape))
    vals = np.linspace(lo, hi, size)
    rng.shuffle(vals)
    return vals.reshape(shape)


def random_mask(rng, hw, p=0.6):
    """Random binary mask: thresholded noise plus one solid rectangle so
    most draws contain both phases and some connected structure."""
    h, w = hw
    m = (rng.random((h, w)) > p).astype(np.uint8)
    if rng.random() < 0.8:
        sh = int(rng.integers(2, max(3, h // 2)))
        sw = int(rng.integers(2, max(3, w // 2)))
        top = int(rng.integers(0, h - sh + 1))
        left = int(rng.integers(0, w - sw + 1))
        m[top:top + sh, left:left + sw] = 1
    return m
