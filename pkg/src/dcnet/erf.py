"""Effective-receptive-field estimation via input gradients.

For each seed a freshly initialized block in eval mode processes a
random input; the gradient of the center output element (summed over
channels) with respect to the input is accumulated in magnitude over
seeds and max-normalized.  Pixels at or above a threshold fraction of
the peak count as the effective support.

Eval-mode BN matters here: train-mode batch statistics couple every
pixel to every other and would wash out the locality being measured.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor
from .autograd import Tape, Var, mul_const, sum_all


def erf_map(make_block, c_in, hw, seeds=10, base_seed=0):
    """Seed-averaged |d out_center / d input| map, max-normalized.

    make_block(rng) must build a freshly initialized, spatial-size
    preserving module; hw is the square-or-not input size (h, w).
    """
    if seeds < 1:
        raise ValueError("seeds must be >= 1")
    h, w = hw
    acc = np.zeros((h, w), np.float64)
    for s in range(seeds):
        rng = np.random.default_rng(base_seed + s)
        block = make_block(rng)
        block.eval()
        x = Var(rng.normal(0, 1, (1, c_in, h, w)).astype(tensor.DTYPE),
                requires_grad=True)
        with Tape() as t:
            y = block.forward(x)
            if y.data.shape[2:] != (h, w):
                raise ValueError(
                    f"block must preserve spatial size, got {y.data.shape[2:]} "
                    f"for input {(h, w)}")
            mask = np.zeros_like(y.data)
            mask[:, :, h // 2, w // 2] = 1.0
            t.backward(sum_all(mul_const(y, mask)))
        acc += np.abs(np.asarray(x.grad, np.float64)).sum(axis=(0, 1))
    peak = acc.max()
    return acc / peak if peak > 0 else acc


def erf_area(erf, tau=0.01):
    """Count of pixels at or above tau times the peak."""
    if not 0 < tau < 1:
        raise ValueError(f"tau must be in (0, 1), got {tau}")
    return int((np.asarray(erf) >= tau).sum())


def support_bbox(erf):
    """Tight bounding box (h0, h1, w0, w1, height, width) of strictly
    positive response; None when the map is identically zero."""
    e = np.asarray(erf)
    rows = np.flatnonzero(e.max(axis=1) > 0)
    cols = np.flatnonzero(e.max(axis=0) > 0)
    if rows.size == 0:
        return None
    h0, h1, w0, w1 = rows[0], rows[-1], cols[0], cols[-1]
    return int(h0), int(h1), int(w0), int(w1), int(h1 - h0 + 1), int(w1 - w0 + 1)


@dataclass
class ErfEntry:
    name: str
    area: int
    bbox: tuple
    erf: np.ndarray


def compare_modules(named_factories, c_in, hw, tau=0.01, seeds=10, base_seed=0):
    """ERF area ranking over named block factories.

    named_factories: mapping or sequence of (name, make_block) pairs,
    each factory taking an rng.  Returns ErfEntry rows sorted by
    descending area.
    """
    if isinstance(named_factories, dict):
        named_factories = named_factories.items()
    named_factories = list(named_factories)
    if len(named_factories) < 2:
        raise ValueError("need at least 2 blocks to compare")
    entries = []
    for name, factory in named_factories:
        e = erf_map(factory, c_in, hw, seeds=seeds, base_seed=base_seed)
        entries.append(ErfEntry(name, erf_area(e, tau), support_bbox(e), e))
    entries.sort(key=lambda r: -r.area)
    return entries
