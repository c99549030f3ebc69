"""Training losses: per-pixel cross entropy, soft IoU, and the weighted
total over all side outputs.

Both losses are summed (not averaged) over pixels; the total sums the
encoder side outputs against their auxiliary targets with BCE only and
the decoder side outputs against the saliency mask with BCE + IoU.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd
from .autograd import Var

CLAMP_EPS = 1e-7
IOU_EPS = 1e-7


def _as_const(g, like):
    g = np.asarray(g, like.data.dtype)
    if g.shape != like.data.shape:
        raise ValueError(f"target shape {g.shape} != prediction shape {like.data.shape}")
    if g.min() < 0 or g.max() > 1:
        raise ValueError("target values must lie in [0, 1]")
    return g


def bce(p: Var, g) -> Var:
    """Binary cross entropy summed over all pixels.

    p holds probabilities; a [eps, 1-eps] clamp realizes the 0*log 0 = 0
    convention and keeps log finite.
    """
    g = _as_const(g, p)
    pc = autograd.clamp(p, CLAMP_EPS, 1.0 - CLAMP_EPS)
    pos = autograd.mul_const(autograd.log(pc), g)
    neg = autograd.mul_const(autograd.log(autograd.affine(pc, -1.0, 1.0)), 1.0 - g)
    return autograd.scale(autograd.sum_all(autograd.add(pos, neg)), -1.0)


def iou_loss(p: Var, g) -> Var:
    """1 - sum(g*p) / sum(g + p - g*p), the soft intersection-over-union."""
    g = _as_const(g, p)
    if p.data.min() < 0 or p.data.max() > 1:
        raise ValueError("predictions must lie in [0, 1]")
    inter = autograd.sum_all(autograd.mul_const(p, g))
    # union = sum(g) + sum(p) - inter, with an eps floor against 0/0
    p_minus_gp = autograd.sub(autograd.sum_all(p), inter)
    union = autograd.affine(p_minus_gp, 1.0, float(g.sum()) + IOU_EPS)
    return autograd.affine(autograd.div(inter, union), -1.0, 1.0)


@dataclass
class LossWeights:
    """Per-side-output weights: w1/w2 for the two encoder streams, wd for
    the decoder stages.  Defaults follow the all-ones setting."""

    w1: tuple = (1.0, 1.0, 1.0, 1.0)
    w2: tuple = (1.0, 1.0, 1.0, 1.0)
    wd: tuple = (1.0, 1.0, 1.0, 1.0, 1.0)

    @staticmethod
    def ones(e, d):
        return LossWeights((1.0,) * e, (1.0,) * e, (1.0,) * d)


@dataclass
class LossReport:
    """Scalar values of every term plus the weighted total.

    total_var keeps the graph node of the total so callers can run
    backward; it is None when the loss was built outside a tape.
    """

    l1: list
    l2: list
    ld: list
    total: float
    total_var: Var = None


def total_loss(enc1_maps, enc2_maps, dec_maps, aux1_gt, aux2_gt, saliency_gt,
               weights: LossWeights) -> LossReport:
    """Weighted sum over all side outputs.

    enc1_maps / enc2_maps are the E side outputs of the two encoder
    streams, scored with BCE against their auxiliary targets; dec_maps
    are the D decoder side outputs, scored with BCE + IoU against the
    saliency mask.
    """
    if len(weights.w1) != len(enc1_maps) or len(weights.w2) != len(enc2_maps):
        raise ValueError(
            f"weights expect {len(weights.w1)}/{len(weights.w2)} encoder maps, "
            f"got {len(enc1_maps)}/{len(enc2_maps)}")
    if len(weights.wd) != len(dec_maps):
        raise ValueError(
            f"weights expect {len(weights.wd)} decoder maps, got {len(dec_maps)}")
    l1 = [bce(p, aux1_gt) for p in enc1_maps]
    l2 = [bce(p, aux2_gt) for p in enc2_maps]
    ld = [autograd.add(bce(p, saliency_gt), iou_loss(p, saliency_gt))
          for p in dec_maps]
    terms = []
    for w, t in zip(weights.w1 + weights.w2 + weights.wd, l1 + l2 + ld):
        if w != 0.0:
            terms.append(autograd.scale(t, w))
    if terms:
        total = terms[0]
        for t in terms[1:]:
            total = autograd.add(total, t)
    else:
        total = Var(np.asarray(0.0, np.float32))
    return LossReport(
        l1=[float(t.data) for t in l1],
        l2=[float(t.data) for t in l2],
        ld=[float(t.data) for t in ld],
        total=float(total.data),
        total_var=total,
    )
