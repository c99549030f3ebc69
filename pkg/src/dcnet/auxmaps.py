"""Auxiliary supervision targets derived from a binary ground-truth mask.

Edge maps mark salient pixels within a given Chebyshev distance of
background (the image exterior counts as background, so objects touching
the frame still get a band).  The location map is a deliberately coarse
blob: average-pool by 16, upsample back, threshold.  Body/detail split
the mask by normalized Euclidean distance to background and always sum
back to the mask exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import tensor

POOL_FACTOR = 16
EDGE_WIDTHS = (1, 2, 3, 4, 5)


def _check_mask(mask):
    m = np.asarray(mask)
    if m.ndim != 2 or m.size == 0:
        raise ValueError(f"mask must be non-empty 2-D, got shape {m.shape}")
    vals = np.unique(m)
    if not np.isin(vals, (0, 1)).all():
        raise ValueError(f"mask must be binary, found values {vals[:8]}")
    return m.astype(bool)


def edge_map(mask, width):
    """Salient pixels whose Chebyshev distance to background is <= width,
    realized as mask minus ``width`` rounds of 3x3 erosion."""
    m = _check_mask(mask)
    if not isinstance(width, (int, np.integer)) or width < 1:
        raise ValueError(f"width must be a positive integer, got {width!r}")
    eroded = ndimage.binary_erosion(
        m, structure=np.ones((3, 3), bool), iterations=int(width), border_value=0)
    return (m & ~eroded).astype(np.uint8)


def location_map(mask):
    """Coarse object-location blob.

    Zero-pad to a multiple of 16, average-pool by 16, bilinear-upsample
    to the original size, threshold at 0.5.
    """
    m = _check_mask(mask)
    h, w = m.shape
    ph = (-h) % POOL_FACTOR
    pw = (-w) % POOL_FACTOR
    x = np.pad(m.astype(tensor.DTYPE), ((0, ph), (0, pw)))[None, None]
    pooled = tensor.avgpool2d(x, POOL_FACTOR, POOL_FACTOR)
    up = tensor.bilinear_resize(pooled, h, w)[0, 0]
    return (up >= 0.5).astype(np.uint8)


def body_detail(mask):
    """Split the mask into a center-weighted body and its complement.

    body = mask * dist / max(dist) with dist the Euclidean distance to
    background (exterior included); detail = mask - body.  The two sum
    back to the mask bit-exactly.
    """
    m = _check_mask(mask)
    dist = ndimage.distance_transform_edt(np.pad(m, 1))[1:-1, 1:-1]
    peak = dist.max()
    maskf = m.astype(tensor.DTYPE)
    if peak == 0:
        body = np.zeros_like(maskf)
    else:
        body = (maskf * (dist / peak)).astype(tensor.DTYPE)
    detail = maskf - body
    return body, detail


@dataclass
class AuxMapSet:
    """Every auxiliary target for one mask: edge bands for widths 1..5,
    the location blob, and the body/detail decomposition."""

    edges: dict
    location: np.ndarray
    body: np.ndarray
    detail: np.ndarray

    @property
    def edge4(self):
        return self.edges[4]


def build_aux_set(mask, edge_widths=EDGE_WIDTHS) -> AuxMapSet:
    body, detail = body_detail(mask)
    return AuxMapSet(
        edges={w: edge_map(mask, w) for w in edge_widths},
        location=location_map(mask),
        body=body,
        detail=detail,
    )


def training_targets(mask):
    """(edge-width-4, location) pair used to supervise the two encoders."""
    return edge_map(mask, 4), location_map(mask)
