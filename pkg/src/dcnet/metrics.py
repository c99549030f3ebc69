"""Saliency evaluation suite: MAE, PR/F curves, max F, weighted F,
S-measure, and mean E-measure.

Threshold metrics quantize predictions to 8 bits (round half up) and
sweep all 256 integer thresholds; a pixel is positive when its quantized
value is >= t.  The structural measures follow the standard reference
algorithms, with every 0/0 division guarded by a single
configurable eps and degenerate ground truths (all background or all
foreground) handled by the documented conventions below.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class MetricConfig:
    beta2_f: float = 0.3
    beta2_wf: float = 1.0
    alpha_s: float = 0.5
    thresholds: int = 256
    eps: float = 1e-8

    def __post_init__(self):
        if min(self.beta2_f, self.beta2_wf, self.alpha_s, self.eps) <= 0:
            raise ValueError("metric constants must be positive")
        if self.thresholds != 256:
            raise ValueError("threshold sweep is fixed to 256 levels")


DEFAULT_CONFIG = MetricConfig()


def _check_pair(pred, gt):
    p = np.asarray(pred, np.float64)
    g = np.asarray(gt)
    if p.ndim != 2 or p.shape != g.shape:
        raise ValueError(f"pred {p.shape} and gt {g.shape} must be equal 2-D shapes")
    if p.min() < 0 or p.max() > 1:
        raise ValueError("pred values must lie in [0, 1]")
    if not np.isin(np.unique(g), (0, 1)).all():
        raise ValueError("gt must be binary")
    return p, g.astype(bool)


def quantize8(pred):
    """Map [0,1] to integers 0..255, halves rounding up."""
    p = np.asarray(pred, np.float64)
    if p.min() < 0 or p.max() > 1:
        raise ValueError("pred values must lie in [0, 1]")
    return np.floor(p * 255.0 + 0.5).astype(np.int64)


def mae(pred, gt):
    p, g = _check_pair(pred, gt)
    return float(np.abs(p - g).mean())


@dataclass
class CurveData:
    """256 precision/recall/F values (threshold index = threshold)."""

    precision: np.ndarray
    recall: np.ndarray
    f: np.ndarray

    def __post_init__(self):
        for a in (self.precision, self.recall, self.f):
            if a.shape != (256,):
                raise ValueError(f"curves must have 256 entries, got {a.shape}")

    @staticmethod
    def mean(curves):
        if not curves:
            raise ValueError("cannot average zero curves")
        return CurveData(
            precision=np.mean([c.precision for c in curves], axis=0),
            recall=np.mean([c.recall for c in curves], axis=0),
            f=np.mean([c.f for c in curves], axis=0),
        )


def pr_and_f_curves(pred, gt, cfg: MetricConfig = DEFAULT_CONFIG) -> CurveData:
    """Precision/recall/F at every threshold via value-histogram suffix sums."""
    p, g = _check_pair(pred, gt)
    q = quantize8(p)
    # counts of pixels with q >= t, over all pixels and over foreground
    hist_all = np.bincount(q.ravel(), minlength=256)
    hist_fg = np.bincount(q[g].ravel(), minlength=256)
    pos = np.cumsum(hist_all[::-1])[::-1].astype(np.float64)
    tp = np.cumsum(hist_fg[::-1])[::-1].astype(np.float64)
    nfg = float(g.sum())
    eps = cfg.eps
    b2 = cfg.beta2_f
    precision = tp / (pos + eps)
    recall = tp / (nfg + eps)
    f = (1 + b2) * precision * recall / (b2 * precision + recall + eps)
    return CurveData(precision, recall, f)


def max_f(curve: CurveData):
    return float(curve.f.max())


_GAUSS7 = None


def _gauss7():
    """7x7 Gaussian, sigma 5, normalized to unit sum."""
    global _GAUSS7
    if _GAUSS7 is None:
        ax = np.arange(-3, 4, dtype=np.float64)
        k = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * 5.0 ** 2))
        _GAUSS7 = k / k.sum()
    return _GAUSS7


def _nearest_foreground(err, g):
    """Distance to the nearest foreground pixel for every background
    pixel, plus the error field with background entries replaced by the
    error at that pixel.

    Exact Euclidean nearest with ties broken by row-major foreground
    order, so the assignment is fully determined by the mask (a feature
    transform from a distance library would leave tie-breaking to the
    library).  The dense chunked search is O(bg * fg), fine at the image
    sizes this package targets.
    """
    dst = np.zeros(g.shape, np.float64)
    err_t = err.copy()
    fy, fx = np.nonzero(g)
    by, bx = np.nonzero(~g)
    for s in range(0, by.size, 2048):
        cy = by[s:s + 2048]
        cx = bx[s:s + 2048]
        d2 = (cy[:, None] - fy[None, :]) ** 2 + (cx[:, None] - fx[None, :]) ** 2
        k = np.argmin(d2, axis=1)
        dst[cy, cx] = np.sqrt(d2[np.arange(k.size), k].astype(np.float64))
        err_t[cy, cx] = err[fy[k], fx[k]]
    return dst, err_t


def weighted_f(pred, gt, cfg: MetricConfig = DEFAULT_CONFIG):
    """Weighted F-measure; returns (value, degenerate).

    Background errors are replaced by the error at the nearest foreground
    pixel before Gaussian smoothing (dependency), smoothed errors can
    only lower foreground error (interpolation), and background errors
    decay with distance to the object (importance).  Empty ground truth
    has no foreground statistics: returns (0, True).
    """
    p, g = _check_pair(pred, gt)
    if not g.any():
        return 0.0, True
    eps = cfg.eps
    err = np.abs(p - g.astype(np.float64))
    dst, err_t = _nearest_foreground(err, g)
    err_s = ndimage.correlate(err_t, _gauss7(), mode="constant", cval=0.0)
    min_err = np.where(g & (err_s < err), err_s, err)
    weight = np.where(g, 1.0, 2.0 - np.exp(np.log(0.5) / 5.0 * dst))
    ew = min_err * weight
    tpw = g.sum() - ew[g].sum()
    fpw = ew[~g].sum()
    r = 1.0 - ew[g].mean()
    pw = tpw / (eps + tpw + fpw)
    b2 = cfg.beta2_wf
    q = (1 + b2) * r * pw / (eps + r + b2 * pw)
    return float(q), False


def s_measure(pred, gt, cfg: MetricConfig = DEFAULT_CONFIG):
    """Structural similarity of the foreground map.

    Degenerate ground truths score the prediction's plain mean (inverted
    for all-background); otherwise the object-aware and region-aware
    scores combine with weight alpha and the result clamps at 0.
    """
    p, g = _check_pair(pred, gt)
    y = g.mean()
    if y == 0:
        return float(1.0 - p.mean())
    if y == 1:
        return float(p.mean())
    score = (cfg.alpha_s * _s_object(p, g, cfg.eps)
             + (1 - cfg.alpha_s) * _s_region(p, g, cfg.eps))
    return float(max(score, 0.0))


def _dist_stats(vals, eps):
    x = vals.mean()
    return 2.0 * x / (x * x + 1.0 + vals.std() + eps)


def _s_object(p, g, eps):
    o_fg = _dist_stats(p[g], eps)
    o_bg = _dist_stats(1.0 - p[~g], eps)
    u = g.mean()
    return u * o_fg + (1 - u) * o_bg


def _centroid(g):
    """Foreground centroid as 1-based column/row counts (never 0, so the
    upper-left region is never empty for non-degenerate masks)."""
    h, w = g.shape
    total = g.sum()
    if total == 0:
        return int(np.floor(w / 2 + 0.5)), int(np.floor(h / 2 + 0.5))
    cols = np.arange(1, w + 1, dtype=np.float64)
    rows = np.arange(1, h + 1, dtype=np.float64)
    x = int(np.floor((g.sum(axis=0) * cols).sum() / total + 0.5))
    y = int(np.floor((g.sum(axis=1) * rows).sum() / total + 0.5))
    return x, y


def _s_region(p, g, eps):
    h, w = g.shape
    x, y = _centroid(g)
    area = h * w
    weights = (x * y / area,
               (w - x) * y / area,
               x * (h - y) / area,
               0.0)
    weights = weights[:3] + (1.0 - sum(weights),)
    quads = (((slice(None, y), slice(None, x))),
             ((slice(None, y), slice(x, None))),
             ((slice(y, None), slice(None, x))),
             ((slice(y, None), slice(x, None))))
    score = 0.0
    for wgt, (sy, sx) in zip(weights, quads):
        if wgt > 0 and g[sy, sx].size:
            score += wgt * _ssim(p[sy, sx], g[sy, sx].astype(np.float64), eps)
    return score


def _ssim(p, g, eps):
    n = p.size
    x = p.mean()
    y = g.mean()
    sig_x = ((p - x) ** 2).sum() / (n - 1 + eps)
    sig_y = ((g - y) ** 2).sum() / (n - 1 + eps)
    sig_xy = ((p - x) * (g - y)).sum() / (n - 1 + eps)
    num = 4 * x * y * sig_xy
    den = (x * x + y * y) * (sig_x + sig_y)
    if num != 0:
        return num / (den + eps)
    return 1.0 if den == 0 else 0.0


def e_measure_mean(pred, gt, cfg: MetricConfig = DEFAULT_CONFIG):
    """Mean over all 256 thresholds of the enhanced-alignment score.

    Per threshold both maps are de-meaned, the alignment ratio maps to
    [0,1] via ((align+1)^2)/4, and the score is the plain pixel mean.
    All-background ground truth scores 1 - binarized prediction;
    all-foreground scores the binarized prediction itself.
    """
    p, g = _check_pair(pred, gt)
    q = quantize8(p)
    gf = g.astype(np.float64)
    n = gf.size
    nfg = gf.sum()
    eps = cfg.eps
    scores = np.empty(256)
    for t in range(256):
        binary = (q >= t).astype(np.float64)
        if nfg == 0:
            enhanced = 1.0 - binary
        elif nfg == n:
            enhanced = binary
        else:
            fm = binary - binary.mean()
            gm = gf - gf.mean()
            align = 2.0 * gm * fm / (gm * gm + fm * fm + eps)
            enhanced = (align + 1.0) ** 2 / 4.0
        scores[t] = enhanced.sum() / n
    return float(scores.mean())


@dataclass
class MetricReport:
    """Dataset-level scalar metrics, each in [0, 1]; wf_degenerate counts
    images whose weighted F was skipped as empty-GT."""

    mae: float
    max_f: float
    weighted_f: float
    s_measure: float
    e_measure_mean: float
    images: int = 1
    wf_degenerate: int = 0

    def rows(self):
        return [("mae", self.mae), ("maxF", self.max_f),
                ("weightedF", self.weighted_f), ("sMeasure", self.s_measure),
                ("eMeasureMean", self.e_measure_mean)]


def evaluate_dataset(pairs, cfg: MetricConfig = DEFAULT_CONFIG):
    """Average every metric over (pred, gt) pairs.

    Curves average elementwise across images and max F is taken on the
    averaged F curve; scalar metrics average directly.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("dataset must contain at least one pair")
    curves, maes, wfs, sms, ems = [], [], [], [], []
    degenerate = 0
    for pred, gt in pairs:
        curves.append(pr_and_f_curves(pred, gt, cfg))
        maes.append(mae(pred, gt))
        wf, deg = weighted_f(pred, gt, cfg)
        wfs.append(wf)
        degenerate += int(deg)
        sms.append(s_measure(pred, gt, cfg))
        ems.append(e_measure_mean(pred, gt, cfg))
    curve = CurveData.mean(curves)
    report = MetricReport(
        mae=float(np.mean(maes)),
        max_f=max_f(curve),
        weighted_f=float(np.mean(wfs)),
        s_measure=float(np.mean(sms)),
        e_measure_mean=float(np.mean(ems)),
        images=len(pairs),
        wf_degenerate=degenerate,
    )
    return report, curve
