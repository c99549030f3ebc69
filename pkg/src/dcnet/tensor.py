"""Dense NCHW tensors and the forward numeric kernels.

Tensors are plain ``numpy.ndarray`` in row-major (n, c, h, w) layout,
float32 by default.  Convolution is realized as unfold -> matrix multiply
-> fold so that parallel branches can later be collapsed into one batched
GEMM.  Every GEMM and unfold call bumps a module-level counter, which the
merged-execution benchmarks read.

All kernels are pure: inputs are never mutated, so tensors can be shared
read-only across threads.  Float64 accumulation is used inside the GEMM
core; everything else stays in the input dtype (float32 in production).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float32


def _pair(v):
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise ValueError(f"expected a pair, got {v!r}")
        return (int(v[0]), int(v[1]))
    return (int(v), int(v))


@dataclass(frozen=True)
class ConvSpec:
    """Convolution geometry: channels, kernel, stride, padding, dilation, groups."""

    in_channels: int
    out_channels: int
    kernel: tuple = (3, 3)
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)
    dilation: tuple = (1, 1)
    groups: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kernel", _pair(self.kernel))
        object.__setattr__(self, "stride", _pair(self.stride))
        object.__setattr__(self, "padding", _pair(self.padding))
        object.__setattr__(self, "dilation", _pair(self.dilation))
        if self.in_channels <= 0 or self.out_channels <= 0:
            raise ValueError("channel counts must be positive")
        if self.groups <= 0:
            raise ValueError("groups must be positive")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"channels ({self.in_channels}, {self.out_channels}) must be "
                f"divisible by groups={self.groups}"
            )
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.dilation) < 1:
            raise ValueError("kernel, stride and dilation must be >= 1")
        if min(self.padding) < 0:
            raise ValueError("padding must be >= 0")

    def out_size(self, h, w):
        kh, kw = self.kernel
        sh, sw = self.stride
        ph, pw = self.padding
        dh, dw = self.dilation
        ho = (h + 2 * ph - dh * (kh - 1) - 1) // sh + 1
        wo = (w + 2 * pw - dw * (kw - 1) - 1) // sw + 1
        if ho < 1 or wo < 1:
            raise ValueError(f"output size {ho}x{wo} for input {h}x{w} under {self}")
        return ho, wo

    @property
    def geometry(self):
        """Patch-extraction key: branches with equal geometry share one unfold."""
        return (self.kernel, self.stride, self.padding, self.dilation)

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels // self.groups, *self.kernel)

    @property
    def patch_rows(self):
        return self.in_channels * self.kernel[0] * self.kernel[1]


@dataclass
class OpCounters:
    """Monotone per-process counters of GEMM and unfold invocations."""

    gemm: int = 0
    unfold: int = 0

    def snapshot(self):
        return OpCounters(self.gemm, self.unfold)

    def delta(self, earlier):
        return OpCounters(self.gemm - earlier.gemm, self.unfold - earlier.unfold)


_COUNTERS = OpCounters()


def counters():
    return _COUNTERS


def reset_counters():
    _COUNTERS.gemm = 0
    _COUNTERS.unfold = 0


def gemm(a, b):
    """Matrix product with float64 accumulation; counts as one GEMM invocation.

    Accepts stacked operands with any leading batch dimensions (numpy
    matmul broadcasting); a whole stack is still a single invocation.
    """
    out_dtype = np.result_type(a.dtype, b.dtype)
    _COUNTERS.gemm += 1
    return np.matmul(a.astype(np.float64), b.astype(np.float64)).astype(out_dtype)


def matmul(a, b):
    """Plain 2-D matrix product c = a @ b."""
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    return gemm(a, b)


def batched_matmul(a, b):
    """Independent per-batch products c[i] = a[i] @ b[i]; one GEMM invocation."""
    if a.ndim != 3 or b.ndim != 3:
        raise ValueError(f"batched_matmul expects 3-D operands, got {a.shape}, {b.shape}")
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"batch counts disagree: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[2] != b.shape[1]:
        raise ValueError(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    return gemm(a, b)


def _check_nchw(x, name="input"):
    if x.ndim != 4:
        raise ValueError(f"{name} must be rank-4 (n, c, h, w), got shape {x.shape}")


def unfold(x, spec: ConvSpec):
    """Extract receptive patches into a (n, c*kh*kw, Ho*Wo) matrix.

    Column j holds the zero-padded receptive patch of output location j.
    """
    _check_nchw(x)
    n, c, h, w = x.shape
    if c != spec.in_channels:
        raise ValueError(f"input has {c} channels, spec expects {spec.in_channels}")
    kh, kw = spec.kernel
    sh, sw = spec.stride
    ph, pw = spec.padding
    dh, dw = spec.dilation
    ho, wo = spec.out_size(h, w)
    _COUNTERS.unfold += 1

    if ph or pw:
        xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), x.dtype)
        xp[:, :, ph:ph + h, pw:pw + w] = x
    else:
        xp = x
    patches = np.empty((n, c, kh, kw, ho, wo), x.dtype)
    for i in range(kh):
        for j in range(kw):
            patches[:, :, i, j] = xp[:, :, i * dh:i * dh + sh * ho:sh,
                                     j * dw:j * dw + sw * wo:sw]
    return patches.reshape(n, c * kh * kw, ho * wo)


def fold(cols, spec: ConvSpec, size):
    """Adjoint of unfold: scatter-add patch columns back onto an (h, w) canvas."""
    h, w = size
    n = cols.shape[0]
    c = spec.in_channels
    kh, kw = spec.kernel
    sh, sw = spec.stride
    ph, pw = spec.padding
    dh, dw = spec.dilation
    ho, wo = spec.out_size(h, w)
    if cols.shape != (n, c * kh * kw, ho * wo):
        raise ValueError(f"patch matrix shape {cols.shape} does not match spec/size")
    patches = cols.reshape(n, c, kh, kw, ho, wo)
    xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i * dh:i * dh + sh * ho:sh,
               j * dw:j * dw + sw * wo:sw] += patches[:, :, i, j]
    return np.ascontiguousarray(xp[:, :, ph:ph + h, pw:pw + w])


def conv2d(x, weight, bias, spec: ConvSpec):
    """2-D convolution as unfold -> GEMM -> fold-shaped reshape."""
    _check_nchw(x)
    if weight.shape != spec.weight_shape:
        raise ValueError(f"weight shape {weight.shape} != expected {spec.weight_shape}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ValueError(f"bias shape {bias.shape} != ({spec.out_channels},)")
    n, _, h, w = x.shape
    ho, wo = spec.out_size(h, w)
    cols = unfold(x, spec)
    y = _gemm_conv(cols, weight, spec, n, ho, wo)
    if bias is not None:
        y = y + bias.reshape(1, -1, 1, 1)
    return y


def _gemm_conv(cols, weight, spec, n, ho, wo):
    """Apply conv weights to an unfolded patch matrix with one GEMM call."""
    out = spec.out_channels
    g = spec.groups
    if g == 1:
        y = gemm(weight.reshape(out, -1), cols)            # (n, out, L)
    else:
        rows_g = cols.shape[1] // g
        cg = cols.reshape(n, g, rows_g, ho * wo)
        wg = weight.reshape(g, out // g, rows_g)
        y = gemm(wg[None], cg).reshape(n, out, ho * wo)
    return y.reshape(n, out, ho, wo)


def bilinear_weights(in_size, out_size):
    """Index/weight vectors for align-corners=false bilinear sampling of one axis."""
    if out_size < 1:
        raise ValueError("target size must be >= 1")
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5
    i0f = np.floor(src)
    t = src - i0f
    i0 = np.clip(i0f, 0, in_size - 1).astype(np.intp)
    i1 = np.clip(i0f + 1, 0, in_size - 1).astype(np.intp)
    return i0, i1, t


def bilinear_resize(x, out_h, out_w):
    """Bilinear interpolation (align-corners=false); exact for same-size calls."""
    _check_nchw(x)
    n, c, h, w = x.shape
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be >= 1, got {out_h}x{out_w}")
    ih0, ih1, th = bilinear_weights(h, out_h)
    iw0, iw1, tw = bilinear_weights(w, out_w)
    th = th.astype(x.dtype).reshape(1, 1, out_h, 1)
    tw = tw.astype(x.dtype).reshape(1, 1, 1, out_w)
    rows = x[:, :, ih0, :] * (1 - th) + x[:, :, ih1, :] * th
    return rows[:, :, :, iw0] * (1 - tw) + rows[:, :, :, iw1] * tw


def bilinear_resize_adjoint(dy, in_h, in_w):
    """Transpose of bilinear_resize: distribute dy by the interpolation weights."""
    n, c, out_h, out_w = dy.shape
    ih0, ih1, th = bilinear_weights(in_h, out_h)
    iw0, iw1, tw = bilinear_weights(in_w, out_w)
    th = th.astype(dy.dtype).reshape(1, 1, out_h, 1)
    tw = tw.astype(dy.dtype).reshape(1, 1, 1, out_w)
    cols = np.zeros((n, c, out_h, in_w), dy.dtype)
    np.add.at(cols, (slice(None), slice(None), slice(None), iw0), dy * (1 - tw))
    np.add.at(cols, (slice(None), slice(None), slice(None), iw1), dy * tw)
    dx = np.zeros((n, c, in_h, in_w), dy.dtype)
    np.add.at(dx, (slice(None), slice(None), ih0), cols * (1 - th))
    np.add.at(dx, (slice(None), slice(None), ih1), cols * th)
    return dx


def pool_windows(x, kernel, stride):
    """Stack pooling windows as (kh*kw, n, c, Ho, Wo), taps in row-major order."""
    _check_nchw(x)
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride)
    n, c, h, w = x.shape
    if h < kh or w < kw:
        raise ValueError(f"pool kernel {kh}x{kw} larger than input {h}x{w}")
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    taps = np.empty((kh * kw, n, c, ho, wo), x.dtype)
    for i in range(kh):
        for j in range(kw):
            taps[i * kw + j] = x[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw]
    return taps


def maxpool2d(x, kernel=2, stride=2):
    return pool_windows(x, kernel, stride).max(axis=0)


def avgpool2d(x, kernel, stride):
    return pool_windows(x, kernel, stride).mean(axis=0)


def relu(x):
    return np.maximum(x, 0)


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def add(a, b):
    if a.shape != b.shape:
        raise ValueError(f"add requires equal shapes, got {a.shape} and {b.shape}")
    return a + b


def scale(a, c):
    return a * a.dtype.type(c)


def concat_channels(tensors):
    """Channel concatenation in argument order; n, h, w must agree."""
    if not tensors:
        raise ValueError("concat of zero tensors")
    ref = tensors[0]
    for t in tensors[1:]:
        if t.shape[0] != ref.shape[0] or t.shape[2:] != ref.shape[2:]:
            raise ValueError(f"concat shape mismatch: {t.shape} vs {ref.shape}")
    return np.concatenate(tensors, axis=1)


def batchnorm(x, gamma, beta, running_mean, running_var, eps=1e-5,
              training=False, momentum=0.1):
    """Channel-wise batch normalization.

    Returns (y, running_mean, running_var).  Train mode normalizes by the
    biased batch statistics and returns running stats updated with the
    unbiased variance (momentum 0.1); eval mode uses the running stats
    unchanged.  Inputs are never mutated.
    """
    _check_nchw(x)
    c = x.shape[1]
    for name, v in (("gamma", gamma), ("beta", beta),
                    ("running_mean", running_mean), ("running_var", running_var)):
        if v.shape != (c,):
            raise ValueError(f"{name} shape {v.shape} != ({c},)")
    if eps <= 0:
        raise ValueError("eps must be > 0")
    if training:
        m = x.mean(axis=(0, 2, 3))
        v = x.var(axis=(0, 2, 3))
        cnt = x.shape[0] * x.shape[2] * x.shape[3]
        v_unbiased = v * (cnt / max(cnt - 1, 1))
        new_mean = (1 - momentum) * running_mean + momentum * m
        new_var = (1 - momentum) * running_var + momentum * v_unbiased
    else:
        m, v = running_mean, running_var
        new_mean, new_var = running_mean, running_var
    inv = 1.0 / np.sqrt(v.astype(x.dtype) + x.dtype.type(eps))
    y = (x - m.astype(x.dtype).reshape(1, c, 1, 1)) \
        * (gamma.astype(x.dtype) * inv).reshape(1, c, 1, 1) \
        + beta.astype(x.dtype).reshape(1, c, 1, 1)
    return y, new_mean.astype(DTYPE), new_var.astype(DTYPE)
