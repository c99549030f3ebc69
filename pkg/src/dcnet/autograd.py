"""Tape-based reverse-mode differentiation over the dense kernels.

A ``Tape`` records every op output in execution order while active; its
``backward`` walks the records in reverse and accumulates gradients into
any ``Var`` created with ``requires_grad=True``.  Ops called with no tape
active run forward-only, so evaluation costs nothing extra.

``grad_check`` validates any scalar-valued composition against central
finite differences evaluated in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor
from .tensor import ConvSpec


class TrainingDiverged(RuntimeError):
    """Raised when a parameter or gradient stops being finite."""


class Var:
    """A tensor node: value, accumulated gradient, and the closure that
    pushes incoming gradient to its parents."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=""):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Var{tag}(shape={self.data.shape}, grad={self.grad is not None})"


class Parameter(Var):
    """Trainable leaf with a persistent momentum buffer."""

    __slots__ = ("velocity",)

    def __init__(self, data, name=""):
        super().__init__(np.asarray(data, tensor.DTYPE), requires_grad=True, name=name)
        self.velocity = np.zeros_like(self.data)


_TAPES = []


class Tape:
    """Records op outputs while active (innermost tape wins)."""

    def __init__(self):
        self.records = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def backward(self, root, seed=None):
        """Accumulate d(root)/d(leaf) into every requires_grad leaf.

        Intermediate grads are freed afterwards; leaf grads add onto
        whatever was already there.
        """
        if seed is None:
            seed = np.ones_like(root.data)
        _accum(root, np.asarray(seed, root.data.dtype))
        for v in reversed(self.records):
            if v.grad is None or v._backward is None:
                continue
            v._backward(v.grad)
        for v in self.records:
            v.grad = None
            v._backward = None
            v._parents = ()
        self.records.clear()


def _accum(v, g):
    if v.grad is None:
        v.grad = g.copy() if g.base is not None or not g.flags.owndata else g
    else:
        v.grad = v.grad + g


def _op(data, parents, backward):
    out = Var(data)
    if _TAPES and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        _TAPES[-1].records.append(out)
    return out


# ---------------------------------------------------------------- basic ops

def relu(x):
    y = tensor.relu(x.data)

    def bwd(g):
        _accum(x, g * (x.data > 0))

    return _op(y, (x,), bwd)


def sigmoid(x):
    y = tensor.sigmoid(x.data)

    def bwd(g):
        _accum(x, g * y * (1 - y))

    return _op(y, (x,), bwd)


def add(a, b):
    y = tensor.add(a.data, b.data)

    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    return _op(y, (a, b), bwd)


def sub(a, b):
    if a.data.shape != b.data.shape:
        raise ValueError(f"sub requires equal shapes, got {a.shape} and {b.shape}")
    y = a.data - b.data

    def bwd(g):
        _accum(a, g)
        _accum(b, -g)

    return _op(y, (a, b), bwd)


def affine(x, scale_c, shift_c):
    """y = scale_c * x + shift_c with constant scalars."""
    dt = x.data.dtype.type
    y = dt(scale_c) * x.data + dt(shift_c)

    def bwd(g):
        _accum(x, g * dt(scale_c))

    return _op(y, (x,), bwd)


def scale(x, c):
    return affine(x, c, 0.0)


def mul_const(x, arr):
    """Elementwise product with a constant array (same shape or broadcastable)."""
    arr = np.asarray(arr, x.data.dtype)
    y = x.data * arr

    def bwd(g):
        gx = g * arr
        if gx.shape != x.data.shape:
            raise ValueError("mul_const constant must not broadcast the input up")
        _accum(x, gx)

    return _op(y, (x,), bwd)


def clamp(x, lo, hi):
    if not lo < hi:
        raise ValueError(f"clamp needs lo < hi, got [{lo}, {hi}]")
    y = np.clip(x.data, lo, hi)

    def bwd(g):
        _accum(x, g * ((x.data >= lo) & (x.data <= hi)))

    return _op(y, (x,), bwd)


def log(x):
    y = np.log(x.data)

    def bwd(g):
        _accum(x, g / x.data)

    return _op(y, (x,), bwd)


def div(a, b):
    """Elementwise a / b; b must match a's shape or be a scalar."""
    if b.data.shape not in ((), a.data.shape):
        raise ValueError(f"div shapes {a.shape} / {b.shape} unsupported")
    y = a.data / b.data

    def bwd(g):
        _accum(a, g / b.data)
        gb = -g * a.data / (b.data * b.data)
        if b.data.shape == () and gb.shape != ():
            gb = np.asarray(gb.sum(), b.data.dtype)
        _accum(b, gb)

    return _op(y, (a, b), bwd)


def sum_all(x):
    y = np.asarray(x.data.sum(), x.data.dtype)

    def bwd(g):
        _accum(x, np.broadcast_to(np.asarray(g), x.data.shape))

    return _op(y, (x,), bwd)


def mean_all(x):
    return scale(sum_all(x), 1.0 / x.data.size)


def matmul(a, b):
    y = tensor.matmul(a.data, b.data)

    def bwd(g):
        _accum(a, tensor.matmul(g, b.data.T))
        _accum(b, tensor.matmul(a.data.T, g))

    return _op(y, (a, b), bwd)


def concat(vars_):
    """Channel concatenation; gradient splits back by channel extent."""
    y = tensor.concat_channels([v.data for v in vars_])
    sizes = [v.data.shape[1] for v in vars_]

    def bwd(g):
        off = 0
        for v, c in zip(vars_, sizes):
            _accum(v, g[:, off:off + c])
            off += c

    return _op(y, tuple(vars_), bwd)


# ----------------------------------------------------------- structured ops

def conv2d(x, weight, bias, spec: ConvSpec):
    """Convolution; gradients flow to input, weight and bias."""
    n, _, h, w = x.data.shape
    ho, wo = spec.out_size(h, w)
    cols = tensor.unfold(x.data, spec)
    y = tensor._gemm_conv(cols, weight.data, spec, n, ho, wo)
    if bias is not None:
        y = y + bias.data.reshape(1, -1, 1, 1)
    g_cnt = spec.groups
    out_c = spec.out_channels

    def bwd(g):
        gm = g.reshape(n, out_c, ho * wo)
        if g_cnt == 1:
            w_mat = weight.data.reshape(out_c, -1)
            dcols = tensor.gemm(w_mat.T[None], gm)
            dw = tensor.gemm(gm, cols.transpose(0, 2, 1)).sum(axis=0)
        else:
            rows_g = cols.shape[1] // g_cnt
            gg = gm.reshape(n, g_cnt, out_c // g_cnt, ho * wo)
            wg = weight.data.reshape(g_cnt, out_c // g_cnt, rows_g)
            dcols = tensor.gemm(wg.transpose(0, 2, 1)[None], gg).reshape(n, -1, ho * wo)
            cg = cols.reshape(n, g_cnt, rows_g, ho * wo)
            dw = tensor.gemm(gg, cg.transpose(0, 1, 3, 2)).sum(axis=0)
        _accum(x, tensor.fold(dcols.reshape(n, -1, ho * wo), spec, (h, w)))
        _accum(weight, dw.reshape(weight.data.shape).astype(weight.data.dtype))
        if bias is not None:
            _accum(bias, g.sum(axis=(0, 2, 3)).astype(bias.data.dtype))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _op(y, parents, bwd)


def batchnorm(x, gamma, beta, state, training):
    """Batch normalization against ``state`` (an object carrying
    running_mean / running_var / eps / momentum buffers).

    Train mode normalizes by batch statistics and updates the running
    buffers in place; eval mode reads them.
    """
    xd = x.data
    c = xd.shape[1]
    dt = xd.dtype
    if training:
        m = xd.mean(axis=(0, 2, 3))
        v = xd.var(axis=(0, 2, 3))
        cnt = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mom = state.momentum
        state.running_mean = ((1 - mom) * state.running_mean
                              + mom * m).astype(state.running_mean.dtype)
        state.running_var = ((1 - mom) * state.running_var
                             + mom * v * (cnt / max(cnt - 1, 1))
                             ).astype(state.running_var.dtype)
    else:
        m = state.running_mean.astype(dt)
        v = state.running_var.astype(dt)
    inv = 1.0 / np.sqrt(v.astype(dt) + dt.type(state.eps))
    x_hat = (xd - m.astype(dt).reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    y = gamma.data.reshape(1, c, 1, 1) * x_hat + beta.data.reshape(1, c, 1, 1)

    def bwd(g):
        dgamma = (g * x_hat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        gi = (gamma.data * inv).reshape(1, c, 1, 1)
        if training:
            n_el = g.shape[0] * g.shape[2] * g.shape[3]
            dx = gi / n_el * (n_el * g
                              - dbeta.reshape(1, c, 1, 1)
                              - x_hat * dgamma.reshape(1, c, 1, 1))
        else:
            dx = gi * g
        _accum(x, dx.astype(dt))
        _accum(gamma, dgamma.astype(gamma.data.dtype))
        _accum(beta, dbeta.astype(beta.data.dtype))

    return _op(y, (x, gamma, beta), bwd)


def maxpool2d(x, kernel=2, stride=2):
    taps = tensor.pool_windows(x.data, kernel, stride)
    arg = taps.argmax(axis=0)          # first max in row-major tap order
    y = np.take_along_axis(taps, arg[None], axis=0)[0]
    kh, kw = tensor._pair(kernel)
    sh, sw = tensor._pair(stride)
    ho, wo = y.shape[2], y.shape[3]

    def bwd(g):
        dx = np.zeros_like(x.data)
        for i in range(kh):
            for j in range(kw):
                dx[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += \
                    g * (arg == i * kw + j)
        _accum(x, dx)

    return _op(y, (x,), bwd)


def avgpool2d(x, kernel, stride):
    y = tensor.avgpool2d(x.data, kernel, stride)
    kh, kw = tensor._pair(kernel)
    sh, sw = tensor._pair(stride)
    ho, wo = y.shape[2], y.shape[3]
    inv = 1.0 / (kh * kw)

    def bwd(g):
        gs = g * x.data.dtype.type(inv)
        dx = np.zeros_like(x.data)
        for i in range(kh):
            for j in range(kw):
                dx[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += gs
        _accum(x, dx)

    return _op(y, (x,), bwd)


def upsample_bilinear(x, out_h, out_w):
    y = tensor.bilinear_resize(x.data, out_h, out_w)
    in_h, in_w = x.data.shape[2], x.data.shape[3]

    def bwd(g):
        _accum(x, tensor.bilinear_resize_adjoint(g, in_h, in_w))

    return _op(y, (x,), bwd)


# -------------------------------------------------------------- optimization

@dataclass
class OptimizerConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


def sgd_step(params, cfg: OptimizerConfig):
    """One SGD-with-momentum update; zeroes gradients afterwards.

    v <- momentum * v + grad + weight_decay * w ;  w <- w - lr * v
    """
    for p in params:
        if p.grad is None:
            continue
        g = p.grad.astype(p.data.dtype)
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient in {p.name or 'parameter'}")
        p.velocity = (cfg.momentum * p.velocity + g
                      + cfg.weight_decay * p.data).astype(p.data.dtype)
        p.data = p.data - cfg.lr * p.velocity
        if not np.all(np.isfinite(p.data)):
            raise TrainingDiverged(f"non-finite value in {p.name or 'parameter'}")
        p.grad = None


# --------------------------------------------------------------- grad check

@dataclass
class GradCheckResult:
    name: str
    rel_err: float
    ok: bool

    def __str__(self):
        mark = "ok" if self.ok else "FAIL"
        return f"{self.name}: rel_err={self.rel_err:.3e} [{mark}]"


def grad_check(fn, inputs, names=None, h=1e-3, tol=1e-3):
    """Compare tape gradients of scalar ``fn(*vars)`` against central
    finite differences.

    Inputs may be plain arrays (wrapped into requires_grad Vars) or
    existing Vars, e.g. module Parameters, which are perturbed in place
    so composite modules can be checked against their own weights.  All
    values are promoted to float64 so the difference quotient is not
    drowned by storage rounding.  The error metric per input is
    max|a - n| / max(max|a|, max|n|, tiny); a non-finite value anywhere
    fails the input rather than raising.
    """
    if names is None:
        names = [f"input{i}" for i in range(len(inputs))]
    vars_ = []
    for a, nm in zip(inputs, names):
        if isinstance(a, Var):
            a.data = np.asarray(a.data, np.float64)
            a.requires_grad = True
            a.grad = None
            vars_.append(a)
        else:
            vars_.append(Var(np.asarray(a, np.float64), requires_grad=True, name=nm))
    with Tape() as t:
        out = fn(*vars_)
        if out.data.shape != ():
            raise ValueError(f"grad_check target must be scalar, got {out.data.shape}")
        t.backward(out)
    analytic_grads = [np.zeros_like(v.data) if v.grad is None
                      else np.asarray(v.grad, np.float64) for v in vars_]

    results = []
    for v, analytic, nm in zip(vars_, analytic_grads, names):
        numeric = np.zeros_like(v.data)
        flat = v.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            hi = float(fn(*vars_).data)
            flat[idx] = orig - h
            lo = float(fn(*vars_).data)
            flat[idx] = orig
            nflat[idx] = (hi - lo) / (2 * h)
        denom = max(np.abs(analytic).max(initial=0.0),
                    np.abs(numeric).max(initial=0.0), 1e-8)
        if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
            results.append(GradCheckResult(nm, float("inf"), False))
            continue
        rel = float(np.abs(analytic - numeric).max(initial=0.0) / denom)
        results.append(GradCheckResult(nm, rel, rel <= tol))
    return results
