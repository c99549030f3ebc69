"""Structural reparameterization for inference.

Two transformations, both offline and weight-preserving:

* Merged convolution: K parallel convolutions with equal kernel shape,
  weight-matrix shape and output size execute as one batched GEMM over
  their unfolded inputs.  Branches sharing an input and patch geometry
  also share the unfold.
* Encoder merge: the two trained encoders collapse into one whose stage
  outputs are the channel concat of the originals; the first conv
  concatenates output channels, every deeper conv becomes a groups=2
  block-diagonal conv, and BN parameters concatenate channelwise.

BN stays a separate eval-mode step (never folded into conv weights), so
merged and unmerged graphs stay numerically comparable layer by layer.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor
from .autograd import Var
from .blocks import BatchNorm2d, ConvBNReLU, ResASPP2
from .network import DCNet, ForwardOutputs
from .tensor import ConvSpec


class MergeError(ValueError):
    """A merge precondition does not hold."""


@dataclass
class BNParams:
    """Eval-mode batchnorm parameter snapshot."""

    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float

    @staticmethod
    def from_module(bn: BatchNorm2d):
        return BNParams(bn.gamma.data.copy(), bn.beta.data.copy(),
                        bn.running_mean.copy(), bn.running_var.copy(), bn.eps)

    @staticmethod
    def concat(a, b):
        if a.eps != b.eps:
            raise MergeError("cannot concat batchnorms with different eps")
        return BNParams(*(np.concatenate([x, y]) for x, y in
                          zip((a.gamma, a.beta, a.mean, a.var),
                              (b.gamma, b.beta, b.mean, b.var))), a.eps)

    def apply(self, y):
        out, _, _ = tensor.batchnorm(y, self.gamma, self.beta, self.mean,
                                     self.var, self.eps, training=False)
        return out


class MergedConvPlan:
    """K parallel convolutions prepared for single-GEMM execution.

    Branch weights are stacked into one (K, out, rows) block; bindings
    name which input each branch reads at execute time.
    """

    def __init__(self, specs, weight_stack, bias_stack, bindings):
        self.specs = tuple(specs)
        self.weight_stack = weight_stack
        self.bias_stack = bias_stack
        self.bindings = tuple(bindings)

    @property
    def k(self):
        return len(self.specs)

    @staticmethod
    def from_branches(branches, bindings=None):
        """Validate the merge precondition and stack the weights.

        branches: sequence of (ConvSpec, weight, bias-or-None).
        bindings: per-branch input keys; default shares one input.
        """
        branches = list(branches)
        if not branches:
            raise MergeError("cannot merge zero branches")
        if any(isinstance(b, MergedConvPlan) for b in branches):
            raise MergeError("branch is already a merged plan; merging twice "
                             "is not allowed")
        if bindings is None:
            bindings = [0] * len(branches)
        if len(bindings) != len(branches):
            raise MergeError("one binding required per branch")
        ref_spec = branches[0][0]
        weights, biases = [], []
        for i, (spec, w, b) in enumerate(branches):
            if spec.kernel != ref_spec.kernel:
                raise MergeError(
                    f"branch {i}: kernel {spec.kernel} != {ref_spec.kernel}")
            if spec.out_channels != ref_spec.out_channels:
                raise MergeError(
                    f"branch {i}: out_channels {spec.out_channels} != "
                    f"{ref_spec.out_channels}")
            if spec.groups != ref_spec.groups:
                raise MergeError(f"branch {i}: groups {spec.groups} != "
                                 f"{ref_spec.groups}")
            if spec.patch_rows != ref_spec.patch_rows:
                raise MergeError(
                    f"branch {i}: patch rows {spec.patch_rows} != "
                    f"{ref_spec.patch_rows}")
            w = np.asarray(w)
            if w.shape != spec.weight_shape:
                raise MergeError(
                    f"branch {i}: weight shape {w.shape} != {spec.weight_shape}")
            weights.append(w.reshape(spec.out_channels, -1))
            if b is None:
                biases.append(np.zeros(spec.out_channels, w.dtype))
            else:
                b = np.asarray(b)
                if b.shape != (spec.out_channels,):
                    raise MergeError(f"branch {i}: bias shape {b.shape}")
                biases.append(b)
        return MergedConvPlan([s for s, _, _ in branches],
                              np.stack(weights), np.stack(biases), bindings)

    def execute(self, inputs):
        """Run all K branches with one batched GEMM; returns K outputs in
        branch order.

        inputs: array (single shared input) or mapping binding -> array.
        Unfolds are cached per distinct (binding, patch geometry).
        """
        if not isinstance(inputs, dict):
            inputs = {b: inputs for b in set(self.bindings)}
        out_sizes = []
        shapes = set()
        for i, (spec, bind) in enumerate(zip(self.specs, self.bindings)):
            if bind not in inputs:
                raise ValueError(f"branch {i}: no input bound to {bind!r}")
            x = inputs[bind]
            if x.ndim != 4 or x.shape[1] != spec.in_channels:
                raise ValueError(
                    f"branch {i}: input shape {x.shape} does not match "
                    f"{spec.in_channels} channels")
            out_sizes.append(spec.out_size(x.shape[2], x.shape[3]))
            shapes.add((x.shape[0],) + out_sizes[-1])
        if len(shapes) != 1:
            raise ValueError(f"branch output sizes disagree: {sorted(shapes)}")
        (n, ho, wo), = shapes

        cache = {}
        cols = []
        for spec, bind in zip(self.specs, self.bindings):
            key = (bind, spec.geometry)
            if key not in cache:
                cache[key] = tensor.unfold(inputs[bind], spec)
            cols.append(cache[key])
        stack = np.stack(cols)                                    # (K, n, rows, L)
        y = tensor.gemm(self.weight_stack[:, None], stack)        # (K, n, out, L)
        y = y + self.bias_stack[:, None, :, None]
        out_c = self.specs[0].out_channels
        return [y[i].reshape(n, out_c, ho, wo).astype(stack.dtype)
                for i in range(self.k)]


@dataclass
class ConvBNEval:
    """Plain-array conv + frozen BN + optional ReLU (inference layer)."""

    spec: ConvSpec
    weight: np.ndarray
    bias: np.ndarray
    bn: BNParams
    act: bool

    @staticmethod
    def from_module(m: ConvBNReLU):
        return ConvBNEval(m.conv.spec, m.conv.weight.data.copy(), None,
                          BNParams.from_module(m.bn), m.act)

    def forward(self, x):
        y = tensor.conv2d(x, self.weight, self.bias, self.spec)
        if self.bn is not None:
            y = self.bn.apply(y)
        return tensor.relu(y) if self.act else y


def _merged_spec(s: ConvSpec, grouped):
    """Spec of two stacked copies of s: concat outputs, and for deeper
    layers (distinct inputs) concat inputs block-diagonally via groups."""
    return ConvSpec(
        in_channels=2 * s.in_channels if grouped else s.in_channels,
        out_channels=2 * s.out_channels,
        kernel=s.kernel, stride=s.stride, padding=s.padding,
        dilation=s.dilation,
        groups=2 * s.groups if grouped else s.groups)


def _merge_cbr(m1: ConvBNReLU, m2: ConvBNReLU, grouped) -> ConvBNEval:
    s1, s2 = m1.conv.spec, m2.conv.spec
    if s1 != s2:
        raise MergeError(f"conv specs differ: {s1} vs {s2}")
    if m1.act != m2.act:
        raise MergeError("activation flags differ")
    w = np.concatenate([m1.conv.weight.data, m2.conv.weight.data], axis=0)
    bn = BNParams.concat(BNParams.from_module(m1.bn), BNParams.from_module(m2.bn))
    return ConvBNEval(_merged_spec(s1, grouped), w.copy(), None, bn, m1.act)


@dataclass
class MergedBasicBlock:
    conv1: ConvBNEval
    conv2: ConvBNEval
    skip: ConvBNEval

    def forward(self, x):
        y = self.conv2.forward(self.conv1.forward(x))
        s = x if self.skip is None else self.skip.forward(x)
        return tensor.relu(y + s)


@dataclass
class MergedEncoder:
    """Single encoder equivalent to two stacked ones; stage-N output
    channels [0, w) replicate encoder 1 and [w, 2w) encoder 2."""

    input_conv: ConvBNEval
    stages: list
    widths: tuple

    def forward(self, x):
        y = self.input_conv.forward(x)
        outs = []
        for stage in self.stages:
            y = stage.forward(y)
            outs.append(y)
        return outs

    def split_halves(self, stage_out, stage_idx):
        w = self.widths[stage_idx]
        return stage_out[:, :w], stage_out[:, w:]


def merge_dual_encoder(net: DCNet) -> MergedEncoder:
    """Collapse net.encoder1/net.encoder2 into one MergedEncoder.

    First conv: output-channel concat (both read the image).  Stage
    convs: groups=2 block-diagonal stacking.  BN: channel concat.
    """
    e1, e2 = net.encoder1, net.encoder2
    if len(e1.stages) != len(e2.stages):
        raise MergeError("encoders have different stage counts")
    input_conv = _merge_cbr(e1.input_conv, e2.input_conv, grouped=False)
    stages = []
    for i, (b1, b2) in enumerate(zip(e1.stages, e2.stages)):
        if (b1.skip is None) != (b2.skip is None):
            raise MergeError(f"stage {i}: skip structure differs")
        stages.append(MergedBasicBlock(
            conv1=_merge_cbr(b1.conv1, b2.conv1, grouped=True),
            conv2=_merge_cbr(b1.conv2, b2.conv2, grouped=True),
            skip=None if b1.skip is None
            else _merge_cbr(b1.skip, b2.skip, grouped=True)))
    return MergedEncoder(input_conv, stages, net.cfg.widths)


@dataclass
class MergedResASPP2:
    """Inference form of the multi-scale block: the two dilated banks run
    as one batched GEMM each (4 GEMMs per block instead of 22)."""

    input_conv: ConvBNEval
    l1_plan: MergedConvPlan
    l1_bns: list
    l2_plan: MergedConvPlan
    l2_bns: list
    fuse: ConvBNEval

    @staticmethod
    def from_block(block: ResASPP2):
        l1_branches = [(m.conv.spec, m.conv.weight.data, None)
                       for m in block.level1]
        l2_branches, l2_bindings, l2_bns = [], [], []
        for i, second in enumerate(block.level2):
            for m in second:
                l2_branches.append((m.conv.spec, m.conv.weight.data, None))
                l2_bindings.append(i)
                l2_bns.append(BNParams.from_module(m.bn))
        return MergedResASPP2(
            input_conv=ConvBNEval.from_module(block.input_conv),
            l1_plan=MergedConvPlan.from_branches(l1_branches),
            l1_bns=[BNParams.from_module(m.bn) for m in block.level1],
            l2_plan=MergedConvPlan.from_branches(l2_branches, l2_bindings),
            l2_bns=l2_bns,
            fuse=ConvBNEval.from_module(block.fuse))

    def forward(self, x):
        f = self.input_conv.forward(x)
        l1 = [tensor.relu(bn.apply(y))
              for y, bn in zip(self.l1_plan.execute(f), self.l1_bns)]
        l2 = self.l2_plan.execute(dict(enumerate(l1)))
        l2 = [tensor.relu(bn.apply(y)) for y, bn in zip(l2, self.l2_bns)]
        fused = self.fuse.forward(tensor.concat_channels(l2))
        return f + fused


class InferenceNet:
    """Read-only inference graph over a trained net, with the encoder
    merge and the block merge each independently switchable."""

    def __init__(self, net: DCNet, merge_encoder=True, merge_blocks=True):
        self.net = net
        self.merge_encoder = merge_encoder
        self.merge_blocks = merge_blocks
        self.encoder = merge_dual_encoder(net) if merge_encoder else None
        self.decoder = ([MergedResASPP2.from_block(b) for b in net.decoder]
                        if merge_blocks else None)

    @property
    def name(self):
        return {(False, False): "unmerged",
                (True, False): "encoder-merged",
                (False, True): "blocks-merged",
                (True, True): "fully-merged"}[
                    (self.merge_encoder, self.merge_blocks)]

    def encoder_stages(self, images):
        """Per-stage outputs of both encoder streams as arrays."""
        if self.merge_encoder:
            outs = self.encoder.forward(images)
            halves = [self.encoder.split_halves(o, i) for i, o in enumerate(outs)]
            return [h[0] for h in halves], [h[1] for h in halves]
        was_training = self.net.training
        self.net.eval()
        try:
            e1 = [v.data for v in self.net.encoder1.forward(Var(images))]
            e2 = [v.data for v in self.net.encoder2.forward(Var(images))]
        finally:
            self.net.train(was_training)
        return e1, e2

    def _decode(self, idx, x):
        if self.merge_blocks:
            return self.decoder[idx].forward(x)
        return self.net.decoder[idx].forward(Var(x)).data

    def forward(self, images) -> ForwardOutputs:
        images = np.asarray(images, tensor.DTYPE)
        net = self.net
        was_training = net.training
        net.eval()
        try:
            h, w = net.cfg.input_hw
            if images.shape[1:] != (3, h, w):
                raise ValueError(f"expected (n, 3, {h}, {w}), got {images.shape}")
            e1, e2 = self.encoder_stages(images)
            e = net.cfg.e_stages
            deep_in = tensor.maxpool2d(
                tensor.concat_channels([e1[-1], e2[-1]]), 2, 2)
            feats = [None] * (e + 1)
            feats[e] = self._decode(e, deep_in)
            for stage in range(e, 0, -1):
                skip = tensor.concat_channels([e1[stage - 1], e2[stage - 1]])
                up = tensor.bilinear_resize(feats[stage],
                                            skip.shape[2], skip.shape[3])
                feats[stage - 1] = self._decode(
                    stage - 1, tensor.concat_channels([skip, up]))

            def head(mod, feat):
                return mod.forward(Var(feat), h, w).data

            return ForwardOutputs(
                enc1=[head(m, f) for m, f in zip(net.enc1_heads, e1)],
                enc2=[head(m, f) for m, f in zip(net.enc2_heads, e2)],
                dec=[head(m, f) for m, f in zip(net.dec_heads, feats)],
            )
        finally:
            net.train(was_training)


def measure_ops(fn):
    """Run fn() and return (result, OpCounters delta for the call)."""
    before = tensor.counters().snapshot()
    out = fn()
    return out, tensor.counters().delta(before)


@dataclass
class EquivalenceReport:
    stage_max_abs: float
    output_max_abs: float
    draws: int
    stage_tol: float
    total_tol: float

    @property
    def ok(self):
        return (self.stage_max_abs <= self.stage_tol
                and self.output_max_abs <= self.total_tol)

    def __str__(self):
        verdict = "OK" if self.ok else "FAIL"
        return (f"equivalence over {self.draws} draws: "
                f"stage max|diff| {self.stage_max_abs:.3e} "
                f"(tol {self.stage_tol:.0e}), "
                f"output max|diff| {self.output_max_abs:.3e} "
                f"(tol {self.total_tol:.0e}) [{verdict}]")


def _randomize_bn(net, rng):
    for m in net.submodules():
        if isinstance(m, BatchNorm2d):
            m.running_mean = rng.normal(0, 0.2, m.channels).astype(tensor.DTYPE)
            m.running_var = rng.uniform(0.5, 1.5, m.channels).astype(tensor.DTYPE)


def _compare_once(plain, merged, x):
    p1, p2 = plain.encoder_stages(x)
    m1, m2 = merged.encoder_stages(x)
    stage = max(float(np.abs(a - b).max())
                for a, b in zip(p1 + p2, m1 + m2))
    po, mo = plain.forward(x), merged.forward(x)
    out = max(float(np.abs(a - b).max())
              for a, b in zip(po.all_maps, mo.all_maps))
    return stage, out


def verify_net(net, draws=5, seed=0, stage_tol=1e-5,
               total_tol=1e-4) -> EquivalenceReport:
    """Merged vs unmerged agreement for one fixed net over random inputs."""
    if draws < 1:
        raise ValueError("draws must be >= 1")
    rng = np.random.default_rng(seed)
    plain = InferenceNet(net, merge_encoder=False, merge_blocks=False)
    merged = InferenceNet(net, merge_encoder=True, merge_blocks=True)
    worst_stage = worst_out = 0.0
    for _ in range(draws):
        x = rng.normal(0, 1, (1, 3, *net.cfg.input_hw)).astype(tensor.DTYPE)
        stage, out = _compare_once(plain, merged, x)
        worst_stage = max(worst_stage, stage)
        worst_out = max(worst_out, out)
    return EquivalenceReport(worst_stage, worst_out, draws, stage_tol, total_tol)


def verify_equivalence(cfg, draws=100, seed=0, stage_tol=1e-5, total_tol=1e-4,
                       progress=None) -> EquivalenceReport:
    """Fresh random nets and inputs; merged vs unmerged outputs compared
    per encoder stage and end to end."""
    from . import network
    if draws < 1:
        raise ValueError("draws must be >= 1")
    worst_stage = 0.0
    worst_out = 0.0
    rng = np.random.default_rng(seed)
    for d in range(draws):
        net = network.build(cfg, seed=int(rng.integers(2 ** 31)))
        _randomize_bn(net, rng)
        x = rng.normal(0, 1, (1, 3, *cfg.input_hw)).astype(tensor.DTYPE)
        plain = InferenceNet(net, merge_encoder=False, merge_blocks=False)
        merged = InferenceNet(net, merge_encoder=True, merge_blocks=True)
        stage, out = _compare_once(plain, merged, x)
        worst_stage = max(worst_stage, stage)
        worst_out = max(worst_out, out)
        if progress is not None:
            progress(d, worst_stage, worst_out)
    return EquivalenceReport(worst_stage, worst_out, draws, stage_tol, total_tol)


@dataclass
class BenchRow:
    variant: str
    median_ms: float
    gemm: int
    unfold: int
    max_abs_diff: float


@dataclass
class BenchTable:
    rows: list

    def render(self):
        head = f"{'variant':<16} {'median-ms':>10} {'gemm':>6} {'unfold':>7} {'max-abs-diff':>13}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(f"{r.variant:<16} {r.median_ms:>10.2f} {r.gemm:>6d} "
                         f"{r.unfold:>7d} {r.max_abs_diff:>13.3e}")
        return "\n".join(lines)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["variant", "median-ms", "gemm-count", "unfold-count",
                    "max-abs-diff"])
        for r in self.rows:
            w.writerow([r.variant, f"{r.median_ms:.3f}", r.gemm, r.unfold,
                        f"{r.max_abs_diff:.6e}"])
        return buf.getvalue()


def bench(net: DCNet, images, repeats=5, equiv_tol=1e-4) -> BenchTable:
    """Time all four merge variants on one input.

    Output equivalence against the unmerged variant is asserted before
    any timing; a mismatch aborts.  Timing is median wall time.
    """
    if repeats < 3:
        raise ValueError("repeats must be >= 3")
    images = np.asarray(images, tensor.DTYPE)
    variants = [InferenceNet(net, me, mb)
                for me, mb in ((False, False), (True, False),
                               (False, True), (True, True))]
    baseline, base_ops = measure_ops(lambda: variants[0].forward(images))
    rows = []
    for v in variants:
        out, ops = measure_ops(lambda: v.forward(images))
        diff = max(float(np.abs(a - b).max())
                   for a, b in zip(out.all_maps, baseline.all_maps))
        if diff > equiv_tol:
            raise RuntimeError(
                f"variant {v.name} diverges from baseline by {diff:.3e} "
                f"(tol {equiv_tol:.0e}); benchmark aborted")
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter_ns()
            v.forward(images)
            times.append((time.perf_counter_ns() - t0) / 1e6)
        rows.append(BenchRow(v.name, float(np.median(times)),
                             ops.gemm, ops.unfold, diff))
    return BenchTable(rows)
