"""Full dual-encoder saliency network and its training loop.

Two structurally identical encoders learn different subtasks (their side
outputs are supervised with edge and location targets); the decoder runs
one multi-scale block per stage, fed by both encoder stages plus the
upsampled deeper decoder stage.  Every stage carries a side head, so a
forward pass yields 2E + D sigmoid maps at input resolution; the
shallowest decoder map is the final saliency prediction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd, losses
from .autograd import OptimizerConfig, Tape, TrainingDiverged, Var
from .blocks import (ASPP, BasicBlock, ConvBNReLU, Module, ResASPP2,
                     ResASPP2Config, SideHead)
from .losses import LossReport, LossWeights
from .tensor import ConvSpec


@dataclass(frozen=True)
class DCNetConfig:
    """Stage widths and input geometry.

    E = len(widths) encoder stages; D = E + 1 decoder stages.  The input
    conv halves resolution and stages 2..E halve again, so the deepest
    decoder stage (after one more pooling) needs input divisible by
    2^(E+1).
    """

    widths: tuple = (16, 32, 64, 128)
    input_hw: tuple = (64, 64)

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "input_hw", tuple(int(s) for s in self.input_hw))
        if not self.widths or any(w < 1 for w in self.widths):
            raise ValueError(f"widths must be positive, got {self.widths}")
        div = 2 ** (self.e_stages + 1)
        h, w = self.input_hw
        if h % div or w % div or h < div or w < div:
            raise ValueError(
                f"input {h}x{w} must be a positive multiple of {div} "
                f"for {self.e_stages} encoder stages")

    @property
    def e_stages(self):
        return len(self.widths)

    @property
    def d_stages(self):
        return len(self.widths) + 1

    def decoder_plan(self):
        """ResASPP2Config per decoder stage, index 0 = shallowest (De1).

        Stage N consumes both encoder stage-N outputs plus the upsampled
        deeper decoder output and emits the encoder stage width; the
        deepest stage sees only the pooled concat of the last encoder
        stage pair.
        """
        w = self.widths
        e = self.e_stages
        plan = []
        deeper_out = w[e - 1]                      # deepest stage output width
        for n in range(e, 0, -1):                  # De_E .. De_1
            c_in = 2 * w[n - 1] + deeper_out
            c_out = w[n - 1]
            plan.append(ResASPP2Config(c_in, max(c_out // 2, 1), c_out))
            deeper_out = c_out
        plan.reverse()
        plan.append(ResASPP2Config(2 * w[e - 1], max(w[e - 1] // 2, 1), w[e - 1]))
        return plan                                # [De1 .. DeD]


class Encoder(Module):
    """Input conv (stride 2) followed by one residual block per stage;
    stages after the first downsample by 2."""

    def __init__(self, widths, rng):
        super().__init__()
        self.input_conv = ConvBNReLU(
            ConvSpec(3, widths[0], kernel=3, stride=2, padding=1), rng)
        self.stages = []
        prev = widths[0]
        for i, w in enumerate(widths):
            self.stages.append(BasicBlock(prev, w, 1 if i == 0 else 2, rng))
            prev = w

    def forward(self, x):
        y = self.input_conv.forward(x)
        outs = []
        for stage in self.stages:
            y = stage.forward(y)
            outs.append(y)
        return outs


@dataclass
class ForwardOutputs:
    """All side-output maps of one pass, each (n, 1, h, w) in (0, 1).

    enc1/enc2 are indexed by encoder stage (shallow to deep), dec by
    decoder stage (De1 first).  dec[0] is the final saliency map.
    """

    enc1: list
    enc2: list
    dec: list

    @property
    def sup1(self):
        return self.dec[0]

    @property
    def all_maps(self):
        return self.enc1 + self.enc2 + self.dec

    @property
    def count(self):
        return len(self.enc1) + len(self.enc2) + len(self.dec)


class DCNet(Module):
    def __init__(self, cfg: DCNetConfig, rng):
        super().__init__()
        self.cfg = cfg
        self.encoder1 = Encoder(cfg.widths, rng)
        self.encoder2 = Encoder(cfg.widths, rng)
        plan = cfg.decoder_plan()
        self.decoder = [ResASPP2(c, rng) for c in plan]
        self.enc1_heads = [SideHead(w, rng) for w in cfg.widths]
        self.enc2_heads = [SideHead(w, rng) for w in cfg.widths]
        self.dec_heads = [SideHead(c.c_out, rng) for c in plan]

    def forward(self, x: Var) -> ForwardOutputs:
        n, c, h, w = x.data.shape
        if c != 3 or (h, w) != self.cfg.input_hw:
            raise ValueError(
                f"expected (n, 3, {self.cfg.input_hw[0]}, {self.cfg.input_hw[1]}) "
                f"input, got {x.data.shape}")
        e1 = self.encoder1.forward(x)
        e2 = self.encoder2.forward(x)
        e = self.cfg.e_stages
        deep_in = autograd.maxpool2d(autograd.concat([e1[-1], e2[-1]]), 2, 2)
        dec_feats = [None] * (e + 1)
        dec_feats[e] = self.decoder[e].forward(deep_in)
        for n_stage in range(e, 0, -1):           # build De_E .. De_1
            skip = autograd.concat([e1[n_stage - 1], e2[n_stage - 1]])
            th, tw = skip.data.shape[2], skip.data.shape[3]
            up = autograd.upsample_bilinear(dec_feats[n_stage], th, tw)
            dec_feats[n_stage - 1] = self.decoder[n_stage - 1].forward(
                autograd.concat([skip, up]))
        return ForwardOutputs(
            enc1=[hd.forward(f, h, w) for hd, f in zip(self.enc1_heads, e1)],
            enc2=[hd.forward(f, h, w) for hd, f in zip(self.enc2_heads, e2)],
            dec=[hd.forward(f, h, w) for hd, f in zip(self.dec_heads, dec_feats)],
        )

    def predict(self, images) -> ForwardOutputs:
        """Eval-mode forward on a plain array; restores training flags."""
        was_training = self.training
        self.eval()
        try:
            return self.forward(Var(np.asarray(images, np.float32)))
        finally:
            self.train(was_training)


def build(cfg: DCNetConfig, seed=0) -> DCNet:
    """Deterministic construction: same seed, bit-identical parameters."""
    return DCNet(cfg, np.random.default_rng(seed))


def train_step(net: DCNet, images, saliency_gt, aux1_gt, aux2_gt,
               opt: OptimizerConfig, weights: LossWeights = None,
               grad_scale=None) -> LossReport:
    """One SGD step over the full deep-supervision loss.

    Reported losses are pixel sums, exactly as defined; the backward seed
    defaults to 1/(n*h*w) so the parameter update follows the per-pixel
    mean gradient and the configured learning rate is usable regardless
    of image area.
    """
    images = np.asarray(images, np.float32)
    n, _, h, w = images.shape
    if weights is None:
        weights = LossWeights.ones(net.cfg.e_stages, net.cfg.d_stages)
    if grad_scale is None:
        grad_scale = 1.0 / (n * h * w)
    net.train()
    with Tape() as tape:
        out = net.forward(Var(images))
        report = losses.total_loss(out.enc1, out.enc2, out.dec,
                                   aux1_gt, aux2_gt, saliency_gt, weights)
        if not np.isfinite(report.total):
            raise TrainingDiverged(f"loss is not finite: {report.total}")
        tape.backward(report.total_var, seed=np.asarray(grad_scale, np.float32))
    autograd.sgd_step(net.parameters(), opt)
    return report


def make_toy_dataset(count, hw=(64, 64), seed=0):
    """Synthetic saliency samples: one bright solid shape per image on a
    darker noisy background.

    Returns (image (3,h,w), saliency, edge-width-4, location) tuples with
    float32 maps, deterministic in seed.  Shapes span at least a pooling
    cell so the location target is never empty.
    """
    from . import auxmaps
    rng = np.random.default_rng(seed)
    h, w = hw
    samples = []
    for i in range(count):
        mask = np.zeros((h, w), np.uint8)
        sh = int(rng.integers(h // 4, h // 2 + 1))
        sw = int(rng.integers(w // 4, w // 2 + 1))
        top = int(rng.integers(2, h - sh - 1))
        left = int(rng.integers(2, w - sw - 1))
        if i % 2 == 0:
            mask[top:top + sh, left:left + sw] = 1
        else:
            cy, cx = top + sh / 2, left + sw / 2
            yy, xx = np.mgrid[0:h, 0:w]
            mask[((yy - cy) / (sh / 2)) ** 2 + ((xx - cx) / (sw / 2)) ** 2 <= 1] = 1
        fg = rng.uniform(0.55, 0.95, 3)
        bg = rng.uniform(0.05, 0.45, 3)
        img = (mask[None] * fg[:, None, None] + (1 - mask[None]) * bg[:, None, None]
               + rng.normal(0, 0.05, (3, h, w)))
        edge4, loc = auxmaps.training_targets(mask)
        samples.append((np.clip(img, 0, 1).astype(np.float32),
                        mask.astype(np.float32),
                        edge4.astype(np.float32),
                        loc.astype(np.float32)))
    return samples


def _target4(t, n):
    """Normalize a target map to (n, 1, h, w) float32."""
    t = np.asarray(t, np.float32)
    if t.ndim == 2:
        t = t[None, None]
    elif t.ndim == 3:
        t = t[:, None]
    if t.shape[0] == 1 and n > 1:
        t = np.repeat(t, n, axis=0)
    return t


def train_loop(net: DCNet, dataset, iterations, opt: OptimizerConfig,
               weights: LossWeights = None,
               callback=None):
    """Round-robin over the dataset for a fixed number of steps.

    dataset is a sequence of (image, saliency, aux1, aux2) samples, each
    image (1, 3, h, w) or (3, h, w).  Returns the per-step total-loss
    history.  Deterministic: fixed order, no augmentation.
    """
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    if not dataset and iterations > 0:
        raise ValueError("dataset must be non-empty")
    history = []
    for step in range(iterations):
        img, sal, a1, a2 = dataset[step % len(dataset)]
        img = np.asarray(img, np.float32)
        if img.ndim == 3:
            img = img[None]
        sal, a1, a2 = (_target4(t, img.shape[0]) for t in (sal, a1, a2))
        report = train_step(net, img, sal, a1, a2, opt, weights)
        history.append(report.total)
        if callback is not None:
            callback(step, report)
    return history
