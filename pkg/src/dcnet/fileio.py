"""Image and tensor persistence.

Images use binary PGM (P5) and PPM (P6) with maxval 255; byte v reads
as v/255 and writes quantize round-half-up.  Tensors use a little-endian
container ("DCTN", version 1, float32); checkpoints are a sequence of
(name, tensor) records covering the parameter tree, the batchnorm
buffers, and pseudo-tensors under ``meta.`` that pin the configuration.
All writes go through a temp file and an atomic rename; all loads
validate the complete name/shape tree before touching any state.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from . import reparam
from .blocks import Module
from .network import DCNet, DCNetConfig, build
from .reparam import ConvBNEval, InferenceNet, MergedEncoder

MAGIC = b"DCTN"
VERSION = 1
DTYPE_F32 = 0


class FormatError(ValueError):
    """Malformed file; carries the byte offset where parsing failed."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)


# ------------------------------------------------------------- PGM / PPM

def _parse_netpbm(data, expect_magic):
    pos = 0

    def next_token():
        nonlocal pos
        while pos < len(data):
            c = data[pos:pos + 1]
            if c.isspace():
                pos += 1
            elif c == b"#":
                nl = data.find(b"\n", pos)
                if nl < 0:
                    raise FormatError("unterminated comment", pos)
                pos = nl + 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("unexpected end of header", start)
        return data[start:pos], start

    magic, off = next_token()
    if magic != expect_magic:
        raise FormatError(f"bad magic {magic!r}, expected {expect_magic!r}", off)
    dims = []
    for _ in range(3):
        tok, off = next_token()
        try:
            dims.append(int(tok))
        except ValueError:
            raise FormatError(f"non-numeric header field {tok!r}", off) from None
    w, h, maxval = dims
    if w < 1 or h < 1:
        raise FormatError(f"bad image size {w}x{h}", off)
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}, need 255", off)
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError("missing whitespace before raster", pos)
    return w, h, pos + 1


def _read_raster(path, expect_magic, channels):
    with open(path, "rb") as f:
        data = f.read()
    w, h, start = _parse_netpbm(data, expect_magic)
    need = w * h * channels
    raster = data[start:start + need]
    if len(raster) < need:
        raise FormatError(
            f"truncated raster: need {need} bytes, have {len(raster)}",
            len(data))
    arr = np.frombuffer(raster, np.uint8).astype(np.float32) / 255.0
    return arr, h, w


def read_pgm(path):
    """P5 grayscale as a (1, 1, h, w) float32 tensor in [0, 1]."""
    arr, h, w = _read_raster(path, b"P5", 1)
    return arr.reshape(1, 1, h, w)


def read_ppm(path):
    """P6 color as a (1, 3, h, w) float32 tensor in [0, 1]."""
    arr, h, w = _read_raster(path, b"P6", 3)
    return arr.reshape(1, h, w, 3).transpose(0, 3, 1, 2).copy()


def _quantize_bytes(arr):
    a = np.asarray(arr, np.float64)
    if a.min() < 0 or a.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    return np.floor(a * 255.0 + 0.5).astype(np.uint8)


def _atomic_write(path, payload):
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def write_pgm(path, arr):
    """Write a (h, w) or (1, 1, h, w) map in [0, 1] as binary P5."""
    a = np.asarray(arr)
    if a.ndim == 4 and a.shape[:2] == (1, 1):
        a = a[0, 0]
    if a.ndim != 2:
        raise ValueError(f"expected (h, w) or (1, 1, h, w), got {a.shape}")
    h, w = a.shape
    _atomic_write(path, b"P5\n%d %d\n255\n" % (w, h) + _quantize_bytes(a).tobytes())


def write_ppm(path, arr):
    """Write a (3, h, w) or (1, 3, h, w) image in [0, 1] as binary P6."""
    a = np.asarray(arr)
    if a.ndim == 4 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 3 or a.shape[0] != 3:
        raise ValueError(f"expected (3, h, w) or (1, 3, h, w), got {a.shape}")
    pixels = _quantize_bytes(a.transpose(1, 2, 0))
    h, w = a.shape[1], a.shape[2]
    _atomic_write(path, b"P6\n%d %d\n255\n" % (w, h) + pixels.tobytes())


# -------------------------------------------------------- tensor container

def _tensor_bytes(arr):
    a = np.ascontiguousarray(arr, np.float32)
    parts = [MAGIC, struct.pack("<BB", VERSION, DTYPE_F32),
             struct.pack("<I", a.ndim)]
    parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
    parts.append(a.astype("<f4").tobytes())
    return b"".join(parts)


def _read_exact(data, pos, n, what):
    if pos + n > len(data):
        raise FormatError(f"truncated {what}: need {n} bytes", pos)
    return data[pos:pos + n], pos + n


def _parse_tensor(data, pos):
    start = pos
    raw, pos = _read_exact(data, pos, 4, "tensor magic")
    if raw != MAGIC:
        raise FormatError(f"bad tensor magic {raw!r}", start)
    raw, pos = _read_exact(data, pos, 2, "tensor version/dtype")
    version, dtype = struct.unpack("<BB", raw)
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}", start + 4)
    if dtype != DTYPE_F32:
        raise FormatError(f"unsupported dtype code {dtype}", start + 5)
    raw, pos = _read_exact(data, pos, 4, "tensor rank")
    rank, = struct.unpack("<I", raw)
    if rank > 8:
        raise FormatError(f"implausible rank {rank}", pos - 4)
    raw, pos = _read_exact(data, pos, 4 * rank, "tensor dims")
    dims = struct.unpack(f"<{rank}I", raw)
    count = 1
    for d in dims:
        count *= d
    raw, pos = _read_exact(data, pos, 4 * count, "tensor payload")
    arr = np.frombuffer(raw, "<f4").reshape(dims).astype(np.float32)
    return arr, pos


# ------------------------------------------------------------ checkpoints

def write_manifest(path, state):
    """Write (name, tensor) records in iteration order, atomically."""
    parts = []
    seen = set()
    for name, arr in state.items():
        if name in seen:
            raise ValueError(f"duplicate tensor name {name!r}")
        seen.add(name)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(_tensor_bytes(arr))
    _atomic_write(path, b"".join(parts))


def read_manifest(path):
    with open(path, "rb") as f:
        data = f.read()
    state = {}
    pos = 0
    while pos < len(data):
        raw, pos = _read_exact(data, pos, 4, "record name length")
        nlen, = struct.unpack("<I", raw)
        if nlen == 0 or nlen > 4096:
            raise FormatError(f"implausible name length {nlen}", pos - 4)
        raw, pos = _read_exact(data, pos, nlen, "record name")
        name = raw.decode("utf-8")
        if name in state:
            raise FormatError(f"duplicate tensor name {name!r}", pos - nlen)
        state[name], pos = _parse_tensor(data, pos)
    return state


def module_state(module: Module):
    """Parameter and buffer arrays keyed by tree path."""
    state = {}
    for name, p in module.named_parameters():
        state[name] = p.data
    for name, b in module.named_buffers():
        state[name] = b
    return state


def load_into(module: Module, state):
    """Assign a state dict into a module tree.

    The full name/shape tree is validated first; any mismatch raises
    before anything is assigned, naming the first offending tensor.
    """
    tensors = {k: v for k, v in state.items() if not k.startswith("meta.")}
    params = dict(module.named_parameters())
    slots = {name: (owner, attr)
             for name, owner, attr in module.named_buffer_slots()}
    expected = {**{n: p.data.shape for n, p in params.items()},
                **{n: getattr(o, a).shape for n, (o, a) in slots.items()}}
    for name in sorted(expected):
        if name not in tensors:
            raise ValueError(f"checkpoint is missing tensor {name!r}")
        if tuple(tensors[name].shape) != tuple(expected[name]):
            raise ValueError(
                f"shape mismatch for {name!r}: checkpoint "
                f"{tensors[name].shape}, graph {expected[name]}")
    for name in sorted(tensors):
        if name not in expected:
            raise ValueError(f"checkpoint has unexpected tensor {name!r}")
    for name, p in params.items():
        p.data = tensors[name].copy()
        p.velocity = np.zeros_like(p.data)
        p.grad = None
    for name, (owner, attr) in slots.items():
        setattr(owner, attr, tensors[name].copy())


def _meta_state(cfg: DCNetConfig, merged):
    return {
        "meta.widths": np.asarray(cfg.widths, np.float32),
        "meta.input_hw": np.asarray(cfg.input_hw, np.float32),
        "meta.merged": np.asarray([1.0 if merged else 0.0], np.float32),
    }


def _meta_config(state):
    try:
        widths = tuple(int(v) for v in state["meta.widths"])
        input_hw = tuple(int(v) for v in state["meta.input_hw"])
        merged = bool(int(state["meta.merged"][0]))
    except KeyError as e:
        raise ValueError(f"checkpoint lacks config entry {e.args[0]!r}") from None
    return DCNetConfig(widths=widths, input_hw=input_hw), merged


# --- merged-encoder tensor walk (names differ from the training tree, so
# --- a merged checkpoint can never be loaded into a training graph)

def _conv_eval_slots(prefix, c: ConvBNEval):
    yield f"{prefix}.weight", c, "weight"
    if c.bias is not None:
        yield f"{prefix}.bias", c, "bias"
    for attr in ("gamma", "beta", "mean", "var"):
        yield f"{prefix}.bn.{attr}", c.bn, attr


def _merged_encoder_slots(enc: MergedEncoder):
    yield from _conv_eval_slots("encoder.input_conv", enc.input_conv)
    for i, stage in enumerate(enc.stages):
        yield from _conv_eval_slots(f"encoder.stages.{i}.conv1", stage.conv1)
        yield from _conv_eval_slots(f"encoder.stages.{i}.conv2", stage.conv2)
        if stage.skip is not None:
            yield from _conv_eval_slots(f"encoder.stages.{i}.skip", stage.skip)


def _non_encoder_state(net: DCNet):
    return {k: v for k, v in module_state(net).items()
            if not k.startswith(("encoder1.", "encoder2."))}


def save_checkpoint(graph, path):
    """Persist a training net or a merged inference net.

    DCNet saves its full tree; a merged InferenceNet saves the single
    merged encoder plus the unchanged decoder/head tensors.
    """
    if isinstance(graph, DCNet):
        state = {**_meta_state(graph.cfg, False), **module_state(graph)}
    elif isinstance(graph, InferenceNet):
        if not graph.merge_encoder:
            raise ValueError("only encoder-merged inference graphs are saved")
        state = dict(_meta_state(graph.net.cfg, True))
        for name, owner, attr in _merged_encoder_slots(graph.encoder):
            state[name] = getattr(owner, attr)
        state.update(_non_encoder_state(graph.net))
    else:
        raise ValueError(f"cannot checkpoint object of type {type(graph).__name__}")
    write_manifest(path, state)


def load_checkpoint(path):
    """Raw (name -> tensor) tree including meta entries."""
    return read_manifest(path)


def restore(path):
    """Rebuild whatever the checkpoint holds.

    Returns ("training", DCNet) or ("merged", InferenceNet); shape and
    name validation happens against a freshly built graph of the stored
    configuration before any assignment.
    """
    state = load_checkpoint(path)
    cfg, merged = _meta_config(state)
    net = build(cfg, seed=0)
    if not merged:
        load_into(net, state)
        return "training", net
    inf = InferenceNet(net, merge_encoder=True, merge_blocks=True)
    slots = {name: (owner, attr)
             for name, owner, attr in _merged_encoder_slots(inf.encoder)}
    part = dict(net.named_parameters())
    buf = {name: (owner, attr)
           for name, owner, attr in net.named_buffer_slots()}
    tensors = {k: v for k, v in state.items() if not k.startswith("meta.")}
    expected = {}
    expected.update({n: getattr(o, a).shape for n, (o, a) in slots.items()})
    for n, p in part.items():
        if not n.startswith(("encoder1.", "encoder2.")):
            expected[n] = p.data.shape
    for n, (o, a) in buf.items():
        if not n.startswith(("encoder1.", "encoder2.")):
            expected[n] = getattr(o, a).shape
    for name in sorted(expected):
        if name not in tensors:
            raise ValueError(f"checkpoint is missing tensor {name!r}")
        if tuple(tensors[name].shape) != tuple(expected[name]):
            raise ValueError(
                f"shape mismatch for {name!r}: checkpoint "
                f"{tensors[name].shape}, graph {expected[name]}")
    for name in sorted(tensors):
        if name not in expected:
            raise ValueError(f"checkpoint has unexpected tensor {name!r}")
    for name, (owner, attr) in slots.items():
        setattr(owner, attr, tensors[name].copy())
    for name, p in part.items():
        if name in expected:
            p.data = tensors[name].copy()
    for name, (owner, attr) in buf.items():
        if name in expected:
            setattr(owner, attr, tensors[name].copy())
    # the merged decoder plans were stacked from pre-load weights; rebuild
    inf.decoder = [reparam.MergedResASPP2.from_block(b) for b in net.decoder]
    return "merged", inf
