"""Command-line surface.

Subcommands: aux (generate auxiliary targets), train, infer, merge,
verify (merged-vs-unmerged equivalence), bench, eval (metric suite),
erf.  Exit codes: 0 success, 1 validation failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import glob
import os
import sys

import numpy as np

from . import auxmaps, erf as erf_tool, fileio, metrics, network, reparam, tensor
from .autograd import OptimizerConfig, TrainingDiverged
from .blocks import ASPP, ResASPP2, ResASPP2Config
from .network import DCNetConfig


def _parse_size(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
        return h, w
    except ValueError:
        raise ValueError(f"size must look like 64x64, got {text!r}") from None


def _parse_ints(text):
    return tuple(int(v) for v in text.split(","))


def _glob_sorted(directory, pattern):
    files = sorted(glob.glob(os.path.join(directory, pattern)))
    if not files:
        raise ValueError(f"no {pattern} files in {directory}")
    return files


def _read_mask(path):
    return (fileio.read_pgm(path)[0, 0] >= 0.5).astype(np.uint8)


def _load_training_net(path):
    kind, obj = fileio.restore(path)
    if kind != "training":
        raise ValueError(f"{path} holds a merged checkpoint; need a training one")
    return obj


# ------------------------------------------------------------ subcommands

def _cmd_aux(args):
    os.makedirs(args.out, exist_ok=True)
    widths = _parse_ints(args.widths)
    count = 0
    for path in _glob_sorted(args.gt, "*.pgm"):
        stem = os.path.splitext(os.path.basename(path))[0]
        mask = _read_mask(path)
        maps = auxmaps.build_aux_set(mask, edge_widths=widths)
        for wd, m in maps.edges.items():
            fileio.write_pgm(os.path.join(args.out, f"{stem}_edge{wd}.pgm"), m)
        fileio.write_pgm(os.path.join(args.out, f"{stem}_loc.pgm"), maps.location)
        fileio.write_pgm(os.path.join(args.out, f"{stem}_body.pgm"), maps.body)
        fileio.write_pgm(os.path.join(args.out, f"{stem}_detail.pgm"), maps.detail)
        count += 1
    print(f"wrote auxiliary maps for {count} masks to {args.out}")
    return 0


def _load_pair_dataset(data_dir, hw):
    samples = []
    for img_path in _glob_sorted(data_dir, "*.ppm"):
        stem = os.path.splitext(os.path.basename(img_path))[0]
        mask_path = os.path.join(data_dir, f"{stem}.pgm")
        if not os.path.exists(mask_path):
            raise ValueError(f"no mask {stem}.pgm for image {img_path}")
        img = fileio.read_ppm(img_path)[0]
        if img.shape[1:] != hw:
            raise ValueError(
                f"{img_path}: size {img.shape[1:]} != configured {hw}")
        mask = _read_mask(mask_path)
        edge4, loc = auxmaps.training_targets(mask)
        samples.append((img, mask.astype(np.float32),
                        edge4.astype(np.float32), loc.astype(np.float32)))
    return samples


def _cmd_train(args):
    hw = _parse_size(args.size)
    cfg = DCNetConfig(widths=_parse_ints(args.widths), input_hw=hw)
    net = network.build(cfg, seed=args.seed)
    if args.data:
        dataset = _load_pair_dataset(args.data, hw)
    else:
        dataset = network.make_toy_dataset(args.synthetic, hw, seed=args.seed)
    opt = OptimizerConfig(lr=args.lr, momentum=args.momentum,
                          weight_decay=args.weight_decay)
    history = network.train_loop(net, dataset, args.iters, opt)
    fileio.save_checkpoint(net, args.out)
    if history:
        print(f"trained {args.iters} iterations on {len(dataset)} samples: "
              f"loss {history[0]:.4f} -> {history[-1]:.4f}")
    else:
        print("trained 0 iterations; checkpoint holds the initialization")
    print(f"checkpoint written to {args.out}")
    return 0


def _cmd_infer(args):
    kind, obj = fileio.restore(args.ckpt)
    if kind == "merged":
        predictor, cfg = obj, obj.net.cfg
    elif args.merged:
        predictor = reparam.InferenceNet(obj, merge_encoder=True, merge_blocks=True)
        cfg = obj.cfg
    else:
        predictor, cfg = obj, obj.cfg
    os.makedirs(args.out, exist_ok=True)
    h, w = cfg.input_hw
    count = 0
    for path in _glob_sorted(getattr(args, "in"), "*.ppm"):
        stem = os.path.splitext(os.path.basename(path))[0]
        img = fileio.read_ppm(path)
        oh, ow = img.shape[2], img.shape[3]
        x = tensor.bilinear_resize(img, h, w)
        if isinstance(predictor, reparam.InferenceNet):
            sup1 = predictor.forward(x).sup1
        else:
            sup1 = predictor.predict(x).sup1.data
        sal = tensor.bilinear_resize(sup1, oh, ow)
        fileio.write_pgm(os.path.join(args.out, f"{stem}.pgm"), sal)
        count += 1
    print(f"wrote {count} saliency maps to {args.out}")
    return 0


def _cmd_merge(args):
    net = _load_training_net(args.ckpt)
    inf = reparam.InferenceNet(net, merge_encoder=True, merge_blocks=True)
    fileio.save_checkpoint(inf, args.out)
    print(f"merged checkpoint written to {args.out}")
    return 0


def _cmd_verify(args):
    net = _load_training_net(args.ckpt)
    report = reparam.verify_net(net, draws=args.draws, seed=args.seed,
                                stage_tol=args.stage_tol, total_tol=args.tol)
    print(report)
    return 0 if report.ok else 1


def _cmd_bench(args):
    net = _load_training_net(args.ckpt)
    rng = np.random.default_rng(args.seed)
    x = rng.normal(0, 1, (1, 3, *net.cfg.input_hw)).astype(np.float32)
    table = reparam.bench(net, x, repeats=args.repeats)
    print(table.render())
    if args.csv:
        fileio._atomic_write(args.csv, table.to_csv().encode())
        print(f"CSV written to {args.csv}")
    return 0


def _cmd_eval(args):
    pairs = []
    for gt_path in _glob_sorted(args.gt, "*.pgm"):
        name = os.path.basename(gt_path)
        pred_path = os.path.join(args.pred, name)
        if not os.path.exists(pred_path):
            raise ValueError(f"no prediction {name} in {args.pred}")
        pairs.append((fileio.read_pgm(pred_path)[0, 0], _read_mask(gt_path)))
    report, curve = metrics.evaluate_dataset(pairs)
    lines = [f"images {report.images}", f"wf_degenerate {report.wf_degenerate}"]
    lines += [f"{name} {value:.6f}" for name, value in report.rows()]
    text = "\n".join(lines)
    print(text)
    fileio._atomic_write(args.out, (text + "\n").encode())
    curve_rows = ["threshold,precision,recall,f"]
    curve_rows += [f"{t},{curve.precision[t]:.6f},{curve.recall[t]:.6f},"
                   f"{curve.f[t]:.6f}" for t in range(256)]
    fileio._atomic_write(args.out + ".curves.csv",
                         ("\n".join(curve_rows) + "\n").encode())
    print(f"report written to {args.out}")
    return 0


def _cmd_erf(args):
    cfg = ResASPP2Config(args.c_in, args.m, args.c_out)
    factories = {
        "resaspp2": lambda rng: ResASPP2(cfg, rng),
        "aspp": lambda rng: ASPP(cfg, rng),
    }
    hw = _parse_size(args.size)
    if args.block == "both":
        entries = erf_tool.compare_modules(
            list(factories.items()), cfg.c_in, hw,
            tau=args.tau, seeds=args.seeds)
    else:
        e = erf_tool.erf_map(factories[args.block], cfg.c_in, hw,
                             seeds=args.seeds)
        entries = [erf_tool.ErfEntry(args.block, erf_tool.erf_area(e, args.tau),
                                     erf_tool.support_bbox(e), e)]
    for r in entries:
        bbox = "empty" if r.bbox is None else f"{r.bbox[4]}x{r.bbox[5]}"
        print(f"{r.name}: area {r.area} (tau {args.tau}), support {bbox}")
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        csv_rows = ["name,area,support_h,support_w"]
        for r in entries:
            fileio.write_pgm(os.path.join(args.out_dir, f"{r.name}_erf.pgm"), r.erf)
            sh, sw = (0, 0) if r.bbox is None else (r.bbox[4], r.bbox[5])
            csv_rows.append(f"{r.name},{r.area},{sh},{sw}")
        fileio._atomic_write(os.path.join(args.out_dir, "erf_ranking.csv"),
                             ("\n".join(csv_rows) + "\n").encode())
        print(f"heatmaps and ranking written to {args.out_dir}")
    return 0


# ----------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(
        prog="dcnet",
        description="Dual-encoder saliency network: training, merged "
                    "inference, auxiliary maps, metrics, ERF analysis.")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("aux", help="generate auxiliary maps from GT masks")
    sp.add_argument("--gt", required=True, help="directory of PGM masks")
    sp.add_argument("--out", required=True)
    sp.add_argument("--widths", default="1,2,3,4,5",
                    help="comma-separated edge widths")
    sp.set_defaults(fn=_cmd_aux)

    sp = sub.add_parser("train", help="train on PPM/PGM pairs or synthetic data")
    sp.add_argument("--data", help="directory of stem.ppm + stem.pgm pairs "
                                   "(omit for synthetic data)")
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--iters", type=int, default=200)
    sp.add_argument("--lr", type=float, default=0.01)
    sp.add_argument("--momentum", type=float, default=0.9)
    sp.add_argument("--weight-decay", type=float, default=1e-4)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--widths", default="16,32,64,128")
    sp.add_argument("--size", default="64x64")
    sp.add_argument("--synthetic", type=int, default=8,
                    help="synthetic sample count when --data is omitted")
    sp.set_defaults(fn=_cmd_train)

    sp = sub.add_parser("infer", help="predict saliency maps for PPM images")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--in", required=True, dest="in", metavar="DIR")
    sp.add_argument("--out", required=True)
    sp.add_argument("--merged", action="store_true",
                    help="run the merged inference graph")
    sp.set_defaults(fn=_cmd_infer)

    sp = sub.add_parser("merge", help="write the merged inference checkpoint")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=_cmd_merge)

    sp = sub.add_parser("verify", help="check merged-vs-unmerged equivalence")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--tol", type=float, default=1e-4,
                    help="end-to-end max-abs tolerance")
    sp.add_argument("--stage-tol", type=float, default=1e-5)
    sp.add_argument("--draws", type=int, default=5)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=_cmd_verify)

    sp = sub.add_parser("bench", help="time the four merge variants")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--repeats", type=int, default=5)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--csv", help="also write the table as CSV")
    sp.set_defaults(fn=_cmd_bench)

    sp = sub.add_parser("eval", help="run the metric suite on prediction/GT dirs")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--out", required=True, help="report file path")
    sp.set_defaults(fn=_cmd_eval)

    sp = sub.add_parser("erf", help="effective-receptive-field comparison")
    sp.add_argument("--block", choices=("resaspp2", "aspp", "both"),
                    default="both")
    sp.add_argument("--tau", type=float, default=0.01)
    sp.add_argument("--seeds", type=int, default=10)
    sp.add_argument("--c-in", type=int, default=16)
    sp.add_argument("--m", type=int, default=8)
    sp.add_argument("--c-out", type=int, default=16)
    sp.add_argument("--size", default="64x64")
    sp.add_argument("--out-dir", help="write PGM heatmaps and a CSV ranking")
    sp.set_defaults(fn=_cmd_erf)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError, TrainingDiverged, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def entry():
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    entry()
