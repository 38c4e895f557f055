"""Command-line surface: train, degrade, restore, eval-psnr, sample,
sanity, gen-data.

Exit codes: 0 success, 2 usage error, 1 runtime error. All randomness is
derived from --seed, so identical invocations produce identical files.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import degrade as dg
from .distributions import make_rng
from .io.checkpoint import load_checkpoint
from .io.config import read_config_file
from .io.idx import IMAGE_MAGIC, pad_images, read_idx
from .io.pnm import read_pnm, write_pnm
from .metrics import psnr
from .restoration import RestorationProblem, Schedule, coarse_to_fine_optimize
from .tiler import plan, restore_tiled
from .toydata import SpriteSpec, generate
from .training import to_model_range, to_pixels, train


def _load_dataset(path: str, image_size: int) -> np.ndarray:
    """IDX file or a directory of .pgm/.ppm images; smaller images are
    zero-padded up to the configured size."""
    if os.path.isdir(path):
        names = sorted(n for n in os.listdir(path)
                       if n.endswith((".pgm", ".ppm")))
        if not names:
            raise FileNotFoundError(f"no .pgm/.ppm images in {path}")
        images = np.stack([read_pnm(os.path.join(path, n)) for n in names])
    else:
        with open(path, "rb") as f:
            head = int.from_bytes(f.read(4), "big")
        if head != IMAGE_MAGIC:
            raise ValueError(f"{path}: not an IDX image file or image directory")
        images = read_idx(path)
    if images.shape[2] != image_size or images.shape[3] != image_size:
        images = pad_images(images, image_size)
    return images


def _read_image(path: str) -> np.ndarray:
    return read_pnm(path)


def _cmd_train(args) -> int:
    cfg = read_config_file(args.config)
    images = _load_dataset(args.data, cfg.image_size)
    model = cfg.build_model()
    metrics = args.metrics or (args.out + ".metrics.csv")
    train(model, images, cfg, metrics_path=metrics, ckpt_path=args.out)
    print(f"trained {cfg.total_steps} steps -> {args.out}")
    return 0


def _cmd_degrade(args) -> int:
    img = _read_image(args.infile)
    ds = dg.parse_spec(args.degrade)
    out, mask = dg.compose(ds, img, make_rng(args.seed, "degrade"))
    write_pnm(args.out, out)
    if args.mask:
        write_pnm(args.mask, mask[0] * 255.0)
    return 0


def _cmd_restore(args) -> int:
    model, cfg, _, _ = load_checkpoint(args.ckpt)
    img = _read_image(args.infile)
    c, ph, pw = model.in_shape
    if img.shape[0] != c:
        raise ValueError(f"image has {img.shape[0]} channels, model wants {c}")
    if args.mask:
        mask = (_read_image(args.mask) > 127.5).astype(np.float64)
        if mask.shape[0] == 1 and c > 1:
            mask = np.repeat(mask, c, axis=0)
    else:
        mask = np.ones_like(img)
    if args.schedule:
        schedule = Schedule.parse(args.schedule, eta=args.eta)
    else:
        schedule = Schedule.sprites_default(model.levels)
        schedule.eta = args.eta
    init = "base_mean" if args.init == "base-mean" else "encode"
    problem = RestorationProblem(to_model_range(img)[None], mask[None], args.lam)
    patch = args.patch or ph
    if patch != ph:
        raise ValueError(f"--patch {patch} does not match the model's {ph}")
    _, _, h, w = problem.degraded.shape
    if (h, w) == (ph, pw):
        res = coarse_to_fine_optimize(model, problem, schedule,
                                      seed=args.seed, init=init)
        restored, trace = res.image, res.trace
    else:
        grid = plan(h, w, patch=patch, margin=args.margin)
        tiled = restore_tiled(model, problem, schedule, grid,
                              seed=args.seed, init=init)
        restored, trace = tiled.image, []
        for idx, reason in tiled.failures:
            print(f"tile {idx} failed: {reason}", file=sys.stderr)
    write_pnm(args.out, to_pixels(restored[0]))
    if args.trace:
        with open(args.trace, "w", encoding="utf-8") as f:
            f.write(f"# schedule={schedule.format()} lambda={args.lam:g} "
                    f"eta={schedule.eta:g}\n")
            f.write("step,stage,objective,data_term,neg_log_prior\n")
            for row in trace:
                f.write(",".join(f"{v:.6g}" if i >= 2 else str(v)
                                 for i, v in enumerate(row)) + "\n")
    return 0


def _cmd_eval_psnr(args) -> int:
    a, b = _read_image(args.a), _read_image(args.b)
    print(f"{psnr(a, b):.2f}")
    return 0


def _cmd_sample(args) -> int:
    model, _, _, _ = load_checkpoint(args.ckpt)
    img = model.sample(make_rng(args.seed, "sample"), 1)
    write_pnm(args.out, to_pixels(img[0]))
    return 0


def _cmd_gen_data(args) -> int:
    spec = SpriteSpec(size=args.size, channels=args.channels, seed=args.seed)
    train_set, test_set = generate(spec, args.n)
    os.makedirs(args.out, exist_ok=True)
    ext = ".pgm" if args.channels == 1 else ".ppm"
    for name, block in (("train", train_set), ("test", test_set)):
        for i, img in enumerate(block):
            write_pnm(os.path.join(args.out, f"{name}_{i:05d}{ext}"), img)
    print(f"wrote {len(train_set)} train / {len(test_set)} test images to {args.out}")
    return 0


def _cmd_sanity(args) -> int:
    from .sanity import run_sanity
    return run_sanity()


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowprior",
                                description="normalizing-flow image prior toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a prior from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True,
                   help="IDX file or a directory of .pgm/.ppm images")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--metrics", help="metrics CSV (default: <out>.metrics.csv)")
    t.set_defaults(func=_cmd_train)

    d = sub.add_parser("degrade", help="apply synthetic degradations")
    d.add_argument("--in", dest="infile", required=True)
    d.add_argument("--degrade", required=True,
                   help="e.g. 'gauss:30+mask:6x10+dct:10'")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)
    d.add_argument("--mask", help="write the validity mask here (P5)")
    d.set_defaults(func=_cmd_degrade)

    r = sub.add_parser("restore", help="MAP restoration with a trained prior")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--in", dest="infile", required=True)
    r.add_argument("--mask")
    r.add_argument("--lambda", dest="lam", type=float, default=99.0)
    r.add_argument("--schedule", help="per-stage steps + final, e.g. '50,50,50+150'")
    r.add_argument("--eta", type=float, default=1.0)
    r.add_argument("--init", choices=["encode", "base-mean"], default="encode")
    r.add_argument("--patch", type=int)
    r.add_argument("--margin", type=int, default=4)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True)
    r.add_argument("--trace", help="objective trace CSV")
    r.set_defaults(func=_cmd_restore)

    e = sub.add_parser("eval-psnr", help="PSNR between two images")
    e.add_argument("a")
    e.add_argument("b")
    e.set_defaults(func=_cmd_eval_psnr)

    s = sub.add_parser("sample", help="draw an image from a trained prior")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_sample)

    g = sub.add_parser("gen-data", help="generate the synthetic sprite dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--channels", type=int, default=3)
    g.set_defaults(func=_cmd_gen_data)

    y = sub.add_parser("sanity", help="run the quick invariant suite")
    y.set_defaults(func=_cmd_sanity)
    return p


def cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - single CLI error boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    from ._perf import enable_heap_reuse
    enable_heap_reuse()
    sys.exit(cli())


if __name__ == "__main__":
    main()
