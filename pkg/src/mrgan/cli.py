"""Command-line entry point.

Exit status: 0 on success, 2 when a training run diverges, 1 on any other error.
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import models as M
from .config import parse_config
from .data import load_corpus, save_image
from .metrics import CSV_HEADER, evaluate_generated, latent_interpolate, pca_fit
from .optim import DivergenceError
from .train import (generate, load_generator, make_corpus, sample_latent, tile, train_gan, train_progressive,
                    train_segmentation)

EXIT_OK, EXIT_ERROR, EXIT_DIVERGED = 0, 1, 2


def _counts_line(model):
    total, trainable = model.count_params()
    return f"total {total:,} / trainable {trainable:,}"


def cmd_params(args):
    if args.arch == "unet":
        m = M.build_unet(args.filters, args.bn, input_res=args.res or 128)
        print(_counts_line(m))
        return EXIT_OK
    g, d = M.canonical(args.arch)
    print(f"generator: {_counts_line(g)}")
    print(f"discriminator: {_counts_line(d)}")
    return EXIT_OK


def cmd_shapes(args):
    nets = M.canonical(args.arch)
    titles = ["U-net"] if args.arch == "unet" else ["generator", "discriminator"]
    for title, net in zip(titles, nets):
        print(f"# {args.arch} {title}")
        print(net.dump())
    return EXIT_OK


def _overrides(args):
    return {"seed": args.seed} if getattr(args, "seed", None) is not None else None


def _finish(report):
    print(f"{report.status}: {report.steps} steps, output in {report.output_dir}")
    for k, v in sorted(report.metrics.items()):
        print(f"  {k} = {v}")
    return EXIT_DIVERGED if report.status == "diverged" else EXIT_OK


def cmd_train_seg(args):
    return _finish(train_segmentation(parse_config(args.config, _overrides(args))))


def cmd_train_gan(args):
    return _finish(train_gan(parse_config(args.config, _overrides(args)), resume=args.resume))


def cmd_train_progan(args):
    return _finish(train_progressive(parse_config(args.config, _overrides(args))))


def cmd_evaluate(args):
    t0 = time.perf_counter()
    g, cfg = load_generator(args.checkpoint)
    corpus = make_corpus(cfg, (-1.0, 1.0)) if args.corpus == "synthetic" else load_corpus(args.corpus)
    if len(corpus) < 16:
        raise ValueError(f"corpus has {len(corpus)} images; at least 16 are needed for the eigenbasis")
    res = g.forward_shapes()[-1][1][-1]
    if corpus.resolution != res:
        raise ValueError(f"corpus resolution {corpus.resolution} differs from generator output {res}")
    basis = pca_fit(corpus.flat(), 16)
    n = args.n or cfg["eval.n_generate"] or len(corpus)
    seed = args.seed if args.seed is not None else cfg["seed"]
    z = sample_latent(np.random.default_rng(seed), n, cfg["model.latent"], cfg["train.latent"])
    imgs = generate(g, z).reshape(n, -1)
    report = evaluate_generated(basis, imgs, time.perf_counter() - t0)
    row = report.csv_row(Path(args.checkpoint).stem)
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name("benchmark.csv")
    new = not out.exists()
    with out.open("a") as f:
        if new:
            f.write(CSV_HEADER + "\n")
        f.write(row + "\n")
    print(CSV_HEADER)
    print(row)
    return EXIT_OK


def cmd_interpolate(args):
    g, cfg = load_generator(args.checkpoint)
    seed = args.seed if args.seed is not None else cfg["seed"]
    rng = np.random.default_rng(seed)
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name("interpolations")
    out.mkdir(parents=True, exist_ok=True)
    renorm = cfg["train.latent"] == "normal_normalized"
    for p in range(args.pairs):
        z = sample_latent(rng, 2, cfg["model.latent"], cfg["train.latent"])
        seq = latent_interpolate(g, z[0], z[1], args.steps, renormalize=renorm)
        for s, im in enumerate(seq):
            save_image(im, out / f"pair{p:02d}_step{s:02d}.pgm", (-1.0, 1.0))
        save_image(tile(seq, args.steps), out / f"pair{p:02d}.pgm", (-1.0, 1.0))
    print(f"wrote {args.pairs} interpolation rows of {args.steps} images to {out}")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    """Usage errors exit 1; status 2 is reserved for divergence."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the configured seed")
    p = _Parser(prog="mrgan", description="Train and evaluate U-net and GAN models.", parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train-seg", parents=[common], help="train a U-net segmentation model")
    s.add_argument("config")
    s.set_defaults(func=cmd_train_seg)

    s = sub.add_parser("train-gan", parents=[common], help="train a DCGAN or SRResGAN")
    s.add_argument("config")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.set_defaults(func=cmd_train_gan)

    s = sub.add_parser("train-progan", parents=[common], help="train a progressively grown GAN")
    s.add_argument("config")
    s.set_defaults(func=cmd_train_progan)

    s = sub.add_parser("evaluate", parents=[common], help="rho/sigma/delta of a generator checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("corpus", help="PGM directory, manifest file, or 'synthetic' for the run's own corpus")
    s.add_argument("--n", type=int, default=0, help="images to generate (default: corpus size)")
    s.add_argument("--out", help="CSV file to append the report row to")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("interpolate", parents=[common], help="latent interpolation rows as PGM files")
    s.add_argument("checkpoint")
    s.add_argument("--pairs", type=int, default=4)
    s.add_argument("--steps", type=int, default=6)
    s.add_argument("--out", help="output directory")
    s.set_defaults(func=cmd_interpolate)

    s = sub.add_parser("params", parents=[common], help="parameter counts of an architecture")
    s.add_argument("arch", choices=M.ARCHITECTURES)
    s.add_argument("--filters", type=int, default=32, help="U-net base filter count")
    s.add_argument("--bn", dest="bn", action="store_true", default=True)
    s.add_argument("--no-bn", dest="bn", action="store_false")
    s.add_argument("--res", type=int, default=0, help="U-net input resolution (counts do not depend on it)")
    s.set_defaults(func=cmd_params)

    s = sub.add_parser("shapes", parents=[common], help="print the layer table of an architecture")
    s.add_argument("arch", choices=M.ARCHITECTURES)
    s.set_defaults(func=cmd_shapes)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    if not hasattr(args, "seed"):
        args.seed = None
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except Exception as exc:  # noqa: BLE001 - report, then exit non-zero
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
