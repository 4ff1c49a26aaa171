"""Command-line entry point: ``sadcnn <subcommand> ...``.

Every subcommand is a thin wrapper around a library call. Exit codes: 0 on
success, 1 when a verification fails (gradcheck, divergence), 2 for usage or
input errors.
"""

import argparse
import logging
import os
import sys

import numpy as np

from . import kernels
from .config import PROFILES, TrainConfig, format_config, load_config, profile
from .halftone import error_diffuse_fs, to_grayscale
from .imageio import load_gray, read_image, write_image

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("sadcnn")


class UsageError(Exception):
    pass


def _config_flags(parser):
    """One ``--name`` override flag per TrainConfig field (spec fields flattened)."""
    group = parser.add_argument_group("config overrides")
    for key, value in TrainConfig().as_dict().items():
        flag = "--" + key.replace("_", "-")
        if isinstance(value, bool):
            group.add_argument(flag, dest=f"cfg_{key}", action=argparse.BooleanOptionalAction, default=None)
        else:
            group.add_argument(flag, dest=f"cfg_{key}", type=type(value), default=None, metavar=key.upper())
    parser.add_argument("--profile", choices=sorted(PROFILES), default="desk")
    parser.add_argument("--config", help="flat key = value file applied on top of the profile")
    parser.add_argument("--print-config", action="store_true", help="print the effective config and exit")


def resolve_config(args):
    """Profile, then config file, then command-line flags."""
    config = profile(args.profile)
    if args.config:
        config = load_config(args.config, config)
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return config.replace(**overrides) if overrides else config


def _cmd_halftone(args):
    gray = to_grayscale(read_image(args.input))
    write_image(args.output, error_diffuse_fs(gray, args.serpentine))
    return EXIT_OK


def _cmd_train(args):
    from .dataset import ingest_corpus
    from .trainer import TrainingDiverged, train

    config = resolve_config(args)
    if args.print_config:
        sys.stdout.write(format_config(config))
        return EXIT_OK
    if not args.corpus or not args.out:
        raise UsageError("train needs --corpus and --out")
    if not os.path.isdir(args.corpus):
        raise UsageError(f"corpus directory not found: {args.corpus}")
    corpus = ingest_corpus(args.corpus, config.serpentine)
    log.info("training on %d images, %d steps", len(corpus), config.total_steps)
    try:
        ckpt = train(config, corpus, out=args.out, resume=args.resume, log_path=args.log)
    except TrainingDiverged as exc:
        print(f"error: {exc}; saved to {args.out}", file=sys.stderr)
        return EXIT_FAIL
    print(f"wrote {args.out} (stage {ckpt.stage_name}, step {ckpt.step})")
    return EXIT_OK


def _cmd_infer(args):
    from .network import load_checkpoint

    ckpt = load_checkpoint(args.ckpt)
    initial, smap, final = ckpt.net.reconstruct(load_gray(args.input))
    write_image(args.output, np.clip(final, 0.0, 1.0))
    for path, image, name in ((args.dump_initial, initial, "initial estimate"),
                              (args.dump_structure_map, smap, "structure map")):
        if path is None:
            continue
        if image is None:
            raise UsageError(f"checkpoint has no {name} (baseline network)")
        write_image(path, np.clip(image, 0.0, 1.0))
    return EXIT_OK


def _write_report(path, report):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(report.to_csv() if path.lower().endswith(".csv") else report.to_text())


def _cmd_eval(args):
    from .trainer import REFERENCE_MODELS, evaluate

    if args.ckpt not in REFERENCE_MODELS and not os.path.isfile(args.ckpt):
        raise UsageError(f"checkpoint not found: {args.ckpt}")
    if not os.path.isdir(args.test):
        raise UsageError(f"test directory not found: {args.test}")
    report = evaluate(args.ckpt, args.test, serpentine=args.serpentine, label=args.ckpt)
    sys.stdout.write(report.to_text())
    if args.report:
        _write_report(args.report, report)
    return EXIT_OK


def _cmd_ablate(args):
    from .dataset import ingest_corpus
    from .trainer import run_ablation

    config = resolve_config(args)
    if args.print_config:
        sys.stdout.write(format_config(config))
        return EXIT_OK
    for flag, path in (("--corpus", args.corpus), ("--test", args.test)):
        if not path or not os.path.isdir(path):
            raise UsageError(f"{flag} directory not found: {path}")
    corpus = ingest_corpus(args.corpus, config.serpentine)
    report = run_ablation(config, corpus, args.test, out_dir=args.out_dir)
    sys.stdout.write(report.to_text())
    if args.report:
        _write_report(args.report, report)
    return EXIT_OK


def _cmd_gradcheck(args):
    from .network import GRADCHECK_TOL, gradient_checks

    results = gradient_checks(full=args.full, h=args.h, seed=args.seed)
    ok = True
    for name, err in results:
        passed = err < GRADCHECK_TOL
        ok = ok and passed
        print(f"{name:<18} max rel err {err:.3e}  {'ok' if passed else 'FAIL'}")
    print("gradcheck passed" if ok else f"gradcheck FAILED (tolerance {GRADCHECK_TOL:g})")
    return EXIT_OK if ok else EXIT_FAIL


def build_parser():
    parser = argparse.ArgumentParser(prog="sadcnn", description="Structure-aware inverse halftoning.")
    parser.add_argument("--threads", type=int, default=None,
                        help="thread cap for BLAS and compiled loops (default: $HTF_THREADS)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("halftone", help="grayscale-convert and error-diffuse an image")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--serpentine", action="store_true")
    p.set_defaults(func=_cmd_halftone)

    p = sub.add_parser("train", help="pretrain the IRS, then train end to end")
    p.add_argument("--corpus")
    p.add_argument("--out")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--log", help="per-step loss CSV")
    _config_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("infer", help="reconstruct a continuous-tone image from a halftone")
    p.add_argument("--ckpt", required=True)
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--dump-structure-map", metavar="PATH")
    p.add_argument("--dump-initial", metavar="PATH")
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("eval", help="PSNR/SSIM report over a test directory")
    p.add_argument("--ckpt", required=True, help="checkpoint path, or one of: oracle, halftone, gaussian")
    p.add_argument("--test", required=True)
    p.add_argument("--report", help="output file; CSV when it ends in .csv, else a text table")
    p.add_argument("--serpentine", action="store_true")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="structure-aware net vs plain DCNN on one budget")
    p.add_argument("--corpus")
    p.add_argument("--test")
    p.add_argument("--report")
    p.add_argument("--out-dir", help="where to keep both checkpoints")
    _config_flags(p)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    p.add_argument("--full", action="store_true", help="include the whole-network check")
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gradcheck)
    return parser


def _thread_cap(args):
    if args.threads is not None:
        return args.threads
    env = os.environ.get("HTF_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"HTF_THREADS must be an integer, got {env!r}") from None
    return None


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        threads = _thread_cap(args)
        if threads is not None:
            if threads < 1:
                raise UsageError(f"--threads must be >= 1, got {threads}")
            kernels.set_num_threads(threads)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
