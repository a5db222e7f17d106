"""``protosanity`` command line.

Exit codes: 0 on success, 1 on internal or numeric failure, 2 on bad usage or
bad input files.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .bundle import file_digest
from .data import generate_to_disk, read_manifest
from .errors import BundleError, InvalidArgumentError, ProtoSanityError
from .pipeline import (
    RunConfig,
    merge_reports,
    run_eval,
    run_explain,
    save_training,
    train_from_manifest,
    write_report,
)
from .saliency import METHODS

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("protosanity")


def _methods(text):
    names = [m.strip() for m in text.split(",") if m.strip()]
    bad = [m for m in names if m not in METHODS]
    if bad or not names:
        raise argparse.ArgumentTypeError(
            f"unknown saliency method(s) {', '.join(bad) or '(none)'}; valid methods: {', '.join(METHODS)}"
        )
    return names


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _global_flags(parser, suppress):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--seed", type=int, default=default, help="master seed (overrides the config file)")
    parser.add_argument("--config", type=Path, default=default, help="JSON run config to start from")
    parser.add_argument("--jobs", type=_positive_int, default=argparse.SUPPRESS if suppress else 1, help="worker processes")
    parser.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser():
    parser = argparse.ArgumentParser(prog="protosanity", description="Sanity checks for prototype-part explanations.")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        _global_flags(p, suppress=True)
        return p

    p = add("gen-synth", "write the planted-glyph dataset with segmentation masks")
    p.add_argument("out_dir", type=Path)
    p.add_argument("--num-classes", type=int, dest="num_classes")
    p.add_argument("--train", type=int, dest="n_train")
    p.add_argument("--test", type=int, dest="n_test")
    p.add_argument("--size", type=int)
    p.add_argument("--placement", choices=("uniform", "border"))
    p.add_argument("--margin", type=int)

    p = add("train", "train and project a model; writes model.psan and train_log.txt")
    p.add_argument("manifest", type=Path)
    p.add_argument("--out", type=Path, required=True, dest="out_dir")
    p.add_argument("--similarity", choices=("prototree", "protopnet"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--prototypes-per-class", type=int, dest="prototypes_per_class")
    p.add_argument("--learning-rate", type=float, dest="learning_rate")

    for name, help_text in (
        ("explain", "write saliency maps, part crops and overlays"),
        ("eval", "deletion curves, AUDC, effective RF and relevance"),
    ):
        p = add(name, help_text)
        p.add_argument("bundle", type=Path)
        p.add_argument("manifest", type=Path)
        p.add_argument("--out", type=Path, required=True, dest="out_dir")
        p.add_argument("--methods", type=_methods, help=f"comma-separated subset of: {', '.join(METHODS)}")
        p.add_argument("--max-test-images", type=int, dest="max_test_images")
        p.add_argument("--patches-per-image", type=int, dest="patches_per_image")
        p.add_argument("--smoothgrad-samples", type=int, dest="smoothgrad_samples")
        if name == "explain":
            p.add_argument("--scope", choices=("prototypes", "test"))
        else:
            p.add_argument("--a-max", type=float, dest="a_max")
            p.add_argument("--no-prototypes", action="store_false", dest="include_prototypes", default=None)

    p = add("report", "merge the summaries of finished eval runs")
    p.add_argument("run_dirs", type=Path, nargs="+")
    p.add_argument("--out", type=Path, dest="out_file", help="CSV path (default: stdout)")
    return parser


_CONFIG_KEYS = (
    "num_classes",
    "n_train",
    "n_test",
    "size",
    "placement",
    "margin",
    "similarity",
    "epochs",
    "prototypes_per_class",
    "learning_rate",
    "methods",
    "max_test_images",
    "patches_per_image",
    "smoothgrad_samples",
    "scope",
    "a_max",
    "include_prototypes",
)


def resolve_config(args):
    """Defaults, then ``--config``, then explicit flags."""
    config = RunConfig.read(args.config) if args.config is not None else RunConfig()
    changes = {k: getattr(args, k) for k in _CONFIG_KEYS if getattr(args, k, None) is not None}
    if args.seed is not None:
        changes["seed"] = args.seed
    return config.replace(**changes) if changes else config


def cmd_gen_synth(args, config):
    out = args.out_dir
    manifest = generate_to_disk(
        out,
        num_classes=config.num_classes,
        train=config.n_train,
        test=config.n_test,
        size=config.size,
        seed=config.seed,
        placement=config.placement,
        margin=config.margin,
    )
    config.replace(input_shape=[3, config.size, config.size], output_dir=str(out)).write(out)
    print(manifest)


def cmd_train(args, config):
    manifest = read_manifest(args.manifest)
    digest = file_digest(args.manifest)
    config = config.replace(input_shape=list(manifest.geometry), output_dir=str(args.out_dir))
    model, losses, scores = train_from_manifest(manifest, config)
    for i, loss in enumerate(losses):
        log.info("epoch %d loss %.6f", i + 1, loss)
    bundle = save_training(model, losses, scores, config, args.out_dir)
    if file_digest(args.manifest) != digest:
        raise ProtoSanityError(f"manifest {args.manifest} changed during training")
    msg = f"test accuracy {scores['test_accuracy']:.4f}" if scores["test_accuracy"] is not None else "no test split"
    print(f"{bundle} ({msg})")


def cmd_explain(args, config):
    rows = run_explain(args.bundle, args.manifest, config, args.out_dir, jobs=args.jobs)
    print(f"{len(rows)} patches written to {args.out_dir}")


def cmd_eval(args, config):
    records = run_eval(args.bundle, args.manifest, config, args.out_dir, jobs=args.jobs)
    print(f"{len(records)} evaluations written to {args.out_dir}")


def cmd_report(args, config):
    rows = merge_reports(args.run_dirs)
    if args.out_file is None:
        write_report(sys.stdout, rows)
    else:
        write_report(args.out_file, rows)


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "train": cmd_train,
    "explain": cmd_explain,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        config = resolve_config(args)
        COMMANDS[args.command](args, config)
    except (InvalidArgumentError, BundleError, FileNotFoundError) as exc:
        print(f"protosanity {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ProtoSanityError, ArithmeticError, FloatingPointError, OSError) as exc:
        print(f"protosanity {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001 - last-resort guard for the exit-code contract
        print(f"protosanity {args.command}: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
