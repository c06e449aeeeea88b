"""Command-line entry point.

Exit status: 0 on success, 1 for invalid input or configuration (including
missing prerequisites such as an unbuilt codebook), 2 for failures at run time.
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import ENV_PREFIX, ConfigError, load_config, parse_overrides

logger = logging.getLogger("lesion_synth")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
VALIDATION_ERRORS = (ConfigError, ValueError, LookupError, FileNotFoundError)


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; usage errors are validation errors here."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-key override, e.g. var.depth=6 (repeatable)")
    common.add_argument("--out", default=".", metavar="DIR",
                        help="workspace root holding the dataset and runs/ (default: .)")
    common.add_argument("-q", "--quiet", action="store_true")

    parser = _Parser(prog="lesion-synth", description=(
        "Lesion-focused multi-scale VQ tokenizer and measurement-conditioned next-scale "
        f"generator. Environment overrides use {ENV_PREFIX}SECTION__KEY=value."))
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.add_parser("prepare-data", parents=[common], help="ingest image/mask/label directories")
    sub.add_parser("make-toy", parents=[common], help="generate the synthetic toy dataset")
    sub.add_parser("train-vqvae", parents=[common], help="train the multi-scale tokenizer")
    sub.add_parser("train-var", parents=[common], help="train the next-scale generator")
    sub.add_parser("build-codebook", parents=[common], help="rebuild the class-average measurement codebook")
    gen = sub.add_parser("generate", parents=[common], help="synthesize images")
    gen.add_argument("--mode", choices=("intra", "inter"), default="intra")
    gen.add_argument("--class", dest="class_id", type=int, help="only this class id")
    gen.add_argument("--n", type=int, help="images per class (default: evaluation.samples_per_class)")
    sub.add_parser("evaluate", parents=[common], help="FID / IS / FID matrix / recall reports")
    sub.add_parser("ablate", parents=[common], help="run the four ablation settings")
    return parser


def _run(args):
    cfg = load_config(args.config, parse_overrides(args.overrides), args.seed)
    out = args.out
    cmd = args.command
    if cmd == "prepare-data":
        manifest, report = pipeline.prepare_data(cfg, out)
        print(f"ingested {len(manifest)} samples, skipped {len(report.skipped)}")
    elif cmd == "make-toy":
        manifest = pipeline.make_toy(cfg, out)
        print(f"wrote {len(manifest)} toy samples to {pipeline.Workspace(cfg, out).data_dir}")
    elif cmd == "train-vqvae":
        tok = pipeline.train_tokenizer(cfg, out)
        print(f"tokenizer trained: final pixel loss {tok.history_[-1]['pixel']:.5f}")
    elif cmd == "train-var":
        var = pipeline.train_var(cfg, out)
        print(f"VAR trained: final cross-entropy {var.history_[-1]['cross_entropy']:.4f}")
    elif cmd == "build-codebook":
        cb = pipeline.build_codebook(cfg, out)
        print(f"codebook counts: {dict(zip(cb.class_names, cb.counts_.tolist()))}")
    elif cmd == "generate":
        images, _ = pipeline.generate(cfg, out, args.mode, args.class_id, args.n)
        print(f"generated {len(images)} images")
    elif cmd == "evaluate":
        res = pipeline.evaluate(cfg, out)
        print(f"FID {res['fid_overall']:.4f} (noise reference {res['fid_noise']:.4f}), "
              f"IS {res['is_overall'][0]:.3f} ± {res['is_overall'][1]:.3f}")
    elif cmd == "ablate":
        results, _ = pipeline.ablate(cfg, out)
        failed = [k for k, v in results.items() if "failed" in v]
        print(f"ablation finished; failed settings: {failed or 'none'}")
        if failed:
            return EXIT_RUNTIME
    print(f"run directory: {pipeline.Workspace(cfg, out).run_dir}")
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        logger.debug("run failed", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
