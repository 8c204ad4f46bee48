"""Command-line workbench: synth, priors, train, eval, infer, metrics, describe.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from threadpoolctl import threadpool_limits

from . import config as config_mod
from .errors import ConfigError, DimensionError, UsageError
from .imageio import read_image, write_image

logger = logging.getLogger("uhddip")

OUTPUT_ENV = "UHDDIP_OUTPUT_DIR"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _default_out(name: str) -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "uhddip_out")) / name


def _resolve_config(args) -> config_mod.RunConfig:
    cfg = config_mod.load(args.config)
    config_mod.apply_overrides(cfg, args.set)
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
    return cfg


def _banner(args, cfg: Optional[config_mod.RunConfig], seed) -> None:
    logger.info("uhddip %s  seed=%s  threads=%s", args.command, seed, args.threads)
    if cfg is not None:
        for line in config_mod.dump(cfg).splitlines():
            logger.info("  %s", line)


# -- subcommands -------------------------------------------------------------

def cmd_describe(args) -> int:
    from .model import describe

    cfg = _resolve_config(args)
    _banner(args, cfg, cfg.train.seed)
    print(describe(cfg.net, args.size, args.size))
    return 0


def cmd_synth(args) -> int:
    from .synth import build_dataset, make_toy_clean_set

    _banner(args, None, args.seed)
    if args.n_train < 0 or args.n_test < 0:
        raise UsageError("split sizes must be non-negative")
    out = Path(args.out) if args.out else _default_out(f"{args.kind}_{args.seed}")
    clean = args.clean_dir
    if clean is None:
        clean = out / "clean"
        make_toy_clean_set(clean, args.n_train + args.n_test, args.size, args.seed)
    m = build_dataset(clean, out, args.n_train, args.n_test, args.kind, args.seed, threads=args.threads)
    print(f"{out}: {m.counts['train']} train, {m.counts['test']} test")
    return 0


def cmd_priors(args) -> int:
    from .priors import compute_priors

    _banner(args, None, None)
    img = read_image(args.input, channels=3)
    pri = compute_priors(img, args.normal_map, soft_edges=args.soft_edges)
    out = Path(args.out) if args.out else _default_out("priors")
    stem = Path(args.input).stem
    write_image(out / f"{stem}_normal.png", pri.normal)
    write_image(out / f"{stem}_gradient.png", pri.gradient)
    print(out)
    return 0


def cmd_train(args) -> int:
    from .train import load_pairs, save_trained, train

    cfg = _resolve_config(args)
    _banner(args, cfg, cfg.train.seed)
    pairs = load_pairs(args.data, "train")
    val = load_pairs(args.data, "test", limit=args.val) if args.val else []
    out = Path(args.out) if args.out else _default_out("train")
    out.mkdir(parents=True, exist_ok=True)
    result = train(pairs, cfg.net, cfg.train, val)
    save_trained(out / "model.ckpt", result, cfg.train)
    result.log.save(out / "train_log.csv")
    (out / "run.cfg").write_text(config_mod.dump(cfg))
    print(f"loss {result.initial_loss:.5f} -> {result.final_loss:.5f}; checkpoint {out / 'model.ckpt'}")
    return 0


def _emit(text: str, path) -> None:
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_eval(args) -> int:
    from .model import UHDDIP
    from .train import evaluate, load_pairs

    model, meta = UHDDIP.load(args.checkpoint)
    cfg = _resolve_config(args)
    _banner(args, cfg, meta.get("train", {}).get("seed"))
    pairs = load_pairs(args.data, args.split)
    report = evaluate(model, pairs, cfg.eval.tile, cfg.eval.overlap, baseline=args.baseline)
    _emit(report.to_csv(), args.out)
    return 0


def cmd_infer(args) -> int:
    from .metrics import psnr
    from .model import UHDDIP
    from .priors import compute_priors
    from .train import infer_arrays

    model, meta = UHDDIP.load(args.checkpoint)
    cfg = _resolve_config(args)
    _banner(args, cfg, meta.get("train", {}).get("seed"))
    img = read_image(args.input, channels=3)
    pri = compute_priors(img, args.normal_map)
    out = infer_arrays(model, img, pri.normal, pri.gradient, cfg.eval.tile, cfg.eval.overlap)
    write_image(args.output, out)
    if args.target:
        gt = read_image(args.target, channels=3)
        print(f"psnr input {psnr(img, gt):.3f} dB  restored {psnr(out, gt):.3f} dB")
    return 0


def _image_list(path) -> list[Path]:
    from .synth import list_images

    p = Path(path)
    return list_images(p) if p.is_dir() else [p]


def cmd_metrics(args) -> int:
    from .metrics import MetricReport

    _banner(args, None, None)
    restored, targets = _image_list(args.restored), _image_list(args.target)
    if len(restored) != len(targets):
        raise UsageError(f"{len(restored)} restored images but {len(targets)} targets")
    report = MetricReport()
    for r, t in zip(restored, targets):
        report.add(str(r), read_image(r, channels=3), read_image(t, channels=3))
    _emit(report.to_csv(), args.out)
    return 0


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--threads", type=int, default=1, help="worker/BLAS thread cap (results do not change)")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    cfg_args = _Parser(add_help=False)
    cfg_args.add_argument("--config", default=None, help="preset (default, full, desk) or config file path")
    cfg_args.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                          help="dot-path override, e.g. net.channels=8 (repeatable)")

    p = _Parser(prog="uhddip", description="Prior-guided UHD deraining/desnowing workbench")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("describe", parents=[common, cfg_args], help="parameter and MAC table")
    s.add_argument("--size", type=int, default=1024, help="square input size for cost accounting")
    s.set_defaults(func=cmd_describe)

    s = sub.add_parser("synth", parents=[common], help="synthesize a paired dataset")
    s.add_argument("--kind", choices=["rain", "snow"], required=True)
    s.add_argument("--n-train", type=int, required=True)
    s.add_argument("--n-test", type=int, required=True)
    s.add_argument("--seed", type=int, default=0, help="master seed")
    s.add_argument("--clean-dir", default=None, help="clean images; procedural toy images if omitted")
    s.add_argument("--size", type=int, default=128, help="toy clean image size")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("priors", parents=[common], help="compute normal and gradient priors")
    s.add_argument("--input", required=True)
    s.add_argument("--normal-map", default=None, help="externally estimated normal map")
    s.add_argument("--soft-edges", action="store_true")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_priors)

    s = sub.add_parser("train", parents=[common, cfg_args], help="train on a synthesized dataset")
    s.add_argument("--data", required=True, help="dataset directory with manifest.json")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--val", type=int, default=0, help="held-out pairs for psnr_val logging")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common, cfg_args], help="PSNR/SSIM of a checkpoint on a split")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--split", choices=["train", "test"], default="test")
    s.add_argument("--baseline", action="store_true", help="score the degraded inputs instead")
    s.add_argument("--out", default=None, help="CSV path (stdout if omitted)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("infer", parents=[common, cfg_args], help="restore one image")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--normal-map", default=None)
    s.add_argument("--target", default=None, help="ground truth for a PSNR printout")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("metrics", parents=[common], help="PSNR/SSIM CSV for image pairs")
    s.add_argument("--restored", required=True, help="image or directory")
    s.add_argument("--target", required=True, help="image or directory")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_metrics)
    return p


def run(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"uhddip: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.threads < 1:
        print("uhddip: --threads must be >= 1", file=sys.stderr)
        return 1
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except (UsageError, ConfigError, DimensionError) as exc:
        print(f"uhddip: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - top-level reporter
        logger.debug("failure", exc_info=True)
        print(f"uhddip: error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
