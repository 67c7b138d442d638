"""Command-line front end.

Exit status: 0 on success, 1 on a runtime failure (message on stderr),
2 on a usage error (usage on stderr). ``LUDVISION_THREADS`` caps the number
of worker threads used by ``align`` and ``eval``.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import Sequence

from . import alignment, checkpoint, metrics, overlay, raster, spectra, training
from .config import RunConfig
from .errors import LudvisionError
from .model import predict_mask

log = logging.getLogger("ludvision")


def worker_count() -> int:
    n = os.cpu_count() or 1
    cap = os.environ.get("LUDVISION_THREADS")
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise LudvisionError(f"LUDVISION_THREADS must be an integer, got {cap!r}") from None
    return n


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _trim(text: str):
    """``WxH`` centered window, ``x,y,w,h`` explicit rectangle, or ``none``."""
    if text.lower() == "none":
        return "none"
    try:
        if "x" in text:
            w, h = (int(v) for v in text.lower().split("x"))
            return (w, h)
        x, y, w, h = (int(v) for v in text.split(","))
        return raster.Rect(x, y, w, h)
    except (ValueError, LudvisionError):
        raise argparse.ArgumentTypeError(f"bad trim {text!r}; use WxH, x,y,w,h or none") from None


def _write_text(path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# subcommands


def cmd_align(args) -> int:
    bands = raster.read_capture(args.capture)
    names = [b.bands[0].name for b in bands]
    if args.ref not in names:
        raise LudvisionError(f"reference band {args.ref!r} not in capture {names}")
    h, w = bands[0].data.shape[1:]
    if args.trim == "none":
        rect = raster.Rect(0, 0, w, h)
    elif isinstance(args.trim, tuple):
        rect = raster.Rect.centered(w, h, *args.trim)
    else:
        rect = args.trim
    cfg = alignment.RansacConfig(args.max_iters, args.threshold, args.min_inliers, args.seed)
    stacked = alignment.align_and_stack(
        bands, names.index(args.ref), cfg, rect, args.grid_step, args.window,
        args.search_radius, worker_count(),
    )
    raster.write_raster(stacked, args.out)
    return 0


def cmd_signatures(args) -> int:
    image = raster.read_raster(args.image)
    # annotation masks may carry any 8-bit class code, not just the model's labels
    mask = raster.read_mask(args.mask, allowed=None)
    table = spectra.signature_table(image, mask, args.classes)
    _write_text(args.out, spectra.signatures_to_csv(table))
    print("mean reflectance (%), population std in CSV")
    print(spectra.percent_table(table))
    return 0


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    manifest = args.manifest or cfg.manifest
    if not manifest:
        raise LudvisionError("no manifest given (config key 'manifest' or --manifest)")
    if args.manifest is None and not os.path.isabs(manifest):
        manifest = os.path.join(os.path.dirname(os.path.abspath(args.config)), manifest)
    train_s, val_s = training.split_samples(training.read_manifest(manifest), cfg.val_fraction)
    log.info("%d training / %d validation samples", len(train_s), len(val_s))
    model, _ = training.fit(cfg, training.load_pairs(train_s), training.load_pairs(val_s),
                            worker_count())
    checkpoint.save_checkpoint(model, args.out)
    return 0


def cmd_eval(args) -> int:
    samples = training.read_manifest(args.manifest)
    model = checkpoint.load_checkpoint(args.checkpoint) if args.checkpoint else None
    num_classes = model.config.num_classes if model else args.num_classes
    workers = worker_count()

    def pair(s):
        gt = raster.read_mask(s.mask)
        if model is not None:
            if not s.image:
                raise LudvisionError(f"manifest row for {s.mask} has no image")
            pred = predict_mask(model, raster.read_raster(s.image), args.tile, args.overlap)
        else:
            if not s.pred:
                raise LudvisionError(f"manifest row for {s.mask} has no pred (or pass --checkpoint)")
            pred = raster.read_mask(s.pred)
        return pred, gt, s.group

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            pairs = list(pool.map(pair, samples))
    else:
        pairs = [pair(s) for s in samples]
    report = metrics.evaluation_report(pairs, args.classes, num_classes)
    _write_text(args.out, report.to_csv())
    log.info("confusion counts pooled per group (%s averaging)", report.averaging)
    return 0


def cmd_predict(args) -> int:
    model = checkpoint.load_checkpoint(args.checkpoint)
    image = raster.read_raster(args.image)
    raster.write_mask(predict_mask(model, image, args.tile, args.overlap), args.out)
    return 0


def cmd_overlay(args) -> int:
    image = raster.read_raster(args.image)
    mask = raster.read_mask(args.mask)
    overlay.write_rgb(overlay.overlay(image, mask, args.alpha), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ludvision", description="Multispectral ludwigia mapping pipeline.")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    a = sub.add_parser("align", help="register and stack a 5-band capture")
    a.add_argument("--capture", required=True, help="directory with b/g/r/re/nir.lms")
    a.add_argument("--out", required=True)
    a.add_argument("--ref", default="G", help="reference band name (default G)")
    a.add_argument("--trim", type=_trim, default=alignment.DEFAULT_TRIM,
                   help="WxH centered window, x,y,w,h, or none (default 1400x1100)")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--grid-step", type=int, default=64)
    a.add_argument("--window", type=int, default=21)
    a.add_argument("--search-radius", type=int, default=16)
    a.add_argument("--max-iters", type=int, default=2000)
    a.add_argument("--threshold", type=float, default=1.5)
    a.add_argument("--min-inliers", type=int, default=12)
    a.set_defaults(func=cmd_align)

    s = sub.add_parser("signatures", help="per-class reflectance statistics")
    s.add_argument("--image", required=True)
    s.add_argument("--mask", required=True, help="PGM of class codes (255 ignored)")
    s.add_argument("--out", required=True)
    s.add_argument("--classes", type=_int_list, default=[0, 1])
    s.set_defaults(func=cmd_signatures)

    t = sub.add_parser("train", help="train a model from a run config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--manifest", default=None, help="override the config's manifest")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="accuracy report grouped by altitude")
    e.add_argument("--manifest", required=True, help="CSV with mask, group and image or pred")
    e.add_argument("--checkpoint", default=None, help="predict from images instead of reading pred")
    e.add_argument("--out", required=True)
    e.add_argument("--classes", type=_int_list, default=[1])
    e.add_argument("--num-classes", type=int, default=2)
    e.add_argument("--tile", type=int, default=None)
    e.add_argument("--overlap", type=int, default=32)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="segment a stack into a PGM mask")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--image", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--tile", type=int, default=None)
    r.add_argument("--overlap", type=int, default=32)
    r.set_defaults(func=cmd_predict)

    o = sub.add_parser("overlay", help="RGB composite with ludwigia tinted red")
    o.add_argument("--image", required=True)
    o.add_argument("--mask", required=True)
    o.add_argument("--out", required=True, help=".png or .ppm")
    o.add_argument("--alpha", type=float, default=0.5)
    o.set_defaults(func=cmd_overlay)
    return p


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (LudvisionError, OSError, ValueError, KeyError) as exc:
        print(f"ludvision {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
