"""Command-line interface: datagen, train, detect, eval, params, plot, replay.

Every run records a manifest (flat key=value text: subcommand, argv, seed,
resolved configuration, input and output paths) before producing artifacts;
`keynet replay MANIFEST` re-executes the recorded command, reproducing the
data artifacts byte-identically.  Commands that write into a directory or
file put the manifest next to their outputs; stdout-only commands print it
on the error stream.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

import argparse
import os
import shlex
import sys
from dataclasses import fields, replace

import numpy as np

from keynet import __version__
from keynet import checkpoint as ckpt_mod
from keynet import datagen
from keynet import evaluate as eval_mod
from keynet import filters
from keynet import model as model_mod
from keynet import pgm
from keynet import train as train_mod
from keynet.model import KeyNetConfig
from keynet.train import TrainConfig

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2

IMAGE_EXTENSIONS = (".pgm", ".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")

_MODEL_FIELDS = {f.name for f in fields(KeyNetConfig)}
_TRAIN_FIELDS = {f.name for f in fields(TrainConfig)}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_threads_flag(p):
    p.add_argument(
        "--threads",
        type=int,
        default=None,
        help="worker threads (default: KEYNET_THREADS env var, else 1)",
    )


def build_parser():
    p = _Parser(
        prog="keynet",
        description="Hybrid handcrafted/learned keypoint detector toolkit.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    p.add_argument("--version", action="version", version=f"keynet {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    fmt = argparse.ArgumentDefaultsHelpFormatter

    d = sub.add_parser(
        "datagen", help="generate synthetic homography training pairs", formatter_class=fmt
    )
    d.add_argument("--corpus", required=True, help="directory of source images")
    d.add_argument("--out", required=True, help="output dataset directory")
    d.add_argument("--pairs", required=True, type=int, help="number of pairs to generate")
    d.add_argument("--seed", required=True, type=int, help="master seed")
    d.add_argument(
        "--threshold",
        type=float,
        default=filters.DEFAULT_TEXTURE_THRESHOLD,
        help="texture rejection threshold",
    )
    _add_threads_flag(d)

    t = sub.add_parser("train", help="train a detector on generated pairs", formatter_class=fmt)
    t.add_argument("--data", required=True, help="pair dataset directory")
    t.add_argument("--out", required=True, help="output directory (checkpoints, log)")
    t.add_argument("--config", default=None, help="flat key=value config file")
    t.add_argument("--tiny", action="store_true", help="use the minimal architecture")
    t.add_argument("--epochs", type=int, default=None, help="override epoch count")
    t.add_argument("--batch-size", type=int, default=None, help="override batch size")
    t.add_argument("--seed", type=int, default=None, help="override shuffle seed")
    t.add_argument("--learning-rate", type=float, default=None, help="override base rate")
    t.add_argument("--init-seed", type=int, default=None, help="weight initialization seed")
    t.add_argument("--val-data", default=None, help="validation pair directory")
    t.add_argument("--val-every", type=int, default=None, help="validate every N epochs")
    t.add_argument("--resume", default=None, help="checkpoint to resume from")
    _add_threads_flag(t)

    de = sub.add_parser("detect", help="detect keypoints on one image", formatter_class=fmt)
    de.add_argument("--image", required=True, help="input image (PGM; PNG/JPEG with Pillow)")
    de.add_argument("--checkpoint", required=True, help="trained model checkpoint")
    de.add_argument("--top-k", type=int, default=1000, help="maximum keypoints to keep")
    de.add_argument("--nms", type=int, default=15, help="non-maximum suppression window")
    de.add_argument("--multiscale", action="store_true", help="detect across 12 scale levels")
    de.add_argument("--out", default=None, help="keypoint file (default: stdout)")

    e = sub.add_parser("eval", help="repeatability over a pair dataset", formatter_class=fmt)
    e.add_argument("--pairs", required=True, help="pair dataset directory")
    e.add_argument("--checkpoint", required=True, help="trained model checkpoint")
    e.add_argument("--mode", choices=("L", "SL"), default="SL",
                   help="L: location only (ground-truth scales); SL: scale+location")
    e.add_argument("--eps", type=float, default=0.4, help="overlap-error acceptance threshold")
    e.add_argument("--top-k", type=int, default=1000, help="keypoints per image")
    e.add_argument("--nms", type=int, default=15, help="non-maximum suppression window")
    e.add_argument("--multiscale", action="store_true", help="multi-scale detection")
    _add_threads_flag(e)

    pa = sub.add_parser("params", help="count learnable parameters", formatter_class=fmt)
    pa.add_argument("--tiny", action="store_true", help="use the minimal architecture")
    pa.add_argument("--config", default=None, help="flat key=value config file")

    pl = sub.add_parser("plot", help="overlay keypoints on an image", formatter_class=fmt)
    pl.add_argument("--image", required=True, help="input image")
    pl.add_argument("--keypoints", required=True, help="keypoint file (x y scale score)")
    pl.add_argument("--out", required=True, help="output PGM path")

    r = sub.add_parser("replay", help="re-run a recorded manifest", formatter_class=fmt)
    r.add_argument("manifest", help="manifest file from a previous run")
    r.add_argument("--out", default=None, help="redirect the run's --out destination")
    return p


# ---------------------------------------------------------------- helpers

def resolve_threads(args):
    n = getattr(args, "threads", None)
    if n is None:
        n = int(os.environ.get("KEYNET_THREADS", "1"))
    if n < 1:
        raise DataError(f"thread count must be >= 1, got {n}")
    return n


def load_image_unit(path):
    """Read an image file as [H,W] float32 in [0,1]."""
    if not os.path.exists(path):
        raise DataError(f"image not found: {path}")
    if path.lower().endswith(".pgm"):
        data, maxval = pgm.read_pgm(path)
        return pgm.image_to_unit(data, maxval)
    try:
        from PIL import Image
    except ImportError:
        raise DataError(
            f"{path}: non-PGM images need Pillow (pip install 'keynet[image]')"
        ) from None
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"), dtype=np.float32)
    return arr / 255.0


def read_config_file(path):
    """Flat key=value text; '#' starts a comment; returns a str->str dict."""
    if not os.path.exists(path):
        raise DataError(f"config file not found: {path}")
    mapping = {}
    with open(path, "r", encoding="ascii") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"{path}:{line_no}: expected key=value, got {raw.strip()!r}")
            key, value = line.split("=", 1)
            mapping[key.strip()] = value.strip()
    return mapping


def resolve_model_config(tiny, file_map):
    """Config file keys layered over the (tiny or default) base config."""
    unknown = set(file_map) - _MODEL_FIELDS - _TRAIN_FIELDS - {"init_seed"}
    if unknown:
        raise DataError(f"unknown config keys: {', '.join(sorted(unknown))}")
    base = KeyNetConfig.tiny() if tiny else KeyNetConfig()
    merged = base.to_mapping()
    merged.update({k: v for k, v in file_map.items() if k in _MODEL_FIELDS})
    try:
        return KeyNetConfig.from_mapping(merged)
    except ValueError as exc:
        raise DataError(f"invalid model config: {exc}") from None


def manifest_text(subcommand, argv, seed, inputs, outputs, sections):
    lines = [
        "manifest_version=1",
        f"tool=keynet {__version__}",
        f"subcommand={subcommand}",
        f"seed={'' if seed is None else seed}",
        f"argv={shlex.join([subcommand] + list(argv))}",
    ]
    for key, value in inputs.items():
        lines.append(f"input.{key}={value}")
    for key, value in outputs.items():
        lines.append(f"output.{key}={value}")
    for prefix, mapping in sections.items():
        for key, value in mapping.items():
            lines.append(f"{prefix}.{key}={value}")
    return "\n".join(lines) + "\n"


def write_manifest(path, text):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="ascii") as fh:
        fh.write(text)


def read_manifest(path):
    if not os.path.exists(path):
        raise DataError(f"manifest not found: {path}")
    return read_config_file(path)


def _sub_argv(argv):
    """argv with the subcommand name stripped (manifest stores it separately)."""
    return argv[1:] if argv else argv


def _format_keypoint_rows(kps):
    lines = ["x y scale score"]
    for x, y, s, v in kps:
        lines.append(f"{x:.4f} {y:.4f} {s:.4f} {v:.4f}")
    return "\n".join(lines) + "\n"


def draw_keypoints(image_uint8, kps, ring=3.0):
    """White rings of radius = scale (ring px thick) burned into a copy."""
    canvas = np.array(image_uint8, dtype=np.uint8, copy=True)
    h, w = canvas.shape
    half = ring / 2.0
    for x, y, scale, _score in kps:
        r = float(scale)
        r0 = max(0, int(np.floor(y - r - half)))
        r1 = min(h, int(np.ceil(y + r + half)) + 1)
        c0 = max(0, int(np.floor(x - r - half)))
        c1 = min(w, int(np.ceil(x + r + half)) + 1)
        if r0 >= r1 or c0 >= c1:
            continue
        yy, xx = np.mgrid[r0:r1, c0:c1]
        dist = np.hypot(xx + 0.5 - x, yy + 0.5 - y)
        band = np.abs(dist - r) <= half
        canvas[r0:r1, c0:c1][band] = 255
    return canvas


def _load_checkpoint(path):
    if not os.path.exists(path):
        raise DataError(f"checkpoint not found: {path}")
    try:
        return ckpt_mod.load_checkpoint(path)
    except ckpt_mod.CheckpointError as exc:
        raise DataError(str(exc)) from None


def _read_pairs(root):
    if not os.path.isdir(root):
        raise DataError(f"pair directory not found: {root}")
    # read_dataset is lazy; materialize so callers can len() and re-iterate
    return list(datagen.read_dataset(root))


# ------------------------------------------------------------ subcommands

def run_datagen(args, argv):
    if args.pairs < 1:
        raise DataError("--pairs must be >= 1")
    if not os.path.isdir(args.corpus):
        raise DataError(f"corpus directory not found: {args.corpus}")
    names = sorted(
        n for n in os.listdir(args.corpus) if n.lower().endswith(IMAGE_EXTENSIONS)
    )
    if not names:
        raise DataError(f"no images in corpus directory {args.corpus}")
    sources = [(name, load_image_unit(os.path.join(args.corpus, name))) for name in names]
    threads = resolve_threads(args)
    os.makedirs(args.out, exist_ok=True)
    write_manifest(
        os.path.join(args.out, "manifest.txt"),
        manifest_text(
            "datagen",
            _sub_argv(argv),
            args.seed,
            {"corpus": args.corpus},
            {"dataset": args.out},
            {
                "run": {
                    "pairs": args.pairs,
                    "threshold": repr(args.threshold),
                    "threads": threads,
                }
            },
        ),
    )
    meta = datagen.generate_dataset(
        sources, args.out, args.pairs, args.seed,
        texture_threshold=args.threshold, threads=threads,
    )
    print(
        f"wrote {args.pairs} pairs to {args.out} "
        f"({meta['rejections']} texture rejections, {len(sources)} sources)"
    )
    return EXIT_OK


def run_train(args, argv):
    pairs = _read_pairs(args.data)
    file_map = read_config_file(args.config) if args.config else {}
    config = resolve_model_config(args.tiny, file_map)
    try:
        train_config = TrainConfig.from_mapping(file_map)
    except ValueError as exc:
        raise DataError(f"invalid training config: {exc}") from None
    overrides = {}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.batch_size is not None:
        overrides["batch_size"] = args.batch_size
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.learning_rate is not None:
        overrides["learning_rate"] = args.learning_rate
    if args.val_every is not None:
        overrides["val_every"] = args.val_every
    if overrides:
        train_config = replace(train_config, **overrides)
    init_seed = int(file_map.get("init_seed", "0"))
    if args.init_seed is not None:
        init_seed = args.init_seed
    val_pairs = _read_pairs(args.val_data) if args.val_data else None
    if val_pairs is not None and train_config.val_every == 0:
        train_config = replace(train_config, val_every=1)
    os.makedirs(args.out, exist_ok=True)
    write_manifest(
        os.path.join(args.out, "manifest.txt"),
        manifest_text(
            "train",
            _sub_argv(argv),
            train_config.seed,
            {"data": args.data, **({"val_data": args.val_data} if args.val_data else {}),
             **({"resume": args.resume} if args.resume else {})},
            {"run_dir": args.out},
            {
                "config": config.to_mapping(),
                "train": train_config.to_mapping(),
                "run": {"init_seed": init_seed, "tiny": int(args.tiny)},
            },
        ),
    )
    result = train_mod.train(
        pairs, args.out, config=config, train_config=train_config,
        val_pairs=val_pairs, resume_from=args.resume, init_seed=init_seed,
    )
    last_loss = next(
        (h["loss"] for h in reversed(result.history) if "loss" in h), float("nan")
    )
    print(
        f"trained {result.final_epoch} epochs on {len(pairs)} pairs; "
        f"final loss {last_loss:.6g}; checkpoints in {args.out}"
    )
    return EXIT_OK


def run_detect(args, argv):
    if args.top_k < 1:
        raise DataError("--top-k must be >= 1")
    if args.nms < 1 or args.nms % 2 == 0:
        raise DataError("--nms must be odd and >= 1")
    data = _load_checkpoint(args.checkpoint)
    image = load_image_unit(args.image)[None]
    try:
        if args.multiscale:
            kps = eval_mod.detect_multiscale(
                image, data.weights, data.config, top_k=args.top_k, nms_size=args.nms
            )
        else:
            kps = eval_mod.detect(
                image, data.weights, data.config, top_k=args.top_k, nms_size=args.nms
            )
    except ValueError as exc:
        raise DataError(str(exc)) from None
    manifest = manifest_text(
        "detect",
        _sub_argv(argv),
        None,
        {"image": args.image, "checkpoint": args.checkpoint},
        {"keypoints": args.out or "-"},
        {
            "config": data.config.to_mapping(),
            "run": {"top_k": args.top_k, "nms": args.nms, "multiscale": int(args.multiscale)},
        },
    )
    if args.out:
        write_manifest(args.out + ".manifest.txt", manifest)
        eval_mod.write_keypoints(args.out, kps)
        print(f"wrote {kps.shape[0]} keypoints to {args.out}")
    else:
        sys.stderr.write(manifest)
        sys.stdout.write(_format_keypoint_rows(kps))
    return EXIT_OK


def run_eval(args, argv):
    pairs = _read_pairs(args.pairs)
    data = _load_checkpoint(args.checkpoint)
    sys.stderr.write(
        manifest_text(
            "eval",
            _sub_argv(argv),
            None,
            {"pairs": args.pairs, "checkpoint": args.checkpoint},
            {},
            {
                "config": data.config.to_mapping(),
                "run": {
                    "mode": args.mode,
                    "eps": repr(args.eps),
                    "top_k": args.top_k,
                    "nms": args.nms,
                    "multiscale": int(args.multiscale),
                },
            },
        )
    )
    mean_rep, reports = eval_mod.evaluate_pairs(
        pairs, data.weights, data.config,
        top_k=args.top_k, nms_size=args.nms, eps_max=args.eps,
        l_mode=(args.mode == "L"), multiscale=args.multiscale,
    )
    for i, rep in enumerate(reports):
        print(
            f"pair_{i:06d} repeatability={rep.repeatability:.4f} "
            f"matches={rep.num_correspondences} "
            f"mean_overlap_error={rep.mean_overlap_error:.4f} "
            f"kept_a={rep.num_a} kept_b={rep.num_b}"
        )
    scale_ranges = [r.scale_range for r in reports]
    print(f"mean_repeatability={mean_rep:.4f}")
    print(f"pairs={len(reports)} mode={args.mode} eps={args.eps:g}")
    print(f"scale_range={max(scale_ranges):.4f}")
    return EXIT_OK


def run_params(args, argv):
    file_map = read_config_file(args.config) if args.config else {}
    config = resolve_model_config(args.tiny, file_map)
    total, breakdown = model_mod.count_params(config)
    sys.stderr.write(
        manifest_text(
            "params", _sub_argv(argv), None, {}, {},
            {"config": config.to_mapping()},
        )
    )
    width = max(len(name) for name, _ in breakdown) if breakdown else 10
    for name, count in breakdown:
        print(f"{name:<{width}}  {count:>8d}")
    print(f"{'total':<{width}}  {total:>8d}")
    return EXIT_OK


def run_plot(args, argv):
    image = load_image_unit(args.image)
    canvas_in = pgm.unit_to_image(image)
    try:
        kps = eval_mod.read_keypoints(args.keypoints)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    write_manifest(
        args.out + ".manifest.txt",
        manifest_text(
            "plot",
            _sub_argv(argv),
            None,
            {"image": args.image, "keypoints": args.keypoints},
            {"plot": args.out},
            {},
        ),
    )
    pgm.write_pgm(args.out, draw_keypoints(canvas_in, kps))
    print(f"wrote overlay with {kps.shape[0]} keypoints to {args.out}")
    return EXIT_OK


def run_replay(args, argv):
    mapping = read_manifest(args.manifest)
    if "argv" not in mapping:
        raise DataError(f"{args.manifest}: missing argv entry")
    stored = shlex.split(mapping["argv"])
    if args.out is not None:
        if "--out" in stored:
            stored[stored.index("--out") + 1] = args.out
        else:
            stored += ["--out", args.out]
    sys.stderr.write(f"replaying: keynet {shlex.join(stored)}\n")
    return cli_main(stored)


_HANDLERS = {
    "datagen": run_datagen,
    "train": run_train,
    "detect": run_detect,
    "eval": run_eval,
    "params": run_params,
    "plot": run_plot,
    "replay": run_replay,
}


def cli_main(argv=None):
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.error("a subcommand is required (see --help)")
        return _HANDLERS[args.command](args, argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        print("run 'keynet --help' for usage", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # argparse --help / --version
        return int(exc.code or 0)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (datagen.SourceSizeError, train_mod.TrainingDivergedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
