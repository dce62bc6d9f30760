"""Command-line front end: gen, train, eval, infer, inspect and synth.

Every subcommand reads optional defaults from a flat ``key=value`` config
file (``--config``); flags given on the command line override it. The fully
resolved settings are printed as ``#``-prefixed banner lines before any work.
"""
from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import dataset as D
from . import evaluation as E
from . import model as M
from .histogram import ORIENTATION_BINS, SCALE_BINS, TWO_PI, bin_values, topk_indices
from .transform import PATCH_SIZE, load_image, save_image

log = logging.getLogger("patchpose")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
SPLITS = ("train", "val", "test")


class UsageError(Exception):
    """Bad configuration or arguments; exits with code 2."""


# -- config ----------------------------------------------------------------

def read_config(path) -> dict:
    """Parse a flat ``key=value`` file; ``#`` starts a comment, dashes equal underscores."""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    out = {}
    for n, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in str(text).split(",") if x.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in str(text).split(",") if x.strip())


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def resolve_threads(flag) -> int:
    if flag is not None:
        return max(1, int(flag))
    env = os.environ.get("PATCHPOSE_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"PATCHPOSE_THREADS must be an integer, got {env!r}")
    return 1


# -- parser ----------------------------------------------------------------

def _model_flags(p):
    p.add_argument("--widths", type=_ints, default=M.ModelConfig.widths,
                   help="conv channel widths, comma separated")
    p.add_argument("--hidden", type=int, default=M.ModelConfig.hidden)
    p.add_argument("--init", choices=("pyramid", "he"), default=M.ModelConfig.init)
    p.add_argument("--head-init", type=float, default=M.ModelConfig.head_init,
                   help="std multiplier for the final layer of each head")
    p.add_argument("--pool", choices=("all", "last"), default=M.ModelConfig.pool)
    p.add_argument("--separate", type=_bool, default=False,
                   help="separate encoders for the scale and orientation heads")
    p.add_argument("--temperature", type=float, default=M.ModelConfig.temperature)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patchpose",
                                     description="Scale and orientation histograms for image patches.")
    parser.add_argument("--config", help="flat key=value file of default flag values")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker cap (default: $PATCHPOSE_THREADS or 1)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate, prune and split a patch-pair dataset")
    p.add_argument("--images", required=True, help="directory of source PNG/JPEG images")
    p.add_argument("--out", required=True, help="output directory (receives train/ val/ test/)")
    p.add_argument("--mode", choices=[m.value for m in D.GenMode], default="grid")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--keypoints-per-image", type=int, default=D.GenConfig.keypoints_per_image)
    p.add_argument("--pairs", type=int, default=D.GenConfig.pairs,
                   help="continuous mode: total number of pairs")
    p.add_argument("--prune-fraction", type=float, default=D.GenConfig.prune_fraction)
    p.add_argument("--split", type=_floats, default=D.GenConfig.split_ratios,
                   help="train,val,test ratios")
    p.add_argument("--min-distance", type=float, default=D.GenConfig.min_distance)

    p = sub.add_parser("train", help="train the estimator on a generated dataset")
    p.add_argument("--data", required=True, help="dataset directory containing train/ (and val/)")
    p.add_argument("--out", required=True, help="output directory for checkpoints and loss.csv")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=M.TrainConfig.batch_size)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--momentum", type=float, default=M.TrainConfig.momentum)
    p.add_argument("--clip-norm", type=float, default=0.3, help="gradient norm cap (0: off)")
    p.add_argument("--calibrate", type=int, default=M.TrainConfig.calibrate,
                   help="patches used for the data-dependent init (0: skip)")
    p.add_argument("--time-limit", type=float, default=0.0, help="seconds (0: none)")
    p.add_argument("--checkpoint-interval", type=int, default=1)
    p.add_argument("--resume", help="continue from this checkpoint")
    _model_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="split directory, or dataset directory with test/")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--svg", help="optional range-wise bar plot")
    p.add_argument("--ks", type=_ints, default=(1, 2, 3, 4))
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("infer", help="pose histograms for one patch or a pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("patches", nargs="+", help="one or two patch images")
    p.add_argument("--topk", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("inspect", help="summarize a checkpoint or dataset directory")
    p.add_argument("path")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("synth", help="write synthetic textured source images")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--size", type=int, default=768)
    p.add_argument("--seed", type=int, default=0)
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    """Parse ``argv`` with config-file values as defaults for the chosen subcommand."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if a in COMMANDS), None)
    if known.config and command:
        conf = read_config(known.config)
        top = {"threads", "verbose"}
        sp = parser._subparsers._group_actions[0].choices[command]
        options = {a.dest: a for a in sp._actions if a.option_strings}
        unknown = sorted(set(conf) - set(options) - top)
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {', '.join(unknown)}")
        for key in conf:
            if key in options:
                options[key].required = False
        # argparse converts string defaults with each flag's type
        sp.set_defaults(**{k: v for k, v in conf.items() if k not in top})
        if "threads" in conf:
            parser.set_defaults(threads=int(conf["threads"]))
        if "verbose" in conf:
            parser.set_defaults(verbose=_bool(conf["verbose"]))
    args = parser.parse_args(argv)
    args.threads = resolve_threads(args.threads)
    return args


def banner(args) -> None:
    items = {k: v for k, v in vars(args).items() if k not in ("command",)}
    print(f"# patchpose {args.command} seed={getattr(args, 'seed', 0)}")
    for k in sorted(items):
        v = items[k]
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        print(f"# {k}={v}")
    sys.stdout.flush()


# -- subcommands -----------------------------------------------------------

def _require_dir(path, what) -> Path:
    path = Path(path)
    if not path.is_dir():
        raise UsageError(f"{what} directory not found: {path}")
    return path


def cmd_gen(args) -> int:
    images = _require_dir(args.images, "image")
    try:
        cfg = D.GenConfig(mode=D.GenMode(args.mode), keypoints_per_image=args.keypoints_per_image,
                          prune_fraction=args.prune_fraction, split_ratios=tuple(args.split),
                          seed=args.seed, pairs=args.pairs, min_distance=args.min_distance,
                          threads=args.threads)
    except ValueError as e:
        raise UsageError(str(e))
    sources = D.load_sources(images)
    if not sources:
        raise UsageError(f"no PNG/JPEG images in {images}")
    data = D.build_dataset(sources, cfg)
    parts = D.split(data, cfg.split_ratios, cfg.seed)
    out = Path(args.out)
    for name, part in zip(SPLITS, parts):
        D.save(part, out / name)
    for name, part in zip(SPLITS, parts):
        print(f"{name}: {len(part)} pairs, {len(part.keypoints())} keypoints")
    print(f"total: {sum(len(p) for p in parts)} pairs")
    return EXIT_OK


def _load_split(path, name=None) -> D.PatchPairDataset:
    path = _require_dir(path, "dataset")
    if name and (path / name / D.MANIFEST).is_file():
        path = path / name
    if not (path / D.MANIFEST).is_file():
        raise UsageError(f"no {D.MANIFEST} in {path}")
    return D.load(path)


def _model_config(args) -> M.ModelConfig:
    try:
        return M.ModelConfig(widths=tuple(args.widths), hidden=args.hidden, init=args.init,
                             head_init=args.head_init, pool=args.pool,
                             separate=bool(args.separate), temperature=args.temperature,
                             seed=args.seed)
    except ValueError as e:
        raise UsageError(str(e))


LOSS_COLUMNS = ("epoch", "loss", "first_loss", "last_loss", "val_scale", "val_orientation", "seconds")


def cmd_train(args) -> int:
    root = _require_dir(args.data, "dataset")
    train_set = _load_split(root, "train")
    val_set = _load_split(root, "val") if (root / "val" / D.MANIFEST).is_file() else None
    try:
        tcfg = M.TrainConfig(batch_size=args.batch_size, lr=args.lr, momentum=args.momentum,
                             temperature=args.temperature, epochs=args.epochs, seed=args.seed,
                             checkpoint_interval=args.checkpoint_interval,
                             clip_norm=args.clip_norm, calibrate=args.calibrate,
                             time_limit=args.time_limit)
    except ValueError as e:
        raise UsageError(str(e))
    opt = None
    if args.resume:
        model, opt, _ = M.load_checkpoint(args.resume)
    else:
        model = M.EstimatorModel(_model_config(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    print(f"train pairs: {len(train_set)}  val pairs: {len(val_set) if val_set else 0}  "
          f"parameters: {model.num_params()}")

    csv_path = out / "loss.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOSS_COLUMNS, extrasaction="ignore")
        writer.writeheader()

        def on_epoch(rec, _model, _opt):
            writer.writerow(rec)
            fh.flush()
            msg = f"epoch {rec['epoch']:3d}  loss {rec['loss']:.4f}  {rec['seconds']:.1f}s"
            if "val_scale" in rec:
                msg += f"  val S {100 * rec['val_scale']:.1f}%  O {100 * rec['val_orientation']:.1f}%"
            print(msg, flush=True)

        result = M.train(model, train_set, tcfg, val=val_set, callbacks=[on_epoch],
                         optimizer=opt, checkpoint_path=out / "last.ppck")
    M.save_checkpoint(out / "best.ppck", result.model, result.optimizer, tcfg,
                      extra={"epoch": result.best_epoch})
    print(f"best epoch {result.best_epoch}: {out / 'best.ppck'}")
    print(f"loss curve: {csv_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _, _ = M.load_checkpoint(args.checkpoint)
    data = _load_split(args.data, "test")
    report = E.evaluate(model, data, ks=tuple(args.ks))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json(), encoding="utf-8")
    print(report.table())
    if args.svg:
        E.plot_rangewise(report, args.svg)
    return EXIT_OK


def load_patch(path) -> np.ndarray:
    """Patch image as ``(3, 32, 32)``; other sizes are resampled."""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"patch image not found: {path}")
    img = load_image(path)
    if img.shape[:2] != (PATCH_SIZE, PATCH_SIZE):
        from PIL import Image
        log.info("resampling %s from %dx%d", path, img.shape[1], img.shape[0])
        im = Image.fromarray(np.round(img * 255).astype(np.uint8))
        img = np.asarray(im.resize((PATCH_SIZE, PATCH_SIZE), Image.BILINEAR), dtype=np.float64) / 255
    return img.transpose(2, 0, 1)


def _fmt_hist(h) -> str:
    return " ".join(f"{v:.4f}" for v in h)


def _candidates(h, spec, k):
    idx = topk_indices(h, k)
    return [(int(i), float(bin_values(spec, i)), float(h[i])) for i in idx]


def cmd_infer(args) -> int:
    if len(args.patches) not in (1, 2):
        raise UsageError("infer takes one or two patch images")
    if not 1 <= args.topk <= SCALE_BINS.count:
        raise UsageError(f"--topk must be in [1, {SCALE_BINS.count}]")
    model, _, _ = M.load_checkpoint(args.checkpoint)
    patches = np.stack([load_patch(p) for p in args.patches])
    hs, ho = model.predict(patches)
    for name, s, o in zip(args.patches, hs, ho):
        print(f"patch {name}")
        print(f"  scale histogram: {_fmt_hist(s)}")
        print(f"  orientation histogram: {_fmt_hist(o)}")
        for i, (b, v, m) in enumerate(_candidates(s, SCALE_BINS, args.topk), 1):
            print(f"  scale #{i}: bin {b:2d}  factor {v:.6f}  log2 {math.log2(v):+.6f}  mass {m:.4f}")
        for i, (b, v, m) in enumerate(_candidates(o, ORIENTATION_BINS, args.topk), 1):
            print(f"  orientation #{i}: bin {b:2d}  angle {v:.6f}  deg {math.degrees(v):7.2f}  mass {m:.4f}")
    if len(patches) == 2:
        fs = bin_values(SCALE_BINS, np.argmax(hs, axis=1))
        fo = bin_values(ORIENTATION_BINS, np.argmax(ho, axis=1))
        d_s = float(np.log2(fs[1] / fs[0]))
        d_o = float(np.mod(fo[1] - fo[0], TWO_PI))
        if abs(d_s) < 1e-12:
            d_s = 0.0
        print(f"relative pose: ds={d_s:+.6f} do={d_o:.6f} ({math.degrees(d_o):.2f} deg)")
    return EXIT_OK


def cmd_inspect(args) -> int:
    path = Path(args.path)
    if path.is_file():
        model, opt, meta = M.load_checkpoint(path)
        print(f"checkpoint {path}")
        print(f"  parameters: {model.num_params()}  optimizer steps: {opt.step_count}")
        for k, v in sorted(meta["model"].items()):
            print(f"  model.{k} = {v}")
        for k, v in sorted((meta.get("train") or {}).items()):
            print(f"  train.{k} = {v}")
        if meta.get("extra"):
            print(f"  extra = {meta['extra']}")
        return EXIT_OK
    path = _require_dir(path, "dataset")
    dirs = [path / s for s in SPLITS if (path / s / D.MANIFEST).is_file()]
    if (path / D.MANIFEST).is_file():
        dirs = [path]
    if not dirs:
        raise UsageError(f"{path} is neither a checkpoint nor a dataset directory")
    for d in dirs:
        data = D.load(d)
        _, _, ds, do = data.arrays()
        print(f"{d}: {len(data)} pairs, {len(data.keypoints())} keypoints, "
              f"{data.patches.shape[0]} patches")
        if len(data):
            print(f"  ds range [{ds.min():+.4f}, {ds.max():+.4f}]  "
                  f"do range [{do.min():.4f}, {do.max():.4f}]")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synth import textured_image
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    for i in range(args.count):
        save_image(out / f"synth_{i:03d}.png", textured_image(rng, args.size, args.size))
    print(f"wrote {args.count} images to {out}")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer,
            "inspect": cmd_inspect, "synth": cmd_synth}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except (UsageError, ValueError) as e:
        print(f"patchpose: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    banner(args)
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"patchpose: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (D.DatasetError, M.CheckpointError, FloatingPointError, OSError, ValueError) as e:
        print(f"patchpose: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
