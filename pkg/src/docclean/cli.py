"""``docclean`` command line: train, infer, eval, analyze, import-weights.

Exit codes: 0 success, 2 usage/configuration/input error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
from contextlib import nullcontext


from . import __version__, checkpoint, data, kernels, metrics, perceptual, tiler
from . import model as model_mod
from . import train as train_mod
from .errors import CheckpointError, ConfigurationError, DatasetError, TrainingDiverged

log = logging.getLogger("docclean")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


def _bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _floats(v):
    if isinstance(v, (list, tuple)):
        return tuple(float(x) for x in v)
    return tuple(float(x) for x in str(v).replace(",", " ").split())


# key -> (parser, default); flags of the same name override config-file values
TRAIN_KEYS = {
    "data": (str, None),
    "out": (str, "run"),
    "variant": (str, "M16"),
    "color_mode": (str, "gray"),
    "epochs": (int, 100),
    "max_steps": (int, None),
    "batch_size": (int, 8),
    "lr": (float, 1e-3),
    "seed": (int, 0),
    "stride": (int, 192),
    "scales": (_floats, data.SCALES),
    "train_fraction": (float, 0.8),
    "extractor": (str, None),
    "no_perceptual": (_bool, False),
    "lambda1": (float, 10.0),
    "lambda2": (float, 0.1),
    "lambda3": (float, 10.0),
    "augment_prob": (float, 0.3),
}


def read_config(path):
    """Flat ``key = value`` file (``#`` comments); returns a dict of strings."""
    if path is None:
        return {}
    if not os.path.isfile(path):
        raise ConfigurationError(f"config file not found: {path}")
    cp = configparser.ConfigParser(comment_prefixes=("#", ";"), inline_comment_prefixes=("#",))
    with open(path, encoding="utf-8") as f:
        try:
            cp.read_string("[run]\n" + f.read())
        except configparser.Error as exc:
            raise ConfigurationError(f"{path}: {exc}") from None
    return {k.replace("-", "_"): v.strip().strip("\"'") for k, v in cp["run"].items()}


def effective(args, keys, config):
    unknown = sorted(set(config) - set(keys))
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
    out = {}
    for key, (parse, default) in keys.items():
        v = getattr(args, key, None)
        if v is None and key in config:
            try:
                v = parse(config[key])
            except ValueError as exc:
                raise ConfigurationError(f"config key {key}: {exc}") from None
        out[key] = default if v is None else v
    return out


def write_manifest(path, values, extra_comments=()):
    """Write effective settings in the config-file format so a run can be replayed."""
    lines = [f"# docclean {__version__} run manifest", f"# kernels: {kernels.BACKEND}"]
    lines += [f"# {c}" for c in extra_comments]
    for k, v in values.items():
        if v is None:
            continue
        if isinstance(v, tuple):
            v = ", ".join(repr(x) for x in v)
        lines.append(f"{k} = {v}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


# ------------------------------------------------------------------ commands


def cmd_train(args):
    cfg = effective(args, TRAIN_KEYS, read_config(args.config))
    if not cfg["data"]:
        raise ConfigurationError("no dataset given (--data or 'data' in the config file)")
    if cfg["color_mode"] not in data.COLOR_MODES:
        raise ConfigurationError(f"color_mode must be one of {data.COLOR_MODES}")
    if cfg["no_perceptual"]:
        cfg["lambda2"] = cfg["lambda3"] = 0.0
    weights = perceptual.LossWeights(cfg["lambda1"], cfg["lambda2"], cfg["lambda3"])
    log.info("effective loss weights: (%g, %g, %g)", *weights.as_tuple())
    out_channels = 3 if cfg["color_mode"] == "color" else 1
    tcfg = train_mod.TrainConfig(
        variant=cfg["variant"], out_channels=out_channels, learning_rate=cfg["lr"],
        batch_size=cfg["batch_size"], max_epochs=cfg["epochs"], max_steps=cfg["max_steps"],
        seed=cfg["seed"], weights=weights,
    )
    fx = None
    if weights.feature > 0 or weights.style > 0:
        if not cfg["extractor"]:
            raise ConfigurationError(
                "perceptual loss needs VGG-19 weights: pass --extractor (see import-weights) or --no-perceptual"
            )
        if not os.path.isfile(cfg["extractor"]):
            raise ConfigurationError(f"extractor weights not found: {cfg['extractor']}")
        fx = perceptual.load_feature_extractor(cfg["extractor"])
    ds = data.scan_pairs(cfg["data"], cfg["color_mode"])
    patches = data.extract_patches(ds, cfg["stride"], cfg["scales"])
    train_set, val_set = data.split(patches, cfg["train_fraction"], cfg["seed"])
    log.info("%d pairs -> %d patches (%d train / %d val)", len(ds), len(patches), len(train_set), len(val_set))
    os.makedirs(cfg["out"], exist_ok=True)
    write_manifest(os.path.join(cfg["out"], "run.cfg"), cfg, [f"threads: {args.threads_effective}"])
    spec = data.AugmentSpec(seed=cfg["seed"], probability=cfg["augment_prob"]) if cfg["augment_prob"] > 0 else None
    trainer = train_mod.Trainer(tcfg, fx=fx, out_dir=cfg["out"], augment_spec=spec, log=log.info)
    trainer.fit(train_set, val_set)
    log.info("best validation loss %.6g -> %s", trainer.best_val, os.path.join(cfg["out"], "best.ckpt"))
    return EXIT_OK


def _images_in(path):
    if os.path.isdir(path):
        return [os.path.join(path, n) for n in sorted(os.listdir(path))
                if os.path.splitext(n)[1].lower() in data.IMAGE_EXTENSIONS]
    if not os.path.isfile(path):
        raise ConfigurationError(f"input not found: {path}")
    return [path]


def cmd_infer(args):
    config = None
    if args.variant:
        config = model_mod.ModelConfig(args.variant, args.out_channels or 1)
    try:
        net, meta = model_mod.load_checkpoint(args.checkpoint, config)
    except FileNotFoundError:
        raise ConfigurationError(f"checkpoint not found: {args.checkpoint}") from None
    inputs = _images_in(args.input)
    many = os.path.isdir(args.input)
    if many:
        os.makedirs(args.output, exist_ok=True)
    for path in inputs:
        img = data.load_image(path, 3)
        out = tiler.infer_tiled(net, img, stride=args.stride, batch_size=args.batch_size)
        if args.binarize:
            out = tiler.binarize(metrics.luma(out)[:, :, None], args.threshold)
        dst = os.path.join(args.output, os.path.splitext(os.path.basename(path))[0] + ".png") if many else args.output
        data.save_image(dst, out)
        log.info("%s -> %s", path, dst)
    return EXIT_OK


def cmd_eval(args):
    report = metrics.evaluate(args.pred, args.gt, args.task, args.peak, args.threshold)
    text = report.to_csv()
    sys.stdout.write(text)
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as f:
            f.write(text)
    if args.json:
        with open(args.json, "w", encoding="utf-8") as f:
            f.write(report.to_json() + "\n")
    log.info("PSNR peak %g", args.peak)
    for e in report.errors:
        log.error("%s", e)
    return EXIT_USAGE if report.errors else EXIT_OK


def cmd_analyze(args):
    if args.checkpoint:
        meta, table = checkpoint.read_manifest(args.checkpoint)
        cfg = model_mod.ModelConfig(meta.get("variant", "M16"), int(meta.get("out_channels", 1)), args.input_size)
        size = os.path.getsize(args.checkpoint)
    else:
        cfg = model_mod.ModelConfig(args.variant, args.out_channels, args.input_size)
        size = None
    plan = model_mod.plan_model(cfg)
    if size is None:
        net = model_mod.build_model(cfg)
        size = len(checkpoint.encode(net.state_dict(), model_mod.model_meta(net)))
    n = args.input_size
    params = model_mod.count_params(plan)
    madds = model_mod.count_mult_adds(plan, n, n)
    result = {
        "variant": cfg.variant, "out_channels": cfg.out_channels, "input_size": n,
        "params": params, "mult_adds": madds, "checkpoint_bytes": size,
        "layers": model_mod.layer_breakdown(plan, n, n),
    }
    if args.json:
        print(json.dumps(result, indent=2))
        return EXIT_OK
    print(f"variant          {cfg.variant} (out_channels={cfg.out_channels})")
    print(f"parameters       {params} ({params / 1e6:.3f}M)")
    print(f"mult-adds        {madds} ({madds / 1e9:.3f}G at {n}x{n})")
    print(f"checkpoint size  {size} bytes")
    print()
    print(f"{'layer':<14}{'c_in':>6}{'c_out':>6}{'params':>10}{'mult_adds':>16}")
    for r in result["layers"]:
        print(f"{r['layer']:<14}{r['c_in']:>6}{r['c_out']:>6}{r['params']:>10}{r['mult_adds']:>16}")
    return EXIT_OK


def cmd_import_weights(args):
    n = perceptual.import_weights(args.source, args.dest)
    log.info("wrote %d tensors to %s", n, args.dest)
    return EXIT_OK


# --------------------------------------------------------------------- main


def build_parser():
    p = argparse.ArgumentParser(prog="docclean", description="Document image cleanup toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--threads", type=int, default=None,
                   help="BLAS thread limit (default: $DOCCLEAN_THREADS); 1 gives bitwise-reproducible runs")
    p.add_argument("-q", "--quiet", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model on a paired dataset")
    t.add_argument("--config", help="flat key = value file; flags override it")
    t.add_argument("--data", help="dataset root with noisy/ and clean/")
    t.add_argument("--out", help="output directory (default: run)")
    t.add_argument("--variant", help="m16, m32 or m64")
    t.add_argument("--color-mode", choices=data.COLOR_MODES)
    t.add_argument("--epochs", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--stride", type=int, help="patch stride (default 192)")
    t.add_argument("--scales", type=_floats, help="patch scales, e.g. '0.7,1.0,1.4'")
    t.add_argument("--train-fraction", type=float, help="share of patches used for training (default 0.8)")
    t.add_argument("--extractor", help="VGG-19 weights in docclean container format")
    t.add_argument("--no-perceptual", action="store_const", const=True, default=None,
                   help="pixel loss only (lambda2 = lambda3 = 0)")
    t.add_argument("--lambda1", type=float)
    t.add_argument("--lambda2", type=float)
    t.add_argument("--lambda3", type=float)
    t.add_argument("--augment-prob", type=float)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="clean image(s) with a trained checkpoint")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("input", help="image file or directory")
    i.add_argument("output", help="output file, or directory when input is a directory")
    i.add_argument("--stride", type=int, default=tiler.DEFAULT_STRIDE)
    i.add_argument("--batch-size", type=int, default=4)
    i.add_argument("--binarize", action="store_true")
    i.add_argument("--threshold", type=float, default=0.5)
    i.add_argument("--variant", help="require this architecture")
    i.add_argument("--out-channels", type=int)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score predictions against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--task", choices=metrics.TASKS, default="binarize")
    e.add_argument("--peak", type=float, default=255.0, help="PSNR peak: 255 (8-bit) or 1.0")
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--csv")
    e.add_argument("--json")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="parameter and Mult-Add counts")
    a.add_argument("--variant", default="M16")
    a.add_argument("--out-channels", type=int, default=1)
    a.add_argument("--input-size", type=int, default=256)
    a.add_argument("--checkpoint")
    a.add_argument("--json", action="store_true")
    a.set_defaults(func=cmd_analyze)

    w = sub.add_parser("import-weights", help="convert published VGG-19 weights (.pth/.h5/.npz)")
    w.add_argument("source")
    w.add_argument("dest")
    w.set_defaults(func=cmd_import_weights)
    return p


def _thread_limit(n):
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr, force=True)
    threads = args.threads
    if threads is None and os.environ.get("DOCCLEAN_THREADS"):
        try:
            threads = int(os.environ["DOCCLEAN_THREADS"])
        except ValueError:
            log.error("DOCCLEAN_THREADS must be an integer")
            return EXIT_USAGE
    if threads is not None and threads < 1:
        log.error("--threads must be >= 1")
        return EXIT_USAGE
    args.threads_effective = threads if threads is not None else "unlimited"
    try:
        with _thread_limit(threads):
            return args.func(args)
    except (ConfigurationError, DatasetError, CheckpointError) as exc:
        log.error("error: %s", exc)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        log.error("training diverged: %s", exc)
        return EXIT_RUNTIME
    except (OSError, RuntimeError, ValueError, MemoryError) as exc:
        log.error("failed: %s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
