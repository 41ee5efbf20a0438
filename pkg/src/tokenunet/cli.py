"""Command-line entry point: ``tokenunet <command> [options]``.

Exit codes: 0 success, 2 usage/validation error, 1 runtime or I/O failure.
"""
import argparse
import json
import logging
import os
import sys

from . import __version__
from .autodiff import set_precision

log = logging.getLogger("tokenunet")


class UsageError(Exception):
    """Validation failure reported with exit code 2."""


def _ints(text):
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _variants(text):
    from .models import VARIANTS

    names = list(VARIANTS) if text == "all" else [t.strip() for t in text.split(",")]
    for n in names:
        if n not in VARIANTS:
            raise argparse.ArgumentTypeError(f"unknown variant {n!r}; choose from {', '.join(VARIANTS)} or all")
    return names


def _variant(text):
    names = _variants(text)
    if len(names) != 1:
        raise argparse.ArgumentTypeError("exactly one variant expected")
    return names[0]


def _emit(args, payload):
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)


def _load_cfg(args):
    from .config import load_run_config

    return load_run_config(args.config)


def _seed_overrides(args):
    return {} if args.seed is None else {"seed": args.seed}


def _dataset(path):
    from .data import load_dataset

    if not os.path.isdir(path):
        raise UsageError(f"data directory {path!r} does not exist")
    samples = load_dataset(path)
    if not samples:
        raise UsageError(f"data directory {path!r} holds no subjects")
    return samples


# ---- commands -------------------------------------------------------------------------------


def cmd_generate(args):
    from .data import generate_phantoms

    rc = _load_cfg(args)
    over = {k: v for k, v in (("subjects", args.subjects), ("size", args.size), ("seed", args.seed))
            if v is not None}
    try:
        spec = rc.phantom_spec(**over)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    manifest = generate_phantoms(spec, args.out)
    print(f"wrote {manifest['subjects']} subjects ({manifest['bytes']} bytes) to {args.out}")
    print(f"sha256 {manifest['sha256']}")
    _emit(args, manifest)
    return 0


def _train_setup(args):
    rc = _load_cfg(args)
    mover = _seed_overrides(args)
    if args.variant:
        mover["variant"] = args.variant
    tover = _seed_overrides(args)
    if getattr(args, "epochs", None) is not None:
        tover["epochs"] = args.epochs
    mcfg = rc.model_config(**mover)
    tcfg = rc.train_config(**tover)
    tcfg.validate(mcfg.downsampling_factor)
    return mcfg, tcfg


def cmd_train(args):
    from .training import MetricsWriter, fold_assignment, train_fold

    mcfg, tcfg = _train_setup(args)
    if not 0 <= args.fold < tcfg.folds:
        raise UsageError(f"--fold must be in [0, {tcfg.folds}), got {args.fold}")
    samples = _dataset(args.data)
    folds = fold_assignment([s.subject_id for s in samples], tcfg.folds, tcfg.fold_seed)
    val_ids = set(folds[args.fold])
    train = [s for s in samples if s.subject_id not in val_ids]
    val = [s for s in samples if s.subject_id in val_ids]
    os.makedirs(args.out, exist_ok=True)
    writer = MetricsWriter(os.path.join(args.out, "metrics.jsonl"), timing=not args.deterministic)
    ckpt = os.path.join(args.out, f"fold{args.fold}.tunc")
    _, report = train_fold(mcfg, tcfg, train, val, args.fold, writer, ckpt)
    print(f"fold {args.fold}: held-out mean Dice {report['mean']:.4f} "
          f"(WT {report['per_label'][0]:.4f} TC {report['per_label'][1]:.4f} AT {report['per_label'][2]:.4f})")
    print(f"checkpoint {ckpt}")
    _emit(args, {"fold": args.fold, "checkpoint": ckpt, **report})
    return 0


def cmd_cv(args):
    from .training import run_cross_validation

    mcfg, tcfg = _train_setup(args)
    samples = _dataset(args.data)
    if len(samples) < tcfg.folds:
        raise UsageError(f"{len(samples)} subjects are too few for {tcfg.folds}-fold CV")
    summary = run_cross_validation(mcfg, tcfg, samples, args.out, timing=not args.deterministic)
    for rep in summary["folds"]:
        print(f"fold {rep['fold']}: mean Dice {rep['mean']:.4f}")
    print(f"median {summary['median_dice']:.4f}  mean {summary['mean_dice']:.4f}")
    _emit(args, summary)
    return 0


def cmd_eval(args):
    from .models import load_checkpoint
    from .training import evaluate

    model = load_checkpoint(args.ckpt)
    samples = _dataset(args.data)
    if any(s.label is None for s in samples):
        raise UsageError("evaluation needs label.tvol for every subject")
    window = args.window or samples[0].image.shape[1]
    if window % model.cfg.downsampling_factor:
        raise UsageError(f"--window {window} not divisible by {model.cfg.downsampling_factor}")
    report = evaluate(model, samples, window, args.overlap)
    print(f"{'subject':<16}{'WT':>8}{'TC':>8}{'AT':>8}")
    for sid, d in report["per_subject"].items():
        print(f"{sid:<16}{d[0]:>8.4f}{d[1]:>8.4f}{d[2]:>8.4f}")
    pl = report["per_label"]
    print(f"{'mean':<16}{pl[0]:>8.4f}{pl[1]:>8.4f}{pl[2]:>8.4f}   overall {report['mean']:.4f}")
    print(json.dumps({"per_label": pl, "mean": report["mean"]}))
    _emit(args, report)
    return 0


def cmd_bench(args):
    from .bench import format_table, run_bench

    from .models import ModelConfig

    for v in args.variant:
        k = (ModelConfig.paper if args.scale == "paper" else ModelConfig.desk)(v).downsampling_factor
        bad = [s for s in args.sizes if s % k]
        if bad:
            raise UsageError(f"sizes {bad} not divisible by the {v} stride {k}")
    reports = run_bench(args.variant, args.sizes, args.repeat, args.scale, args.seed or 0)
    print(format_table(reports))
    payload = [r.to_dict() for r in reports]
    print(json.dumps(payload))
    _emit(args, payload)
    return 0


def cmd_params(args):
    from .models import ModelConfig, build_model, closed_form_parameters, count_parameters

    rows = {}
    for v in args.variant:
        cfg = (ModelConfig.paper if args.scale == "paper" else ModelConfig.desk)(v)
        counts = count_parameters(build_model(cfg))
        if counts != closed_form_parameters(cfg):
            log.error("enumerated count differs from closed form for %s", v)
            return 1
        rows[v] = counts
    print(f"{'variant':<24}{'total':>12}{'millions':>10}")
    for v, c in rows.items():
        print(f"{v:<24}{c['total']:>12}{c['total'] / 1e6:>10.2f}")
    deltas = {}
    if "token_unet_plain" in rows and "unet_star" in rows:
        deltas["tokens_minus_unet_star"] = rows["token_unet_plain"]["total"] - rows["unet_star"]["total"]
    if "token_unet_transformer" in rows and "token_unet_plain" in rows:
        deltas["transformer_minus_tokens"] = rows["token_unet_transformer"]["total"] - rows["token_unet_plain"]["total"]
    for k, d in deltas.items():
        print(f"delta {k}: {d} ({d / 1e6:.3f}M)")
    _emit(args, {"scale": args.scale, "counts": rows, "deltas": deltas})
    return 0


def cmd_attn_export(args):
    from .data import load_subject, load_volume, zscore
    from .models import export_attention_maps, load_checkpoint

    model = load_checkpoint(args.ckpt)
    if os.path.isdir(args.subject):
        image = load_subject(args.subject).image
    elif os.path.isfile(args.subject):
        image = zscore(load_volume(args.subject))
    else:
        raise UsageError(f"subject {args.subject!r} is neither a subject directory nor a .tvol file")
    written = export_attention_maps(model, image, args.out)
    print(f"wrote {len(written)} files to {args.out}")
    _emit(args, {"files": written})
    return 0


# ---- parser ---------------------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global options")
    g.add_argument("--config", metavar="PATH", help="run configuration (section.key = value lines)")
    g.add_argument("--seed", type=int, metavar="U64", help="override model/train/data seeds")
    g.add_argument("--threads", type=int, default=None, metavar="N", help="kernel thread count")
    g.add_argument("--precision", choices=("f32", "f64"), default="f32")
    g.add_argument("--json", metavar="PATH", help="also write structured output here")
    g.add_argument("--deterministic", action="store_true",
                   help="single thread and time_s written as 0 so logs are byte-reproducible")
    g.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="tokenunet", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("generate", parents=[common], help="write synthetic phantoms")
    s.add_argument("--out", required=True)
    s.add_argument("--subjects", type=int)
    s.add_argument("--size", type=int)
    s.set_defaults(func=cmd_generate)

    for name, func, help_ in (("train", cmd_train, "train one CV fold"), ("cv", cmd_cv, "k-fold cross-validation")):
        s = sub.add_parser(name, parents=[common], help=help_)
        s.add_argument("--data", required=True)
        s.add_argument("--variant", type=_variant)
        s.add_argument("--out", required=True)
        s.add_argument("--epochs", type=int)
        if name == "train":
            s.add_argument("--fold", type=int, default=0)
        s.set_defaults(func=func)

    s = sub.add_parser("eval", parents=[common], help="sliding-window Dice of a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--window", type=int)
    s.add_argument("--overlap", type=float, default=0.5)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", parents=[common], help="time / memory / FLOPs vs input size")
    s.add_argument("--variant", type=_variants, default=_variants("all"))
    s.add_argument("--sizes", type=_ints, default=[16, 32, 48])
    s.add_argument("--repeat", type=int, default=5)
    s.add_argument("--scale", choices=("desk", "paper"), default="desk")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("params", parents=[common], help="parameter counts per variant")
    s.add_argument("--variant", type=_variants, default=_variants("all"))
    s.add_argument("--scale", choices=("desk", "paper"), default="paper")
    s.set_defaults(func=cmd_params)

    s = sub.add_parser("attn-export", parents=[common], help="export TokenLearner attention maps")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--subject", required=True, help="subject directory or image .tvol")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_attn_export)
    return p


def main(argv=None):
    from .models import CheckpointError, ConfigError, UnsupportedVariantError
    from .data import VolumeFormatError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    set_precision(args.precision)
    threads = 1 if args.deterministic else args.threads
    if args.command == "bench" and args.repeat < 3:
        print("error: --repeat must be >= 3", file=sys.stderr)
        return 2
    try:
        if threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=threads):
                return args.func(args)
        return args.func(args)
    except (UsageError, ConfigError, UnsupportedVariantError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, CheckpointError, VolumeFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
