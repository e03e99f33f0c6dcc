"""Command-line entry point: ``mkis <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
abort, 5 gradient check failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import backend
from .errors import ConfigError, DataError, ManifestError, ModelFileError, MkisError, NonFiniteError
from .model import ModelConfig
from .training import TrainConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_GRADCHECK = 5

logger = logging.getLogger("mkisnet")


# run configuration ------------------------------------------------------------

@dataclass
class DataConfig:
    train_manifest: str = ""
    test_manifest: str = ""
    augment: bool = True
    rotations: int = 360
    brightness_variants: int = 20
    gain_low: float = 0.7
    gain_high: float = 1.3


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    out: str = "runs/latest"
    seed: int = 0
    threads: int = 1
    f64: bool = False

    def sections(self):
        return {"model": self.model, "train": self.train, "data": self.data}

    def items(self):
        """Flat (key, value) pairs of every effective setting."""
        out = []
        for sec, obj in self.sections().items():
            for f in dataclasses.fields(obj):
                out.append((f"{sec}.{f.name}", getattr(obj, f.name)))
        for name in ("out", "seed", "threads", "f64"):
            out.append((name, getattr(self, name)))
        return out

    def dump(self, path):
        lines = ["# fully resolved configuration"]
        for key, value in self.items():
            lines.append(f"{key}={_format_value(value)}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    def set(self, key, raw):
        if "." in key:
            sec, name = key.split(".", 1)
            obj = self.sections().get(sec)
            if obj is None:
                raise ConfigError(f"unknown config section in {key!r}")
        else:
            obj, name = self, key
        fields = {f.name: f for f in dataclasses.fields(obj)}
        if name not in fields or name in ("model", "train", "data"):
            raise ConfigError(f"unknown config key {key!r}")
        hints = typing.get_type_hints(type(obj))
        setattr(obj, name, _coerce(raw, hints.get(name, str), getattr(obj, name), key))


def _format_value(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def _coerce(raw, hint, current, key):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union:
        if text.lower() in ("none", ""):
            return None
        hint = next(a for a in args if a is not type(None))
    try:
        if hint is bool:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is tuple or isinstance(current, tuple):
            return tuple(int(x) for x in text.split(",") if x.strip())
        return text
    except ValueError:
        raise ConfigError(f"invalid value {raw!r} for {key}") from None


def read_config_file(path):
    """Parse ``key=value`` lines; ``#`` starts a comment line."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    pairs = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return pairs


def resolve_config(args, overrides=()):
    cfg = RunConfig()
    cfg.threads = int(os.environ.get("MKIS_THREADS", "1") or 1)
    if getattr(args, "config", None):
        for k, v in read_config_file(args.config):
            cfg.set(k, v)
    for k, v in overrides:
        if v is not None:
            cfg.set(k, v)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg.set(k.strip(), v.strip())
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    if args.f64:
        cfg.f64 = True
    if args.out is not None:
        cfg.out = args.out
    cfg.train.rng_seed = cfg.seed
    cfg.model.validate()
    cfg.train.validate()
    if cfg.threads < 1:
        raise ConfigError("threads must be >= 1")
    return cfg


def parse_resolution(text):
    parts = text.lower().split("x")
    try:
        h, w = (int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"resolution must look like HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise ConfigError(f"resolution must be positive, got {text!r}")
    return h, w


# helpers ----------------------------------------------------------------------

class PaddedDataset:
    def __init__(self, base, multiple):
        self.base = base
        self.multiple = multiple

    def __len__(self):
        return len(self.base)

    def __getitem__(self, i):
        from .data import pad_to_multiple

        return pad_to_multiple(self.base[i], self.multiple)[0]


def _echo(cfg, out):
    """Write the resolved configuration into ``out`` before any work starts."""
    cfg.out = str(out)
    cfg.dump(Path(out) / "resolved_config.txt")


def _echo_optional(cfg, args):
    if args.out is not None:
        _echo(cfg, _prepare_out(args.out))


def _prepare_out(path, force=False, require_empty=False):
    out = Path(path)
    if require_empty and out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


# commands -----------------------------------------------------------------------

def cmd_train(args):
    from .data import ManifestDataset, augment_training_set, load_manifest
    from .model import build_model, save_model
    from .training import median_frequency_weights, resume, train

    cfg = resolve_config(args, [
        ("data.train_manifest", args.manifest), ("train.epochs", args.epochs),
        ("train.max_steps", args.max_steps), ("train.batch_size", args.batch_size),
        ("train.learning_rate", args.lr), ("data.rotations", args.rotations),
        ("data.brightness_variants", args.brightness),
        ("train.checkpoint_interval", args.checkpoint_interval),
        ("data.augment", "false" if args.no_augment else None),
    ])
    backend.set_num_threads(cfg.threads)
    if not cfg.data.train_manifest:
        raise ConfigError("no training manifest (data.train_manifest or --manifest)")
    out = _prepare_out(cfg.out)
    _echo(cfg, out)
    manifest = load_manifest(cfg.data.train_manifest)
    sources = PaddedDataset(ManifestDataset(manifest, cfg.model.in_channels), cfg.model.downsample)
    weights = median_frequency_weights(sources[i] for i in range(len(sources)))
    print(f"class weights: background {weights[0]:.5f}, foreground {weights[1]:.5f}")
    train_set = sources
    if cfg.data.augment:
        train_set = augment_training_set(sources, cfg.data.rotations, cfg.data.brightness_variants,
                                         (cfg.data.gain_low, cfg.data.gain_high), cfg.seed)
    print(f"training samples: {len(train_set)}")

    def report(rec):
        if rec.step % 10 == 0:
            print(f"epoch {rec.epoch} step {rec.step} loss {rec.loss:.6f} lr {rec.lr:.6g}", flush=True)

    if args.resume:
        result = resume(args.resume, train_set, weights, cfg.train, out_dir=out)
    else:
        dtype = np.float64 if cfg.f64 else np.float32
        model = build_model(cfg.model, rng_seed=cfg.seed, dtype=dtype)
        result = train(model, train_set, cfg.train, weights, out_dir=out, on_step=report)
    save_model(result.model, out / "model.mkis")
    final = result.log.records[-1].loss if result.log.records else float("nan")
    print(f"finished {result.position.global_step} steps; final loss {final:.6f}")
    print(f"model written to {out / 'model.mkis'}")
    return EXIT_OK


def _write_eval_outputs(out, evaluation, items_by_id, params):
    from .data import save_png
    from .evaluation import format_table, render_accuracy_map, write_csv

    maps = out / "accuracy_maps"
    preds = out / "predictions"
    maps.mkdir(exist_ok=True)
    preds.mkdir(exist_ok=True)
    for pr in evaluation.predictions:
        sample = items_by_id[pr.sample_id]
        save_png(maps / f"{pr.sample_id}.png", render_accuracy_map(pr.pred, sample.label, sample.fov_mask))
        save_png(preds / f"{pr.sample_id}_pred.png", pr.pred * 255)
        save_png(preds / f"{pr.sample_id}_prob.png", np.rint(pr.prob * 65535).astype(np.uint16))
    write_csv(out / "metrics.csv", [evaluation.pooled], params)
    write_csv(out / "per_image.csv", evaluation.per_image, params)
    table = format_table([evaluation.pooled], params)
    per_image = format_table(evaluation.per_image, label="dataset")
    (out / "metrics.txt").write_text(table + "\n\nPer image\n" + per_image + "\n", encoding="utf-8")
    return table


def cmd_eval(args):
    from .data import ManifestDataset, load_manifest
    from .evaluation import evaluate_predictions, predict_sample
    from .model import load_model

    cfg = resolve_config(args)
    backend.set_num_threads(cfg.threads)
    try:
        model = load_model(args.model)
    except FileNotFoundError:
        raise ConfigError(f"model file not found: {args.model}") from None
    manifest = load_manifest(args.manifest)
    out = _prepare_out(args.out_dir or cfg.out)
    _echo(cfg, out)
    dataset = ManifestDataset(manifest, model.config.in_channels)
    items, failures = [], []
    for i, rec in enumerate(manifest.records):
        try:
            sample = dataset[i]
            items.append((sample, predict_sample(model, sample)))
        except (DataError, FileNotFoundError) as exc:
            failures.append((rec.id, str(exc)))
    if not items:
        raise DataError("every test sample failed: " + "; ".join(f"{i}: {m}" for i, m in failures))
    name = Path(args.model).stem
    evaluation = evaluate_predictions(items, manifest.name, name)
    table = _write_eval_outputs(out, evaluation, {s.id: s for s, _ in items}, model.num_parameters())
    print(table)
    if failures:
        print(f"{len(failures)} sample(s) failed and were skipped:", file=sys.stderr)
        for sid, msg in failures:
            print(f"  {sid}: {msg}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def cmd_summary(args):
    from .model import complexity_report, stage_madds

    cfg = resolve_config(args)
    h, w = parse_resolution(args.res)
    _echo_optional(cfg, args)
    m = cfg.model.downsample
    ph, pw = -(-h // m) * m, -(-w // m) * m
    rep = complexity_report(cfg.model, ph, pw)
    res = f"{h}x{w}" if (ph, pw) == (h, w) else f"{h}x{w} (padded to {ph}x{pw})"
    print(f"resolution           : {res}")
    print(f"trainable parameters : {rep.trainable_params:,} ({rep.trainable_params / 1e6:.3f} M)")
    print(f"serialized size      : {rep.model_size_bytes:,} bytes ({rep.model_size_bytes / 1e6:.3f} MB)")
    print(f"MAdds                : {rep.madds:,} ({rep.madds / 1e9:.4f} B)")
    for name, n in stage_madds(cfg.model, ph, pw):
        print(f"  {name:<12} {n:>14,}")
    print("input branch RF      : " + ", ".join(str(r) for r in rep.input_branch_receptive_field))
    stages = ["input"] + [f"block{i}" for i in range(1, cfg.model.num_blocks + 1)]
    print("receptive field      : " + ", ".join(f"{s}={r}" for s, r in zip(stages, rep.per_stage_receptive_field)))
    return EXIT_OK


def cmd_gradcheck(args):
    from .checks import TOLERANCE, run_all

    cfg = resolve_config(args)
    backend.set_num_threads(cfg.threads)
    _echo_optional(cfg, args)
    results = run_all(size=args.size, seed=cfg.seed, names=args.only or None)
    failed = []
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:<24} max rel error {r.max_rel_error:.3e}  {status}")
        if not r.passed:
            failed.append(r.name)
    if failed:
        print(f"gradient check failed (tolerance {TOLERANCE:g}): {', '.join(failed)}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def cmd_augment(args):
    from .data import ManifestDataset, augment_training_set, load_manifest, save_png, to_uint8, write_manifest

    cfg = resolve_config(args, [("data.rotations", args.rotations), ("data.brightness_variants", args.brightness)])
    manifest = load_manifest(args.manifest)
    sources = ManifestDataset(manifest, cfg.model.in_channels)
    aug = augment_training_set(sources, cfg.data.rotations, cfg.data.brightness_variants,
                               (cfg.data.gain_low, cfg.data.gain_high), cfg.seed)
    if args.count_only:
        print(len(aug))
        return EXIT_OK
    out = _prepare_out(args.out_dir, force=args.force, require_empty=True)
    _echo(cfg, out)
    records = []
    for sample in aug:
        img = out / f"{sample.id}_image.png"
        lab = out / f"{sample.id}_label.png"
        save_png(img, to_uint8(sample.image))
        save_png(lab, sample.label * 255)
        mask = None
        if sample.fov_mask is not None:
            mask = out / f"{sample.id}_mask.png"
            save_png(mask, sample.fov_mask.astype(np.uint8) * 255)
        records.append((sample.id, img, lab, mask))
    write_manifest(out / "manifest.tsv", manifest.name, manifest.split, records)
    print(len(records))
    return EXIT_OK


def cmd_predict(args):
    from .data import Sample, decode_image, save_png
    from .evaluation import predict_sample
    from .model import load_model

    cfg = resolve_config(args)
    backend.set_num_threads(cfg.threads)
    model = load_model(args.model)
    try:
        image = decode_image(args.image, model.config.in_channels)
    except FileNotFoundError:
        raise DataError(f"image not found: {args.image}") from None
    sample = Sample(image, np.zeros(image.shape[:2], dtype=np.uint8), None, Path(args.image).stem)
    out = _prepare_out(args.out_dir or cfg.out)
    _echo(cfg, out)
    pr = predict_sample(model, sample)
    save_png(out / f"{sample.id}_pred.png", pr.pred * 255)
    save_png(out / f"{sample.id}_prob.png", np.rint(pr.prob * 65535).astype(np.uint16))
    print(f"foreground fraction {pr.pred.mean():.4f}; maps written to {out}")
    return EXIT_OK


def cmd_make_synthetic(args):
    from .data import write_synthetic_dataset

    path = write_synthetic_dataset(args.out_dir, n=args.n, size=args.size, seed=args.seed or 0, split=args.split)
    print(path)
    return EXIT_OK


# parser -------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value configuration file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=None, help="kernel threads (default $MKIS_THREADS or 1)")
    common.add_argument("--f64", action="store_true", help="64-bit verification precision")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mkis", description="Multi-kernel segmentation network tools")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train on a manifest")
    t.add_argument("--manifest")
    t.add_argument("--epochs")
    t.add_argument("--max-steps")
    t.add_argument("--batch-size")
    t.add_argument("--lr")
    t.add_argument("--rotations")
    t.add_argument("--brightness")
    t.add_argument("--checkpoint-interval")
    t.add_argument("--no-augment", action="store_true")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a saved model on a manifest")
    e.add_argument("model")
    e.add_argument("manifest")
    e.add_argument("out_dir", nargs="?")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("summary", parents=[common], help="parameter count, size, MAdds, receptive fields")
    s.add_argument("--res", default="64x64")
    s.set_defaults(func=cmd_summary)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    g.add_argument("--size", type=int, default=6)
    g.add_argument("--only", action="append", help="run only the named check")
    g.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("augment", parents=[common], help="materialise the augmented training set")
    a.add_argument("manifest")
    a.add_argument("out_dir", nargs="?")
    a.add_argument("--rotations")
    a.add_argument("--brightness")
    a.add_argument("--force", action="store_true")
    a.add_argument("--count-only", action="store_true", help="print the expanded count without writing")
    a.set_defaults(func=cmd_augment)

    pr = sub.add_parser("predict", parents=[common], help="segment a single image")
    pr.add_argument("model")
    pr.add_argument("image")
    pr.add_argument("out_dir", nargs="?")
    pr.set_defaults(func=cmd_predict)

    m = sub.add_parser("make-synthetic", parents=[common], help="write a synthetic vessel dataset")
    m.add_argument("out_dir")
    m.add_argument("--n", type=int, default=1)
    m.add_argument("--size", type=int, default=64)
    m.add_argument("--split", default="train")
    m.set_defaults(func=cmd_make_synthetic)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "augment" and not args.count_only and not args.out_dir:
        print("error: augment needs an output directory (or --count-only)", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, ModelFileError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ManifestError, DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except MkisError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
