"""Command-line entry point: ``cellattn {synth,train,eval,explain}``.

Every command writes a ``manifest.json`` into its output directory with the
resolved configuration, seed, normalization statistics, split manifest
reference, metrics and artifact paths, so that a run can be replayed.
Structured errors print one ``error:`` line and exit with status 1.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from cellattn import __version__
from cellattn import checkpoint as ckpt
from cellattn import config as cfg
from cellattn import data
from cellattn import explain as xp
from cellattn.models import ConfigError, build_model
from cellattn.tensor import NonFiniteError, ShapeError
from cellattn.train import TrainingError, evaluate, history_csv, train

log = logging.getLogger("cellattn")

MANIFEST = "manifest.json"
CHECKPOINT = "checkpoint.ckpt"
SPLIT_FILE = "split.txt"
HISTORY = "history.csv"
RESOLVED = "resolved_config.txt"
SYNTH_SPEC = "synth_spec.txt"
BASELINES = ("black", "zero")


class CliError(RuntimeError):
    pass


STRUCTURED_ERRORS = (CliError, ConfigError, data.DataError, ckpt.CheckpointError, TrainingError,
                     NonFiniteError, ShapeError, OSError)


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _prepare_out(out):
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise CliError(f"output directory {out} is not writable: {exc}") from None
    return out


def write_manifest(out, command, **fields):
    manifest = {"tool": "cellattn", "tool_version": __version__, "command": command}
    manifest.update(fields)
    path = Path(out) / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(run_dir):
    path = Path(run_dir) / MANIFEST
    if not path.is_file():
        raise CliError(f"no {MANIFEST} in {run_dir}; expected a train output directory")
    return json.loads(path.read_text())


# -- synth ----------------------------------------------------------------------

_SYNTH_KEYS = {"synth.image_size": int, "synth.count_per_class": int, "synth.mode": str, "synth.seed": int}


def read_synth_spec(path):
    """Synthetic dataset spec from flat ``synth.*`` keys; missing keys keep defaults."""
    kwargs = {}
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = (s.strip() for s in line.partition("="))
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        if key not in _SYNTH_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            kwargs[key.split(".", 1)[1]] = _SYNTH_KEYS[key](value)
        except ValueError:
            raise ConfigError(f"{path}:{lineno}: invalid value {value!r} for {key}") from None
    return data.SyntheticSpec(**kwargs)


def cmd_synth(spec_path, out, seed=None):
    """Write a directory-per-class synthetic dataset and echo its spec."""
    spec = read_synth_spec(spec_path) if spec_path else data.SyntheticSpec()
    if seed is not None:
        spec = data.SyntheticSpec(spec.class_names, spec.class_params, spec.image_size,
                                  spec.count_per_class, spec.mode, seed)
    out = _prepare_out(out)
    dataset = data.synthesize_dataset(spec)
    data.write_image_directory(dataset, out)
    (out / SYNTH_SPEC).write_text(spec.to_text())
    write_manifest(out, "synth", seed=spec.seed, config=spec.to_text(),
                   counts={n: int(c) for n, c in zip(dataset.class_names, dataset.class_counts())},
                   artifacts={"spec": SYNTH_SPEC, "images": len(dataset)})
    log.info("wrote %d images to %s", len(dataset), out)
    return dataset


# -- train ----------------------------------------------------------------------

def resolve_run_config(config_path=None, seed=None, epochs=None):
    values = cfg.load(config_path) if config_path else {}
    root = values.get("data.root")
    if root and config_path and not Path(root).is_absolute():
        # relative dataset paths are taken relative to the config file
        values["data.root"] = str((Path(config_path).parent / root).resolve())
    return cfg.RunConfig.from_values(values, seed=seed, epochs=epochs)


def load_split_data(rc):
    root = rc.get("data.root")
    if not root:
        raise ConfigError("data.root: a dataset directory is required")
    if not Path(root).is_dir():
        raise data.DataError(f"data.root: dataset directory {root} does not exist")
    dataset = data.load_image_directory(root, resize_to=rc.resize(), lenient=rc.lenient())
    mc = rc.model_config()
    if dataset.num_classes != mc.num_classes:
        raise ConfigError(f"model.num_classes: model has {mc.num_classes} classes, dataset {root} has "
                          f"{dataset.num_classes}")
    return data.stratified_split(dataset, rc.fractions(), seed=rc.seed)


def cmd_train(config_path=None, out="run", seed=None, epochs=None):
    """Train, keep the best-validation checkpoint and evaluate it on the test split."""
    rc = resolve_run_config(config_path, seed, epochs)
    out = _prepare_out(out)
    (out / RESOLVED).write_text(rc.to_text())
    raw_split = load_split_data(rc)
    split, stats = data.normalize(raw_split)
    (out / SPLIT_FILE).write_text(raw_split.manifest_text())
    model = build_model(rc.model_config())
    result = train(model, split, rc.train_config())
    ckpt.save_file(result.model, out / CHECKPOINT)
    (out / HISTORY).write_text(history_csv(result.history))
    metrics = {}
    artifacts = {"checkpoint": CHECKPOINT, "history": HISTORY, "split": SPLIT_FILE, "config": RESOLVED}
    if len(split.test):
        report = evaluate(result.model, split.part("test"))
        (out / "metrics_test.txt").write_text(report.to_text())
        metrics["test"] = {"accuracy": report.accuracy, "weighted_f1": report.weighted_f1}
        artifacts["metrics_test"] = "metrics_test.txt"
    write_manifest(out, "train", seed=rc.seed, config=rc.values, model_config_hash=rc.model_config().hash(),
                   norm_stats=stats.to_dict(), split_manifest=SPLIT_FILE, split_sha256=_sha256(out / SPLIT_FILE),
                   best_epoch=result.best_epoch, best_val_accuracy=result.best_val_accuracy,
                   metrics=metrics, artifacts=artifacts, checkpoint_sha256=_sha256(out / CHECKPOINT))
    return result


# -- eval -----------------------------------------------------------------------

def load_run(run_dir, checkpoint_path=None):
    """Model, normalization stats, resolved config and manifest of a train run."""
    run_dir = Path(run_dir)
    manifest = read_manifest(run_dir)
    rc = cfg.RunConfig.from_values(manifest["config"])
    model = ckpt.load_file(checkpoint_path or run_dir / CHECKPOINT, expected_config=rc.model_config())
    stats = data.NormStats.from_dict(manifest["norm_stats"])
    return model, stats, rc, manifest


def load_split_part(run_dir, rc, stats, split_name):
    if split_name not in data.SPLIT_NAMES:
        raise data.DataError(f"unknown split {split_name!r}; valid names: {', '.join(data.SPLIT_NAMES)}")
    where = {}
    for line in (Path(run_dir) / SPLIT_FILE).read_text().splitlines():
        sid, _, name = line.partition("\t")
        where[sid] = name
    dataset = data.load_image_directory(rc.get("data.root"), resize_to=rc.resize(), lenient=rc.lenient())
    missing = [sid for sid in where if sid not in set(dataset.ids)]
    if missing or len(where) != len(dataset):
        raise data.DataError(f"dataset at {rc.get('data.root')} no longer matches the split manifest "
                             f"({len(missing)} listed samples missing)")
    idx = [i for i, sid in enumerate(dataset.ids) if where[sid] == split_name]
    normed = data.Dataset(stats.apply(dataset.images), dataset.labels, dataset.ids, dataset.class_names)
    return normed.subset(idx)


def cmd_eval(run_dir, split="test", out=None, checkpoint_path=None):
    """Score a checkpoint on one split recorded in the run's split manifest."""
    model, stats, rc, manifest = load_run(run_dir, checkpoint_path)
    part = load_split_part(run_dir, rc, stats, split)
    if len(part) == 0:
        raise data.DataError(f"split {split!r} is empty")
    report = evaluate(model, part)
    out = _prepare_out(out or run_dir)
    name = f"metrics_{split}.txt"
    (out / name).write_text(report.to_text())
    fields = dict(seed=rc.seed, config=rc.values, norm_stats=manifest["norm_stats"],
                  split_manifest=str(Path(run_dir) / SPLIT_FILE), split=split,
                  metrics={split: {"accuracy": report.accuracy, "weighted_f1": report.weighted_f1}},
                  artifacts={"metrics": name},
                  checkpoint_sha256=_sha256(checkpoint_path or Path(run_dir) / CHECKPOINT))
    if Path(out).resolve() == Path(run_dir).resolve():
        # keep the train manifest; eval gets its own file next to it
        path = Path(out) / f"manifest_eval_{split}.json"
        path.write_text(json.dumps({"tool": "cellattn", "tool_version": __version__, "command": "eval",
                                    **fields}, indent=2, sort_keys=True) + "\n")
    else:
        write_manifest(out, "eval", **fields)
    return report


# -- explain ----------------------------------------------------------------------

def read_image(path, size):
    """Decode ``path`` to a (3, size, size) float array in [0, 1], resizing if needed."""
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            if img.size != (size, size):
                print(f"notice: resizing {path} from {img.size[0]}x{img.size[1]} to {size}x{size}",
                      file=sys.stderr)
                img = img.resize((size, size), Image.BILINEAR)
            return (np.asarray(img, dtype=np.float32) / 255.0).transpose(2, 0, 1)
    except (UnidentifiedImageError, OSError) as exc:
        raise data.DataError(f"cannot decode image {path}: {exc}") from None


def make_baseline(kind, stats, shape):
    if kind == "black":
        return stats.apply(np.zeros((1,) + tuple(shape), dtype=np.float32))[0]
    if kind == "zero":
        return np.zeros(shape, dtype=np.float32)
    raise CliError(f"unknown baseline {kind!r}; valid: {', '.join(BASELINES)}")


def explain_one(model, image, stats, stem, out, steps=50, baseline="black", target=None):
    """Write the five panels and the sidecar report for one pixel-space image."""
    x = stats.apply(image[None])[0].astype(np.float64)
    predicted = xp.predict_class(model, x)
    k = model.config.num_classes
    if target is not None and not 0 <= target < k:
        raise CliError(f"--target {target} out of range [0, {k})")
    tgt = predicted if target is None else target
    base = make_baseline(baseline, stats, x.shape).astype(np.float64)
    ig = xp.integrated_gradients(model, x, base, steps=steps, target=tgt, baseline_desc=baseline)
    grad = xp.saliency(model, x, tgt)
    panels = {
        "original": xp.render_original(image),
        "gradient_overlay": xp.render_overlay(image, grad, "overlay"),
        "ig_overlay": xp.render_overlay(image, ig, "overlay"),
        "gradient": xp.render_overlay(image, grad, "raw"),
        "ig": xp.render_overlay(image, ig, "raw"),
    }
    files = []
    for name, png in panels.items():
        path = Path(out) / f"{stem}_{name}.png"
        path.write_bytes(png)
        files.append(path.name)
    report = Path(out) / f"{stem}_report.txt"
    report.write_text(ig.report_text(predicted))
    files.append(report.name)
    return ig, predicted, files


def cmd_explain(run_dir, images=(), samples=(), out=None, steps=50, baseline="black", target=None,
                checkpoint_path=None):
    """Gradient and integrated-gradients panels for image files and/or dataset sample ids."""
    if steps < 1:
        raise CliError("--steps must be >= 1")
    if baseline not in BASELINES:
        raise CliError(f"unknown baseline {baseline!r}; valid: {', '.join(BASELINES)}")
    if not images and not samples:
        raise CliError("give at least one --image or --sample")
    model, stats, rc, manifest = load_run(run_dir, checkpoint_path)
    model.astype(np.float64)
    size = model.config.input_size
    out = _prepare_out(out or Path(run_dir) / "explain")
    inputs = [(Path(p).stem, read_image(p, size)) for p in images]
    if samples:
        dataset = data.load_image_directory(rc.get("data.root"), resize_to=size, lenient=rc.lenient())
        for sid in samples:
            inputs.append((sid.replace("/", "_").rsplit(".", 1)[0], dataset.images[dataset.index_of(sid)]))
    results = {}
    for stem, image in inputs:
        ig, predicted, files = explain_one(model, image, stats, stem, out, steps, baseline, target)
        results[stem] = {"target": ig.target, "predicted": predicted, "completeness_gap": ig.completeness_gap,
                         "relative_gap": ig.relative_gap, "files": files}
    write_manifest(out, "explain", seed=rc.seed, config=rc.values, norm_stats=manifest["norm_stats"],
                   split_manifest=str(Path(run_dir) / SPLIT_FILE), steps=steps, baseline=baseline,
                   target=target, metrics=results,
                   artifacts={stem: r["files"] for stem, r in results.items()})
    return results


# -- argument parsing -------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="cellattn", description="Attention-augmented cell image classifiers.")
    p.add_argument("--version", action="version", version=f"cellattn {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic directory-per-class dataset")
    s.add_argument("--config", help="synth spec file (synth.* keys)")
    s.add_argument("--seed", type=int, help="override synth.seed")
    s.add_argument("--out", required=True, help="dataset directory to create")

    t = sub.add_parser("train", help="train a model", epilog="config keys:\n" + cfg.describe_defaults(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    t.add_argument("--config", help="run config file (key = value lines)")
    t.add_argument("--seed", type=int, help="override the config seed")
    t.add_argument("--epochs", type=int, help="override train.epochs")
    t.add_argument("--out", required=True, help="run directory to create")

    e = sub.add_parser("eval", help="evaluate a trained run on one split")
    e.add_argument("--run", required=True, help="train output directory")
    e.add_argument("--checkpoint", help="checkpoint to use instead of the run's best")
    e.add_argument("--split", default="test", help="train, validation or test (default: test)")
    e.add_argument("--out", help="output directory (default: the run directory)")

    x = sub.add_parser("explain", help="render gradient and integrated-gradients panels")
    x.add_argument("--run", required=True, help="train output directory")
    x.add_argument("--checkpoint", help="checkpoint to use instead of the run's best")
    x.add_argument("--image", action="append", default=[], help="image file (repeatable)")
    x.add_argument("--sample", action="append", default=[], help="dataset sample id, e.g. class/file.png")
    x.add_argument("--steps", type=int, default=50, help="integrated-gradients path steps (default: 50)")
    x.add_argument("--baseline", choices=BASELINES, default="black",
                   help="black: normalized black image; zero: all-zero model input (default: black)")
    x.add_argument("--target", type=int, help="class to attribute (default: the predicted class)")
    x.add_argument("--out", help="output directory (default: <run>/explain)")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "synth":
            cmd_synth(args.config, args.out, args.seed)
        elif args.command == "train":
            result = cmd_train(args.config, args.out, args.seed, args.epochs)
            print(f"best epoch {result.best_epoch} val accuracy {result.best_val_accuracy}")
        elif args.command == "eval":
            report = cmd_eval(args.run, args.split, args.out, args.checkpoint)
            print(report.to_text(), end="")
        elif args.command == "explain":
            results = cmd_explain(args.run, args.image, args.sample, args.out, args.steps, args.baseline,
                                  args.target, args.checkpoint)
            for stem, r in results.items():
                print(f"{stem}: target {r['target']} predicted {r['predicted']} "
                      f"completeness gap {r['completeness_gap']:.3g}")
    except STRUCTURED_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
