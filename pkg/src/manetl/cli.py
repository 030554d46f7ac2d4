"""``manetl`` command-line entry point."""

import argparse
import dataclasses
import datetime
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import gradsuite
from .branches import count_macs, model_macs
from .checkpoint import load_checkpoint, save_checkpoint
from .config import COMMANDS, VARIANTS, ModelConfig, parse_config, render_config
from .dataset import (dataset_fingerprint, generate_synthetic_dataset, load_directory,
                      preprocess_samples, read_manifest, split_dataset, write_dataset,
                      write_manifest)
from .exceptions import (CheckpointError, ConfigurationError, DataError, FormatError,
                         NumericalError)
from .functional import ConvSpec
from .model import MANETL
from .nn import count_params
from .tensor import inject_fault
from .training import (Trainer, ablation_table, append_metrics, evaluate, metrics_csv,
                       run_ablation)

logger = logging.getLogger("manetl")

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4

EPILOG = """\
exit status:
  0  success
  1  gradcheck found a gradient mismatch
  2  configuration or usage error
  3  data error (missing/corrupt dataset, manifest or checkpoint)
  4  numerical abort (non-finite loss)

environment:
  MANETL_THREADS  cap on BLAS worker threads (0 or unset = library default)
"""

MANIFEST_FILE = "manifest.jsonl"
DATA_DIR = "data"


def _add_common(parser):
    parser.add_argument("--config", help="flat 'key = value' configuration file")
    parser.add_argument("--seed", type=int, help="master seed for splits, init and training")
    parser.add_argument("--out", help="parent directory for run outputs (default: runs)")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any configuration key; may repeat")


def _add_data(parser):
    source = parser.add_mutually_exclusive_group()
    source.add_argument("--dataset", help="class-folder BMP tree, or a prepared run directory")
    source.add_argument("--synthetic", metavar="K,n",
                        help="generate K classes with n samples each")
    parser.add_argument("--no-preprocess", action="store_true", default=None,
                        help="skip color inversion and rotation augmentation")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="manetl", description="Two-branch attention network for character images.",
        epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    prepare = sub.add_parser("prepare", help="ingest or synthesize a dataset, split it, "
                             "write the manifest", epilog=EPILOG,
                             formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_common(prepare)
    _add_data(prepare)

    for name, text in (("train", "train one model variant"),
                       ("ablate", "train all three variants and compare")):
        p = sub.add_parser(name, help=text, epilog=EPILOG,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        _add_common(p)
        _add_data(p)
        if name == "train":
            p.add_argument("--variant", choices=VARIANTS)
            p.add_argument("--checkpoint", help="resume from this checkpoint file")

    ev = sub.add_parser("evaluate", help="score a checkpoint on the test split", epilog=EPILOG,
                        formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_common(ev)
    _add_data(ev)
    ev.add_argument("--checkpoint", help="checkpoint file to evaluate")

    macs = sub.add_parser("macs", help="multiply-accumulate arithmetic of a 5x5 path",
                          epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_common(macs)
    macs.add_argument("--variant", choices=VARIANTS)

    grad = sub.add_parser("gradcheck", help="finite-difference check of every backward rule",
                          epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_common(grad)
    grad.add_argument("--scale", choices=("tiny", "default"))
    grad.add_argument("--inject-fault", metavar="OP", help=argparse.SUPPRESS)
    return parser


def resolve(args):
    text = ""
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config file: {exc}") from None
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigurationError(f"--set expects KEY=VALUE, got '{item}'")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    for key in ("seed", "out", "dataset", "synthetic", "variant", "checkpoint", "scale",
                "no_preprocess"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    return parse_config(args.command, text, overrides)


def make_run_dir(spec):
    """Fresh ``<out>/<command>-<timestamp>`` directory; never reuses an existing one."""
    stamp = datetime.datetime.now().strftime("%Y%m%d-%H%M%S")
    base = Path(spec.out) / f"{spec.command}-{stamp}"
    path, n = base, 1
    while True:
        try:
            path.mkdir(parents=True)
            break
        except FileExistsError:
            n += 1
            path = base.with_name(f"{base.name}-{n}")
    (path / "config.txt").write_text(render_config(spec))
    return path


# -- data -------------------------------------------------------------------

class LoadedData:
    def __init__(self, manifest, samples, spec):
        self.manifest = manifest
        self.samples = samples
        self.fingerprint = dataset_fingerprint(manifest, samples)
        self.train_idx = manifest.indices("train")
        self.test_idx = manifest.indices("test")
        self.labels = manifest.labels()
        self.invert = not spec.no_preprocess
        self.augment = spec.train.augment and not spec.no_preprocess
        self.seeds = [r.aug_seed for r in manifest.records]

    def images(self, indices, epoch=None):
        augment = self.augment and epoch is not None
        return preprocess_samples(self.samples, indices, augment=augment, seeds=self.seeds,
                                  epoch=epoch or 0, invert=self.invert)

    def augmenter(self):
        if not self.augment:
            return None
        return lambda epoch: self.images(self.train_idx, epoch)

    def write_provenance(self, run_dir):
        write_manifest(self.manifest, run_dir / MANIFEST_FILE)
        (run_dir / "fingerprint.txt").write_text(self.fingerprint + "\n")


def load_data(spec):
    if spec.synthetic:
        classes, per_class = spec.synthetic_shape
        manifest, samples = generate_synthetic_dataset(classes, per_class, spec.seed)
        manifest = split_dataset(manifest, spec.train_fraction, spec.seed)
    elif spec.dataset:
        root = Path(spec.dataset)
        if (root / MANIFEST_FILE).is_file():
            # a directory written by `prepare`: reuse its split verbatim
            manifest = read_manifest(root / MANIFEST_FILE)
            _, samples = load_directory(root / DATA_DIR)
            by_path = {s.source: s for s in samples}
            missing = [r.path for r in manifest.records if r.path not in by_path]
            if missing:
                raise DataError(f"manifest lists {len(missing)} missing images, e.g. {missing[0]}")
            samples = [by_path[r.path] for r in manifest.records]
            for s, r in zip(samples, manifest.records):
                s.label = r.label
        else:
            manifest, samples = load_directory(root)
            manifest = split_dataset(manifest, spec.train_fraction, spec.seed)
    else:
        raise ConfigurationError("no data source: pass --dataset DIR or --synthetic K,n")
    return LoadedData(manifest, samples, spec)


# -- commands ---------------------------------------------------------------

def cmd_prepare(spec, out):
    data = load_data(spec)
    run_dir = make_run_dir(spec)
    write_dataset(data.samples, data.manifest, run_dir / DATA_DIR)
    data.write_provenance(run_dir)
    counts = data.manifest.class_counts
    out.write(f"prepared {len(data.samples)} images in {data.manifest.class_count} classes "
              f"(train {int(counts('train').sum())}, test {int(counts('test').sum())})\n")
    out.write(f"fingerprint {data.fingerprint}\n{run_dir}\n")
    return EXIT_OK


def _write_timing(path, records):
    lines = ["epoch,seconds"] + [f"{r.epoch},{r.seconds:.3f}" for r in records]
    path.write_text("\n".join(lines) + "\n")


def cmd_train(spec, out):
    data = load_data(spec)
    if spec.checkpoint:
        ckpt = _read_checkpoint(spec.checkpoint)
        trainer = Trainer.from_checkpoint(ckpt, data.augmenter())
        # keep the run reproducible from its own directory
        spec = dataclasses.replace(spec, model=ckpt.model_config,
                                   train=dataclasses.replace(ckpt.train_config,
                                                             epochs=spec.train.epochs))
        trainer.config = spec.train
    else:
        config = spec.model
        if config.num_classes == 0:
            config = config.with_classes(data.manifest.class_count)
        spec = dataclasses.replace(spec, model=config)
        trainer = Trainer(MANETL(config, seed=spec.seed), spec.train, data.augmenter())
    run_dir = make_run_dir(spec)
    data.write_provenance(run_dir)
    metrics_path = run_dir / "metrics.csv"

    def on_epoch(record):
        append_metrics(metrics_path, record)
        out.write(f"epoch {record.epoch:3d}  loss {record.train_loss:.4f}  "
                  f"train_acc {record.train_accuracy:.4f}  eval_acc {record.eval_accuracy:.4f}\n")

    history = trainer.fit(data.images(data.train_idx), data.labels[data.train_idx],
                          data.images(data.test_idx), data.labels[data.test_idx],
                          on_epoch=on_epoch)
    if not history:
        metrics_path.write_text(metrics_csv([]))
    _write_timing(run_dir / "timing.csv", history)
    (run_dir / "checkpoint.bin").write_bytes(save_checkpoint(trainer.checkpoint()))
    out.write(f"{run_dir}\n")
    return EXIT_OK


def _read_checkpoint(path):
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint: {exc}") from None
    return load_checkpoint(raw)


def cmd_evaluate(spec, out):
    if not spec.checkpoint:
        raise ConfigurationError("evaluate needs --checkpoint")
    ckpt = _read_checkpoint(spec.checkpoint)
    data = load_data(spec)
    if data.manifest.class_count != ckpt.model_config.num_classes:
        raise DataError(f"checkpoint predicts {ckpt.model_config.num_classes} classes, "
                        f"dataset has {data.manifest.class_count}")
    model = MANETL(ckpt.model_config)
    model.load_state_dict(ckpt.tensors)
    loss, acc = evaluate(model, data.images(data.test_idx), data.labels[data.test_idx])
    run_dir = make_run_dir(spec)
    data.write_provenance(run_dir)
    (run_dir / "evaluation.csv").write_text(
        f"checkpoint_epoch,eval_loss,eval_accuracy\n{ckpt.epoch},{loss!r},{acc!r}\n")
    out.write(f"eval_loss {loss:.4f}  eval_accuracy {acc:.4f}  "
              f"({len(data.test_idx)} test images)\n{run_dir}\n")
    return EXIT_OK


def cmd_ablate(spec, out):
    data = load_data(spec)
    config = spec.model
    if config.num_classes == 0:
        config = config.with_classes(data.manifest.class_count)
    spec = dataclasses.replace(spec, model=config)
    run_dir = make_run_dir(spec)
    data.write_provenance(run_dir)

    def on_epoch(variant, record):
        append_metrics(run_dir / f"metrics-{variant}.csv", record)
        out.write(f"{variant:<10} epoch {record.epoch:3d}  eval_acc {record.eval_accuracy:.4f}\n")

    results = run_ablation(data.images(data.train_idx), data.labels[data.train_idx],
                           data.images(data.test_idx), data.labels[data.test_idx],
                           config, spec.train, data.augmenter(), on_epoch=on_epoch)
    for variant, history in results.items():
        _write_timing(run_dir / f"timing-{variant}.csv", history)
    table = ablation_table(results)
    (run_dir / "ablation.txt").write_text(table + "\n")
    out.write(table + f"\n{run_dir}\n")
    return EXIT_OK


def _millions(n):
    return f"{n / 1e6:.1f}M"


def cmd_macs(spec, out):
    # a 5x5 convolution producing 48 maps from 480 input maps on a 14x14 grid
    direct = count_macs(ConvSpec(480, 48, 5, 5, 1, 2), 14, 14)
    reduce = count_macs(ConvSpec(480, 16, 1, 1), 14, 14)
    conv = count_macs(ConvSpec(16, 48, 5, 5, 1, 2), 14, 14)
    rows = [
        ("5x5 conv, 480 -> 48 on 14x14", direct),
        ("1x1 reduce, 480 -> 16 on 14x14", reduce),
        ("5x5 conv, 16 -> 48 on 14x14", conv),
        ("1x1 reduce + 5x5 conv total", reduce + conv),
    ]
    out.write(f"{'computation':<34} {'MACs':>12} {'rounded':>8}\n")
    for name, value in rows:
        out.write(f"{name:<34} {value:>12d} {_millions(value):>8}\n")
    out.write(f"reduction factor {direct / (reduce + conv):.1f}x\n")
    config = spec.model.with_classes(spec.model.num_classes or 50)
    model = MANETL(config, seed=spec.seed)
    out.write(f"model variant {config.variant}: {count_params(model)} parameters, "
              f"{model_macs(model, config.input_size)} conv MACs per image\n")
    return EXIT_OK


def cmd_gradcheck(spec, out, fault=None):
    if spec.scale == "tiny":
        config, max_elements = gradsuite.TINY_CONFIG, 4
    else:
        config = ModelConfig(num_classes=4, variant=spec.model.variant)
        max_elements = 2
    start = time.perf_counter()
    if fault:
        with inject_fault(fault, 1.1):
            results = (gradsuite.primitive_checks(spec.seed)
                       + gradsuite.composed_checks(spec.seed, config, max_elements))
    else:
        results = (gradsuite.primitive_checks(spec.seed)
                   + gradsuite.composed_checks(spec.seed, config, max_elements))
    failed = 0
    for r in results:
        name, err = r.report.worst()
        status = "ok" if r.passed else "FAIL"
        out.write(f"{status:<4} {r.name:<22} tol {r.tol:.0e}  max_rel_err {r.report.max_error:.3e}"
                  f"  worst {name}\n")
        if not r.passed:
            failed += 1
            for pname, perr in r.report.failures().items():
                out.write(f"     {r.name}.{pname}: relative error {perr:.3e}\n")
    out.write(f"{len(results) - failed}/{len(results)} checks passed in "
              f"{time.perf_counter() - start:.1f}s\n")
    return EXIT_CHECK_FAILED if failed else EXIT_OK


HANDLERS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "macs": cmd_macs,
}
assert set(HANDLERS) | {"gradcheck"} == set(COMMANDS)


def _thread_limit():
    raw = os.environ.get("MANETL_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ConfigurationError(f"MANETL_THREADS must be an integer, got '{raw}'") from None
    if n < 0:
        raise ConfigurationError("MANETL_THREADS must be >= 0")
    return n or None


def main(argv=None, out=None):
    out = out or sys.stdout
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        spec = resolve(args)
        with threadpool_limits(limits=_thread_limit()):
            if spec.command == "gradcheck":
                return cmd_gradcheck(spec, out, getattr(args, "inject_fault", None))
            return HANDLERS[spec.command](spec, out)
    except ConfigurationError as exc:
        print(f"manetl: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FormatError, CheckpointError) as exc:
        print(f"manetl: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"manetl: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


def entry():
    sys.exit(main())
