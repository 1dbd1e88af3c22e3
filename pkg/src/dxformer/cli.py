"""Command-line entry point: ``dxformer {synth,train,predict,eval,metrics,gradcheck}``.

Every subcommand reads an optional ``--config`` file of ``key=value`` lines
(``#`` starts a comment) and then ``--key=value`` overrides, which win.
Keys are checked against a closed per-subcommand schema; ``--help`` lists it.
"""
import argparse
import sys
import time
from dataclasses import MISSING, fields
from importlib import resources
from pathlib import Path

import numpy as np

from . import data_io as dio
from . import kernels
from .errors import ConfigError, DXFormerError
from .metrics import EDIT_MODES, evaluate_split
from .model import ModelConfig
from .training import TrainConfig, evaluate, predict_samples, train

COMMANDS = ("synth", "train", "predict", "eval", "metrics", "gradcheck")


class UsageError(DXFormerError):
    """Bad command line or config file (exit status 2)."""


# ---------------------------------------------------------------------------
# schema


class Key:
    def __init__(self, name, typ, default=None, help="", required=False):
        self.name, self.typ, self.default, self.help, self.required = name, typ, default, help, required

    def parse(self, text):
        if self.typ is bool:
            low = str(text).strip().lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise UsageError(f"{self.name}: expected true/false, got {text!r}")
        if self.typ in (int, float):
            try:
                return self.typ(text)
            except ValueError:
                raise UsageError(f"{self.name}: expected {self.typ.__name__}, got {text!r}") from None
        return str(text)


def _dataclass_keys(cls, skip=(), help_text=None):
    out = []
    for f in fields(cls):
        if f.name in skip:
            continue
        default = None if f.default is MISSING else f.default
        typ = f.type if isinstance(f.type, type) else {"int": int, "float": float, "bool": bool}.get(f.type, str)
        out.append(Key(f.name, typ, default, (help_text or {}).get(f.name, "")))
    return out


PATH_HELP = {
    "data_dir": "dataset root; fills features_dir, labels_dir and mapping when they are unset",
    "features_dir": "directory of <id>.dxft or <id>.csv feature files",
    "labels_dir": "directory of <id>.txt label files",
    "mapping": "class mapping file ('<id> <name>' lines)",
    "split": "manifest(s) of video ids, comma-separated; default: every feature file",
}


def _paths(*names, required=()):
    return [Key(n, str, None, PATH_HELP.get(n, ""), n in required) for n in names]


SCHEMAS = {
    "synth": _dataclass_keys(dio.SynthSpec) + [Key("out_dir", str, None, "output dataset root", True)],
    "train": (
        _paths("data_dir", "features_dir", "labels_dir", "mapping", "split")
        + [Key("out_dir", str, None, "checkpoint directory", True)]
        + _dataclass_keys(ModelConfig, skip=("input_dim", "num_classes", "seed"))
        + _dataclass_keys(TrainConfig)
        + [Key("timing", bool, False, "print one wall-clock timing line at the end")]
    ),
    "predict": (
        [Key("checkpoint", str, None, "trained checkpoint", True)]
        + _paths("data_dir", "features_dir", "mapping", "split")
        + [Key("out_dir", str, None, "directory for <id>.txt predicted label files", True)]
    ),
    "eval": (
        [Key("checkpoint", str, None, "trained checkpoint", True)]
        + _paths("data_dir", "features_dir", "labels_dir", "mapping", "split")
        + [Key("edit_mode", str, "per_video", f"one of {EDIT_MODES}"),
           Key("ignore_label", str, None, "class name left out of every metric"),
           Key("out", str, None, "also write the report to this file")]
    ),
    "metrics": (
        [Key("pred_dir", str, None, "directory of predicted <id>.txt label files", True),
         Key("gt_dir", str, None, "directory of ground-truth <id>.txt label files", True),
         Key("mapping", str, None, PATH_HELP["mapping"], True),
         Key("edit_mode", str, "per_video", f"one of {EDIT_MODES}"),
         Key("ignore_label", str, None, "class name left out of every metric"),
         Key("out", str, None, "also write the report to this file")]
    ),
    "gradcheck": [
        Key("seeds", int, 20, "number of random seeds per component"),
        Key("backend", str, None, f"kernel backend, one of {kernels.available_backends()}"),
    ],
}

HELP = {
    "synth": "write a seeded synthetic dataset (features, labels, mapping, 4 split manifests)",
    "train": "train a model; prints one key=value line per epoch",
    "predict": "write per-video predicted label files",
    "eval": "score a checkpoint on a split",
    "metrics": "score predicted label files against ground truth (no model)",
    "gradcheck": "run the 64-bit central-difference gradient suite",
}


def _shipped_config(name):
    ref = resources.files("dxformer") / "configs" / (name if name.endswith(".cfg") else name + ".cfg")
    return ref if ref.is_file() else None


def read_config_file(path):
    p = Path(path)
    if not p.is_file():
        shipped = _shipped_config(str(path))
        if shipped is None:
            raise UsageError(f"config file not found: {path}")
        text, origin = shipped.read_text(encoding="utf-8"), f"<shipped {shipped.name}>"
    else:
        text, origin = p.read_text(encoding="utf-8"), str(p)
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{origin}: line {lineno}: expected key=value, got {raw.strip()!r}")
        out[key.strip()] = (value.strip(), f"{origin}:{lineno}")
    return out


def resolve(command, config_path, overrides):
    """Merge defaults < config file < overrides, validating every key against the schema."""
    schema = {k.name: k for k in SCHEMAS[command]}
    values = {name: k.default for name, k in schema.items()}
    if config_path:
        for key, (text, where) in read_config_file(config_path).items():
            if key not in schema:
                raise UsageError(f"{where}: unknown key {key!r} for '{command}'")
            values[key] = schema[key].parse(text)
    for key, text in overrides.items():
        values[key] = schema[key].parse(text)
    missing = [k.name for k in schema.values() if k.required and values[k.name] is None]
    if missing:
        raise UsageError(f"missing required key(s) for '{command}': {', '.join(missing)}")
    return values


# ---------------------------------------------------------------------------
# helpers


def _fill_data_paths(v):
    root = v.get("data_dir")
    if root:
        for key, sub in (("features_dir", "features"), ("labels_dir", "labels"), ("mapping", "mapping.txt")):
            if key in v and not v[key]:
                v[key] = str(Path(root) / sub)
    for key in ("features_dir", "labels_dir", "mapping"):
        if key in v and not v[key]:
            raise UsageError(f"'{key}' is required (directly or through data_dir)")
    return v


def _subset(v, cls, skip=()):
    return {f.name: v[f.name] for f in fields(cls) if f.name in v and f.name not in skip and v[f.name] is not None}


def _ids(v):
    if not v.get("split"):
        return None
    ids = []
    for path in v["split"].split(","):
        ids += [i for i in dio.read_split(path.strip()) if i not in ids]
    return ids


def _ignore_id(mapping, name):
    if name is None:
        return None
    if name not in mapping.names:
        raise ConfigError(f"ignore_label {name!r} is not in the class mapping")
    return mapping.id_of(name)


def _emit_report(report, out):
    text = report.to_record()
    sys.stdout.write(text)
    if out:
        Path(out).write_text(text, encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(v):
    spec = dio.SynthSpec(**_subset(v, dio.SynthSpec))
    samples, folds = dio.synth_generate(spec, v["out_dir"])
    print(f"videos={len(samples)} frames={sum(s.T for s in samples)} folds={len(folds)} out_dir={v['out_dir']}")


def cmd_train(v):
    _fill_data_paths(v)
    mapping = dio.ClassMapping.read(v["mapping"])
    samples = dio.load_dataset(v["features_dir"], v["labels_dir"], mapping, _ids(v))
    if not samples:
        raise ConfigError("no training videos found")
    model_cfg = ModelConfig(input_dim=samples[0].D, num_classes=len(mapping), seed=v["seed"],
                            **_subset(v, ModelConfig, skip=("seed",)))
    train_cfg = TrainConfig(**_subset(v, TrainConfig))
    start = time.perf_counter()

    def on_epoch(r):
        print(f"epoch={r['epoch']} step={r['step']} loss={r['loss']:.6f} train_acc={r['train_acc']:.2f}", flush=True)

    ckpt, _ = train(samples, model_cfg, train_cfg, out_dir=v["out_dir"], on_epoch=on_epoch)
    print(f"checkpoint={Path(v['out_dir']) / 'final.dxck'} step={ckpt.step}")
    if v["timing"]:
        print(f"timing wall_seconds={time.perf_counter() - start:.3f}")


def cmd_predict(v):
    _fill_data_paths(v)
    ckpt = dio.load_checkpoint(v["checkpoint"])
    mapping = dio.ClassMapping.read(v["mapping"])
    if len(mapping) != ckpt.cfg.num_classes:
        raise ConfigError(f"mapping has {len(mapping)} classes, checkpoint expects {ckpt.cfg.num_classes}")
    ids = _ids(v) or dio.list_video_ids(v["features_dir"])
    samples = []
    for i in ids:
        feats = dio.read_feature_file(dio._feature_path(v["features_dir"], i))
        samples.append(dio.SegmentationSample(i, feats, np.zeros(feats.shape[1], np.int64)))
    out = Path(v["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    for s, pred in zip(samples, predict_samples(samples, ckpt)):
        dio.write_labels(out / (s.id + dio.LABEL_EXT), pred, mapping)
    print(f"videos={len(samples)} out_dir={out}")


def cmd_eval(v):
    _fill_data_paths(v)
    ckpt = dio.load_checkpoint(v["checkpoint"])
    mapping = dio.ClassMapping.read(v["mapping"])
    samples = dio.load_dataset(v["features_dir"], v["labels_dir"], mapping, _ids(v))
    _emit_report(evaluate(samples, ckpt, v["edit_mode"], _ignore_id(mapping, v["ignore_label"])), v["out"])


def cmd_metrics(v):
    mapping = dio.ClassMapping.read(v["mapping"])
    gt_dir, pred_dir = Path(v["gt_dir"]), Path(v["pred_dir"])
    ids = sorted(p.stem for p in gt_dir.glob("*" + dio.LABEL_EXT))
    if not ids:
        raise ConfigError(f"no label files in {gt_dir}")
    missing = [i for i in ids if not (pred_dir / (i + dio.LABEL_EXT)).is_file()]
    if missing:
        raise ConfigError(f"no prediction for: {', '.join(missing)}")
    pairs = [(dio.read_labels(pred_dir / (i + dio.LABEL_EXT), mapping), dio.read_labels(gt_dir / (i + dio.LABEL_EXT), mapping))
             for i in ids]
    _emit_report(evaluate_split(pairs, v["edit_mode"], _ignore_id(mapping, v["ignore_label"])), v["out"])


def cmd_gradcheck(v):
    from . import gradcheck

    if v["seeds"] < 1:
        raise ConfigError("seeds must be >= 1")
    ok = True
    with kernels.use_backend(v["backend"] or kernels.get_backend()):
        report = gradcheck.run_suite(range(v["seeds"]))
    for name, err in report.items():
        tol = gradcheck.tolerance(name)
        ok &= err <= tol
        print(f"component={name} max_rel_err={err:.3e} tol={tol:.0e} ok={'true' if err <= tol else 'false'}")
    if not ok:
        raise DXFormerError("gradient check failed")


RUNNERS = {"synth": cmd_synth, "train": cmd_train, "predict": cmd_predict, "eval": cmd_eval,
           "metrics": cmd_metrics, "gradcheck": cmd_gradcheck}


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="dxformer", description="Temporal action segmentation with dual dilated attention.")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}", parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name, help=HELP[name], description=HELP[name] + ". Keys may come from --config.")
        p.add_argument("--config", metavar="FILE", help="key=value config file (or a shipped config name)")
        group = p.add_argument_group("keys")
        for key in SCHEMAS[name]:
            kind = key.typ.__name__ if key.typ is not str else "str"
            note = "required" if key.required else f"default: {key.default}"
            group.add_argument(f"--{key.name}", dest=key.name, metavar=kind.upper(), default=argparse.SUPPRESS,
                               help=f"{key.help + '; ' if key.help else ''}{kind}, {note}")
    return parser


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        parser = build_parser()
        if not argv:
            parser.print_help(sys.stderr)
            return 2
        args = vars(parser.parse_args(argv))
        command = args.pop("command")
        if command is None:
            raise UsageError(f"choose a subcommand from {', '.join(COMMANDS)}")
        config = args.pop("config", None)
        values = resolve(command, config, args)
        RUNNERS[command](values)
        return 0
    except UsageError as exc:
        print(f"dxformer: usage error: {exc}", file=sys.stderr)
        return 2
    except (DXFormerError, OSError, UnicodeDecodeError) as exc:
        print(f"dxformer: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
