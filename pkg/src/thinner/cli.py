"""Command-line driver.

    thinner train    --config run.json
    thinner prune    --config run.json [--model out/model.model]
    thinner eval     --config run.json --model out/round_7.model
    thinner compare  --config run.json
    thinner inspect  --model out/model.model
    thinner scores   --config run.json --metric std

A run config is one JSON object. Every key is optional; unknown keys abort.
Command-line flags override the file. One ``seed`` drives everything through
``thinner.seeding``.
"""

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import dataclass, field, fields

from thinner import data as D
from thinner import network as N
from thinner import pruning as P
from thinner.errors import ConfigError, ThinnerError
from thinner.scoring import METRICS, compute_scores, dump_scores

DESK_MODEL = [
    {"kind": "conv", "out": 8, "kernel": 3, "padding": 1},
    {"kind": "relu"},
    {"kind": "maxpool", "size": 2},
    {"kind": "conv", "out": 16, "kernel": 3, "padding": 1},
    {"kind": "relu"},
    {"kind": "maxpool", "size": 2},
    {"kind": "flatten"},
    {"kind": "dense", "out": 32},
    {"kind": "relu"},
    {"kind": "dense", "out": 16},
    {"kind": "relu"},
    {"kind": "dense", "out": 2},
    {"kind": "output"},
]


def vgg16_cifar(classes=10):
    """VGG-16-style stack with two dense layers: 13 conv + fc1 prunable."""
    spec = []
    for block, (width, depth) in enumerate([(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)], 1):
        for k in range(1, depth + 1):
            spec += [{"kind": "conv", "out": width, "kernel": 3, "padding": 1,
                      "name": f"conv{block}_{k}"}, {"kind": "relu"}]
        spec.append({"kind": "maxpool", "size": 2})
    spec += [{"kind": "flatten"}, {"kind": "dense", "out": 512, "name": "fc1"}, {"kind": "relu"},
             {"kind": "dense", "out": classes, "name": "output"}, {"kind": "output"}]
    return spec


PRESETS = {"desk": DESK_MODEL, "vgg16-cifar": vgg16_cifar()}

DESK_DATA = {"source": "synthetic", "task": "bars", "n": 8000, "val_fraction": 0.2}


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "run"
    scheme: str = "global"
    metric: str = "aaws"
    ratio: float = 0.05
    target: float = 0.0
    max_rounds: int = 7
    min_neurons_per_layer: int = 1
    stats_samples: int = 1024
    per_layer_ratio: float = 0.3011
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 5
    finetune_epochs: int = 2
    finetune_learning_rate: float = 0.01
    data: dict = field(default_factory=lambda: dict(DESK_DATA))
    model: list = field(default_factory=lambda: [dict(d) for d in DESK_MODEL])

    def __post_init__(self):
        if self.scheme not in P.SCHEMES:
            raise ConfigError(f"scheme must be one of {P.SCHEMES}, got {self.scheme!r}")
        if not 0 < self.per_layer_ratio < 1:
            raise ConfigError(f"per_layer_ratio must be in (0, 1), got {self.per_layer_ratio}")
        if self.finetune_epochs < 0:
            raise ConfigError(f"finetune_epochs must be non-negative, got {self.finetune_epochs}")
        source = self.data.get("source")
        allowed = {"synthetic": {"source", "task", "n", "val_fraction"},
                   "idx": {"source", "train_images", "train_labels", "val_images",
                           "val_labels", "val_fraction", "classes"}}
        if source not in allowed:
            raise ConfigError(f"data.source must be 'synthetic' or 'idx', got {source!r}")
        extra = set(self.data) - allowed[source]
        if extra:
            raise ConfigError(f"unknown data keys: {sorted(extra)}")
        if isinstance(self.model, str):
            if self.model not in PRESETS:
                raise ConfigError(f"unknown model preset {self.model!r}; known: {sorted(PRESETS)}")
            self.model = [dict(d) for d in PRESETS[self.model]]
        if not isinstance(self.model, list) or not self.model:
            raise ConfigError("model must be a preset name or a non-empty list of layer descriptors")
        try:
            self.train_config()
            self.prune_config()
        except ValueError as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def from_dict(cls, values):
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**values)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    def train_config(self):
        return N.TrainConfig(self.learning_rate, self.momentum, self.batch_size,
                             self.epochs, self.seed)

    def prune_config(self):
        finetune = N.TrainConfig(self.finetune_learning_rate, self.momentum, self.batch_size,
                                 self.finetune_epochs, self.seed)
        return P.PruneConfig(self.ratio, self.target, self.metric, self.max_rounds,
                             self.min_neurons_per_layer, finetune, self.stats_samples,
                             self.seed)


OVERRIDES = ("seed", "out", "metric", "scheme", "ratio", "target", "max_rounds")


def load_config(args):
    values = {}
    if args.config:
        with open(args.config) as f:
            values = json.load(f)
        if not isinstance(values, dict):
            raise ConfigError("config file must hold a JSON object")
    for key in OVERRIDES:
        value = getattr(args, key, None)
        if value is not None:
            values[key] = value
    return RunConfig.from_dict(values)


def load_datasets(cfg):
    """``(train, validation)`` for the configured data source."""
    d = cfg.data
    fraction = d.get("val_fraction", 0.2)
    if d["source"] == "synthetic":
        full = D.generate_synthetic(d.get("task", "bars"), int(d.get("n", 8000)), cfg.seed)
        val, train = D.split(full, fraction, cfg.seed)
        return train, val
    for key in ("train_images", "train_labels"):
        if key not in d:
            raise ConfigError(f"idx data needs {key}")
    train = D.load_idx_images(d["train_images"], d["train_labels"], d.get("classes"))
    if "val_images" in d:
        val = D.load_idx_images(d["val_images"], d["val_labels"], train.classes)
        return train, val
    val, train = D.split(train, fraction, cfg.seed)
    return train, val


def _write_csv(path, header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    N.atomic_write(path, buf.getvalue().encode())


def _write_json(path, obj):
    N.atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def _model_path(args, cfg):
    return args.model or os.path.join(cfg.out, "model.model")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_train(args):
    cfg = load_config(args)
    train_set, val_set = load_datasets(cfg)
    os.makedirs(cfg.out, exist_ok=True)
    model = N.init_model(cfg.model, train_set.images.shape[1:], cfg.seed)
    if model.num_classes != train_set.classes:
        raise ConfigError(f"model has {model.num_classes} outputs but data has "
                          f"{train_set.classes} classes")
    log = []

    def on_epoch(epoch, loss, m):
        log.append([epoch + 1, repr(loss), repr(N.evaluate(m, val_set))])
        print(f"epoch {epoch + 1}: loss {loss:.4f}  val_acc {float(log[-1][2]):.4f}")

    model, _ = N.train(model, train_set, cfg.train_config(), on_epoch=on_epoch)
    N.save_model(model, os.path.join(cfg.out, "model.model"))
    _write_csv(os.path.join(cfg.out, "train_log.csv"), ["epoch", "loss", "val_accuracy"], log)
    print(f"wrote {os.path.join(cfg.out, 'model.model')}")
    return 0


def _run_scheme(scheme, model, train_set, val_set, cfg, out_dir):
    config = cfg.prune_config()
    if scheme == "global":
        return P.prune_gradually_global(model, train_set, val_set, config, out_dir)
    if scheme == "layerwise":
        return P.prune_layerwise_gradual(model, train_set, val_set, config, out_dir)
    return P.prune_layer_sequential(model, train_set, val_set, cfg.per_layer_ratio,
                                    config, out_dir)


def cmd_prune(args):
    cfg = load_config(args)
    model = N.load_model(_model_path(args, cfg))
    train_set, val_set = load_datasets(cfg)
    final, report = _run_scheme(cfg.scheme, model, train_set, val_set, cfg, cfg.out)
    N.save_model(final, os.path.join(cfg.out, "pruned.model"))
    print(report.csv_text(), end="")
    print(f"stop: {report.stop_reason}; neurons {report.totals()[0]} -> {report.totals()[-1]}")
    return 0


def cmd_eval(args):
    cfg = load_config(args)
    path = _model_path(args, cfg)
    model = N.load_model(path)
    _, val_set = load_datasets(cfg)
    acc = N.evaluate(model, val_set)
    os.makedirs(cfg.out, exist_ok=True)
    _write_json(os.path.join(cfg.out, "eval.json"),
                {"model": path, "accuracy": acc, "samples": len(val_set)})
    print(f"accuracy {acc!r}")
    return 0


COMPARE_COLUMNS = ("round", "scheme", "total_neurons", "accuracy")


def compare_rows(reports):
    """Merged per-round rows; round 0 is the shared unpruned model."""
    rows = []
    for report in reports:
        rows.append([0, report.scheme, report.totals()[0], repr(report.baseline_accuracy)])
        for r in report.rounds:
            rows.append([r.round, report.scheme, r.total_after, repr(r.acc_after_ft)])
    return rows


def cmd_compare(args):
    cfg = load_config(args)
    model = N.load_model(_model_path(args, cfg))
    train_set, val_set = load_datasets(cfg)
    reports = []
    for scheme in ("global", "layerwise"):
        _, report = _run_scheme(scheme, model, train_set, val_set, cfg,
                                os.path.join(cfg.out, scheme))
        reports.append(report)
    _write_csv(os.path.join(cfg.out, "compare.csv"), COMPARE_COLUMNS, compare_rows(reports))
    for report in reports:
        print(f"{report.scheme:>10}: totals {report.totals()} "
              f"final acc {report.rounds[-1].acc_after_ft if report.rounds else report.baseline_accuracy:.4f}")
    return 0


def summary(model):
    """Per-layer widths of the prunable layers, their total, and the parameter count."""
    lines = [f"{'layer':<12}{'width':>8}"]
    widths = model.widths()
    for i in model.prunable:
        lines.append(f"{model.names[i]:<12}{widths[i]:>8}")
    lines.append(f"{'total':<12}{sum(widths.values()):>8}")
    lines.append(f"{'params':<12}{model.num_params():>8}")
    return "\n".join(lines)


def cmd_inspect(args):
    if not args.model:
        raise ConfigError("inspect needs --model")
    print(summary(N.load_model(args.model)))
    return 0


def cmd_scores(args):
    cfg = load_config(args)
    model = N.load_model(_model_path(args, cfg))
    images = None
    if cfg.metric != "aaws":
        train_set, _ = load_datasets(cfg)
        images = P._stats_images(train_set, cfg.prune_config(), 0)
    table = compute_scores(model, cfg.metric, images)
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, f"scores_{cfg.metric}.csv")
    dump_scores(table, path)
    print(f"wrote {path}")
    return 0


COMMANDS = {"train": cmd_train, "prune": cmd_prune, "eval": cmd_eval,
            "compare": cmd_compare, "inspect": cmd_inspect, "scores": cmd_scores}


def build_parser():
    parser = argparse.ArgumentParser(prog="thinner", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="run config JSON")
        p.add_argument("--model", help="model file (default <out>/model.model)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--metric", choices=METRICS)
        p.add_argument("--scheme", choices=P.SCHEMES)
        p.add_argument("--ratio", type=float)
        p.add_argument("--target", type=float)
        p.add_argument("--max-rounds", dest="max_rounds", type=int)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ThinnerError, ValueError, OSError, KeyError, json.JSONDecodeError) as e:
        print(f"thinner {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
