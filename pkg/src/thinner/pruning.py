"""Neuron selection, sub-network extraction and the pruning loops.

Three schemes share one select-drop-fine-tune loop:

* ``global``     - the ``floor(N * ratio)`` neurons with the smallest
                   layer-normalized scores anywhere in the network
* ``layerwise``  - ``floor(width * ratio)`` lowest-scored neurons from every
                   layer independently
* ``sequential`` - one layer at a time, ``floor(width * ratio)`` neurons,
                   one fine-tune per layer
"""

import csv
import io
import json
import os
from collections import defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np

from thinner import seeding
from thinner import tensor as T
from thinner.errors import InfeasibleSelectionError
from thinner.network import (
    Conv2D, Dense, Flatten, TrainConfig, atomic_write, evaluate, save_model, train)
from thinner.scoring import METRICS, NeuronId, compute_scores, dump_scores

STOP_TARGET = "target_breached"
STOP_MAX_ROUNDS = "max_rounds"
STOP_FLOOR = "layer_floor"


@dataclass
class PruneConfig:
    ratio: float = 0.05
    target_accuracy: float = 0.0
    metric: str = "aaws"
    max_rounds: int = 7
    min_neurons_per_layer: int = 1
    finetune: TrainConfig = field(default_factory=TrainConfig)
    stats_samples: int = 1024
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.ratio < 1:
            raise ValueError(f"ratio must be in (0, 1), got {self.ratio}")
        if not 0 <= self.target_accuracy <= 1:
            raise ValueError(f"target_accuracy must be in [0, 1], got {self.target_accuracy}")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}, got {self.metric!r}")
        if self.max_rounds < 1:
            raise ValueError(f"max_rounds must be positive, got {self.max_rounds}")
        if self.min_neurons_per_layer < 1:
            raise ValueError("min_neurons_per_layer must be >= 1")
        if self.stats_samples < 1:
            raise ValueError(f"stats_samples must be positive, got {self.stats_samples}")
        if not 0 <= self.seed < 2**64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {self.seed}")


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------

def global_count(total, ratio, capacity=None):
    """Neurons removed by one global round: ``floor(total * ratio)``, at least
    one, never more than ``capacity``."""
    k = max(int(total * ratio), 1)
    return k if capacity is None else min(k, capacity)


def layer_count(width, ratio, floor=1):
    return max(min(int(width * ratio), width - floor), 0)


def global_schedule(total, ratio, rounds):
    """Totals after each of ``rounds`` global rounds (no floor binding)."""
    out = []
    for _ in range(rounds):
        total -= global_count(total, ratio)
        out.append(total)
    return out


def layerwise_schedule(widths, ratio, rounds, floor=1):
    """Per-layer width vectors after each proportional round."""
    widths = list(widths)
    out = []
    for _ in range(rounds):
        widths = [w - layer_count(w, ratio, floor) for w in widths]
        out.append(list(widths))
    return out


# ---------------------------------------------------------------------------
# Selection
# ---------------------------------------------------------------------------

def _check_widths(table, widths):
    if widths is None:
        return table.widths()
    widths = dict(widths)
    if widths != table.widths():
        raise ValueError(f"widths {widths} do not match score table {table.widths()}")
    return widths


def select_global(table, k, widths=None, floor=1):
    """The ``k`` neurons with the smallest modified scores network-wide.

    No layer is reduced below ``floor``. Ties go to the lower layer index,
    then the lower neuron index.
    """
    widths = _check_widths(table, widths)
    if k < 0:
        raise ValueError(f"k must be non-negative, got {k}")
    capacity = {layer: max(w - floor, 0) for layer, w in widths.items()}
    if k > sum(capacity.values()):
        raise InfeasibleSelectionError(
            f"cannot remove {k} neurons while keeping {floor} per layer "
            f"(at most {sum(capacity.values())} removable)")
    if k == 0:
        return set()
    layers = np.concatenate([np.full(widths[l], l) for l in table.layers])
    index = np.concatenate([np.arange(widths[l]) for l in table.layers])
    scores = np.concatenate([table.modified[l] for l in table.layers])
    order = np.lexsort((index, layers, scores))
    taken = defaultdict(int)
    chosen = set()
    for pos in order:
        layer = int(layers[pos])
        if taken[layer] < capacity[layer]:
            taken[layer] += 1
            chosen.add(NeuronId(layer, int(index[pos])))
            if len(chosen) == k:
                break
    return chosen


def select_in_layer(table, layer, count):
    """The ``count`` lowest raw scores of one layer (ties by index)."""
    order = T.stable_argsort(table.raw[layer])
    return {NeuronId(layer, int(i)) for i in order[:count]}


def select_layerwise_proportional(table, ratio, widths=None, floor=1):
    """``floor(width * ratio)`` lowest raw scores from each layer."""
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    widths = _check_widths(table, widths)
    chosen = set()
    for layer in table.layers:
        chosen |= select_in_layer(table, layer, layer_count(widths[layer], ratio, floor))
    return chosen


# ---------------------------------------------------------------------------
# Extraction and masking
# ---------------------------------------------------------------------------

def _group(model, victims):
    by_layer = defaultdict(set)
    widths = model.widths()
    for v in victims:
        layer, index = int(v[0]), int(v[1])
        if layer not in widths:
            raise ValueError(f"layer {layer} is not prunable")
        if not 0 <= index < widths[layer]:
            raise ValueError(f"neuron {index} out of range for layer {layer} "
                             f"of width {widths[layer]}")
        by_layer[layer].add(index)
    return by_layer


def _input_rows(model, layer, channels):
    """Input positions of the next parameterized layer fed by ``channels`` of
    ``layer``: channel indices for a conv consumer, flattened row indices
    for a dense consumer."""
    nxt = model.next_parameterized(layer)
    channels = np.asarray(sorted(channels), dtype=np.int64)
    if isinstance(model.layers[nxt], Conv2D) or isinstance(model.layers[layer], Dense):
        return nxt, channels
    flat = [j for j in range(layer + 1, nxt) if isinstance(model.layers[j], Flatten)]
    if not flat:
        raise ValueError(f"no Flatten between conv layer {layer} and dense layer {nxt}")
    c, h, w = model.shapes()[flat[0]]
    block = h * w
    rows = (channels[:, None] * block + np.arange(block)).ravel()
    return nxt, rows


def _kept(width, removed):
    return np.setdiff1d(np.arange(width), np.fromiter(removed, dtype=np.int64))


def drop_neurons(model, victims, floor=1):
    """Return a smaller dense copy of ``model`` without ``victims``.

    Each victim loses its filter (or weight column) and bias entry, and the
    next parameterized layer loses the matching input channel, weight row, or
    block of flattened rows. Surviving parameters are copied bit-exactly.
    """
    by_layer = _group(model, victims)
    widths = model.widths()
    for layer, removed in by_layer.items():
        if widths[layer] - len(removed) < floor:
            raise InfeasibleSelectionError(
                f"removing {len(removed)} of {widths[layer]} neurons from layer "
                f"{layer} goes below the floor of {floor}")
    out = model.copy()
    if not by_layer:
        return out
    # Index sets are computed on the original geometry before any slicing.
    plans = []
    for layer, removed in sorted(by_layer.items()):
        nxt, rows = _input_rows(model, layer, removed)
        in_width = (model.layers[nxt].filters.shape[1] if isinstance(model.layers[nxt], Conv2D)
                    else model.layers[nxt].weights.shape[0])
        plans.append((layer, _kept(widths[layer], removed), nxt, _kept(in_width, rows)))
    for layer, keep_out, nxt, keep_in in plans:
        src = out.layers[layer]
        if isinstance(src, Conv2D):
            src.filters = np.ascontiguousarray(src.filters[keep_out])
        else:
            src.weights = np.ascontiguousarray(src.weights[:, keep_out])
        src.bias = np.ascontiguousarray(src.bias[keep_out])
        dst = out.layers[nxt]
        if isinstance(dst, Conv2D):
            dst.filters = np.ascontiguousarray(dst.filters[:, keep_in])
        else:
            dst.weights = np.ascontiguousarray(dst.weights[keep_in])
    out.validate()
    return out


def neuron_masks(model, victims):
    """0/1 masks ``{(layer_index, param_name): array}`` that cut ``victims``
    off: their outgoing parameters and the next layer's matching inputs."""
    by_layer = _group(model, victims)
    masks = {key: np.ones_like(p) for key, p in model.named_params().items()}
    for layer, removed in by_layer.items():
        idx = np.asarray(sorted(removed), dtype=np.int64)
        if isinstance(model.layers[layer], Conv2D):
            masks[(layer, "filters")][idx] = 0.0
        else:
            masks[(layer, "weights")][:, idx] = 0.0
        masks[(layer, "bias")][idx] = 0.0
        nxt, rows = _input_rows(model, layer, removed)
        if isinstance(model.layers[nxt], Conv2D):
            masks[(nxt, "filters")][:, rows] = 0.0
        else:
            masks[(nxt, "weights")][rows] = 0.0
    return masks


def mask_neurons(model, victims):
    """Same-shape copy of ``model`` with ``victims`` zeroed out."""
    masks = neuron_masks(model, victims)
    out = model.copy()
    for key, p in out.named_params().items():
        p[masks[key] == 0] = 0.0
    return out


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

CSV_COLUMNS = ("round", "scheme", "metric", "total_before", "total_after",
               "acc_before_ft", "acc_after_ft", "stop_reason")


@dataclass
class RoundRecord:
    round: int
    scheme: str
    metric: str
    total_before: int
    total_after: int
    removed_per_layer: dict
    widths_after: list
    acc_before_ft: float
    acc_after_ft: float
    finetune_epochs: int


@dataclass
class PruneReport:
    scheme: str
    metric: str
    layer_names: list
    initial_widths: list
    baseline_accuracy: float = float("nan")
    rounds: list = field(default_factory=list)
    stop_reason: str = ""

    def totals(self):
        return [sum(self.initial_widths)] + [r.total_after for r in self.rounds]

    def csv_text(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for k, r in enumerate(self.rounds):
            last = k == len(self.rounds) - 1
            writer.writerow([r.round, r.scheme, r.metric, r.total_before, r.total_after,
                             repr(r.acc_before_ft), repr(r.acc_after_ft),
                             self.stop_reason if last else ""])
        return buf.getvalue()

    def to_dict(self):
        return {
            "scheme": self.scheme,
            "metric": self.metric,
            "layer_names": self.layer_names,
            "initial_widths": self.initial_widths,
            "baseline_accuracy": self.baseline_accuracy,
            "stop_reason": self.stop_reason,
            "rounds": [asdict(r) for r in self.rounds],
        }

    def json_text(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write(self, out_dir, stem="report"):
        atomic_write(os.path.join(out_dir, f"{stem}.csv"), self.csv_text().encode())
        atomic_write(os.path.join(out_dir, f"{stem}.json"), self.json_text().encode())


# ---------------------------------------------------------------------------
# Loops
# ---------------------------------------------------------------------------

def _stats_images(train_set, config, round_no):
    n = len(train_set)
    m = min(config.stats_samples, n)
    rng = seeding.stream(config.seed, seeding.STATS, round_no)
    idx = np.sort(rng.choice(n, size=m, replace=False))
    return train_set.images[idx]


def _score(model, train_set, config, round_no):
    images = None if config.metric == "aaws" else _stats_images(train_set, config, round_no)
    return compute_scores(model, config.metric, images)


def _new_report(model, scheme, config):
    return PruneReport(scheme, config.metric, [model.names[i] for i in model.prunable],
                       [model.layers[i].width for i in model.prunable])


def _finish_round(model, pruned, victims, report, round_no, train_set, val_set,
                  config, out_dir, table):
    acc_before = evaluate(pruned, val_set)
    tuned, _ = train(pruned, train_set, config.finetune, shuffle_key=(round_no,))
    acc_after = evaluate(tuned, val_set)
    removed = defaultdict(int)
    for v in victims:
        removed[model.names[v.layer]] += 1
    report.rounds.append(RoundRecord(
        round=round_no, scheme=report.scheme, metric=config.metric,
        total_before=model.total_neurons(), total_after=tuned.total_neurons(),
        removed_per_layer={model.names[i]: removed[model.names[i]] for i in model.prunable},
        widths_after=[tuned.layers[i].width for i in tuned.prunable],
        acc_before_ft=acc_before, acc_after_ft=acc_after,
        finetune_epochs=config.finetune.epochs))
    if out_dir is not None:
        save_model(tuned, os.path.join(out_dir, f"round_{round_no}.model"))
        dump_scores(table, os.path.join(out_dir, f"scores_round_{round_no}.csv"))
    return tuned


def _gradual(model, train_set, val_set, config, scheme, out_dir, report_stem):
    floor = config.min_neurons_per_layer
    report = _new_report(model, scheme, config)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    try:
        p_m = evaluate(model, val_set)
        report.baseline_accuracy = p_m
        while True:
            if p_m < config.target_accuracy:
                report.stop_reason = STOP_TARGET
                break
            if len(report.rounds) >= config.max_rounds:
                report.stop_reason = STOP_MAX_ROUNDS
                break
            widths = model.widths()
            capacity = sum(max(w - floor, 0) for w in widths.values())
            if capacity == 0:
                report.stop_reason = STOP_FLOOR
                break
            round_no = len(report.rounds) + 1
            table = _score(model, train_set, config, round_no)
            if scheme == "global":
                k = global_count(sum(widths.values()), config.ratio, capacity)
                victims = select_global(table, k, widths, floor)
            else:
                victims = select_layerwise_proportional(table, config.ratio, widths, floor)
            pruned = drop_neurons(model, victims, floor)
            model = _finish_round(model, pruned, victims, report, round_no, train_set,
                                  val_set, config, out_dir, table)
            p_m = report.rounds[-1].acc_after_ft
    finally:
        if out_dir is not None:
            report.write(out_dir, report_stem)
    return model, report


def prune_gradually_global(model, train_set, val_set, config, out_dir=None,
                           report_stem="report"):
    """Select-prune-fine-tune with global selection on normalized scores.

    Runs while validation accuracy stays at or above
    ``config.target_accuracy`` and fewer than ``config.max_rounds`` rounds
    have run. With ``out_dir`` set, writes ``round_<k>.model`` checkpoints,
    ``scores_round_<k>.csv`` dumps and the report (also on failure).
    """
    return _gradual(model, train_set, val_set, config, "global", out_dir, report_stem)


def prune_layerwise_gradual(model, train_set, val_set, config, out_dir=None,
                            report_stem="report"):
    """Same loop as :func:`prune_gradually_global`, proportional per-layer selection."""
    return _gradual(model, train_set, val_set, config, "layerwise", out_dir, report_stem)


def prune_layer_sequential(model, train_set, val_set, per_layer_ratio, config,
                           out_dir=None, report_stem="report"):
    """Prune each prunable layer once, in order, fine-tuning after each.

    Always runs one round per prunable layer; ``config.ratio``,
    ``target_accuracy`` and ``max_rounds`` are not consulted.
    """
    if not 0 < per_layer_ratio < 1:
        raise ValueError(f"per_layer_ratio must be in (0, 1), got {per_layer_ratio}")
    floor = config.min_neurons_per_layer
    report = _new_report(model, "sequential", config)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    try:
        report.baseline_accuracy = evaluate(model, val_set)
        for round_no, layer in enumerate(list(model.prunable), start=1):
            table = _score(model, train_set, config, round_no)
            count = layer_count(model.layers[layer].width, per_layer_ratio, floor)
            victims = select_in_layer(table, layer, count)
            pruned = drop_neurons(model, victims, floor)
            model = _finish_round(model, pruned, victims, report, round_no, train_set,
                                  val_set, config, out_dir, table)
        report.stop_reason = STOP_MAX_ROUNDS
    finally:
        if out_dir is not None:
            report.write(out_dir, report_stem)
    return model, report


SCHEMES = ("global", "layerwise", "sequential")
