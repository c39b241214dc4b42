"""Neuron contribution scores and per-layer normalization.

Three raw metrics are supported:

* ``mean``  - average response of the neuron over a sample set
* ``std``   - population standard deviation of that response
* ``aaws``  - average absolute weight of the neuron (data-independent)

A response is the spatial mean of a filter's feature map for conv layers and
the raw output for dense layers, taken at the layer's own output (before any
following ReLU layer).

Raw scores are biased by layer depth, so before any cross-layer comparison
each score is divided by the mean raw score of its layer.
"""

import csv
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from thinner import tensor as T
from thinner.network import Conv2D, Dense, forward

METRICS = ("mean", "std", "aaws")
DEGENERATE_MEAN = 1e-12


class NeuronId(NamedTuple):
    layer: int
    index: int


@dataclass
class ResponseStats:
    """Running per-neuron response moments.

    Responses are shifted by the first sample seen (so a neuron with constant
    output accumulates exact zeros) and batches are merged with the pairwise
    update of Chan et al., keeping a single pass numerically stable.
    """

    count: int = 0
    shift: dict = field(default_factory=dict)    # layer -> (width,)
    shifted_mean: dict = field(default_factory=dict)
    m2: dict = field(default_factory=dict)       # layer -> sum of squared deviations

    def update(self, block):
        """Fold one batch ``{layer: (batch, width)}`` of responses."""
        nb = len(next(iter(block.values())))
        na = self.count
        total = na + nb
        for layer, r in block.items():
            if na == 0:
                self.shift[layer] = r[0].copy()
            d = r - self.shift[layer]
            mb = d.mean(axis=0)
            m2b = ((d - mb) ** 2).sum(axis=0)
            if na == 0:
                self.shifted_mean[layer], self.m2[layer] = mb, m2b
                continue
            delta = mb - self.shifted_mean[layer]
            self.shifted_mean[layer] = self.shifted_mean[layer] + delta * (nb / total)
            self.m2[layer] = self.m2[layer] + m2b + delta ** 2 * (na * nb / total)
        self.count = total

    @property
    def layers(self):
        return sorted(self.shift)

    def mean(self, layer):
        return self.shift[layer] + self.shifted_mean[layer]

    def variance(self, layer):
        return np.maximum(self.m2[layer] / self.count, 0.0)

    def std(self, layer):
        return np.sqrt(self.variance(layer))


def responses(model, images):
    """Per-sample responses ``{layer: (n, width)}`` for every prunable layer."""
    _, acts = forward(model, images, record_activations=True)
    return {i: T.batch_mean_spatial(a) if a.ndim == 4 else a for i, a in acts.items()}


def collect_responses(model, images, batch_size=256):
    if len(images) == 0:
        raise ValueError("response statistics need at least one sample")
    stats = ResponseStats()
    for start in range(0, len(images), batch_size):
        stats.update(responses(model, images[start:start + batch_size]))
    return stats


@dataclass
class ScoreTable:
    metric: str
    raw: dict          # layer -> (width,)
    modified: dict     # layer -> (width,)
    layer_means: dict  # layer -> float
    names: dict = field(default_factory=dict)  # layer -> display name

    @property
    def layers(self):
        return sorted(self.raw)

    def widths(self):
        return {layer: len(self.raw[layer]) for layer in self.layers}

    def entries(self):
        """``(NeuronId, raw, modified)`` sorted by layer then neuron index."""
        return [(NeuronId(layer, i), float(self.raw[layer][i]), float(self.modified[layer][i]))
                for layer in self.layers for i in range(len(self.raw[layer]))]

    def __len__(self):
        return sum(len(r) for r in self.raw.values())


def normalize_per_layer(raw):
    """Divide each layer's scores by the layer mean.

    A layer whose mean magnitude is below ``DEGENERATE_MEAN`` (for example an
    entirely dead layer) gets modified score 1 everywhere.
    Returns ``(modified, layer_means)``.
    """
    modified, means = {}, {}
    for layer, scores in raw.items():
        scores = np.asarray(scores, dtype=np.float64)
        if scores.size == 0:
            raise ValueError(f"layer {layer} has no neurons")
        m = scores.sum() / scores.size
        means[layer] = float(m)
        modified[layer] = np.ones_like(scores) if abs(m) < DEGENERATE_MEAN else scores / m
    return modified, means


def make_table(metric, raw, names=None):
    modified, means = normalize_per_layer(raw)
    return ScoreTable(metric, {k: np.asarray(v, dtype=np.float64) for k, v in raw.items()},
                      modified, means, dict(names or {}))


def _names(model):
    return {i: model.names[i] for i in model.prunable} if model is not None else {}


def score_mean_response(stats, model=None):
    return make_table("mean", {k: stats.mean(k) for k in stats.layers}, _names(model))


def score_std_response(stats, model=None):
    if stats.count < 2:
        raise ValueError(f"std score needs at least 2 samples, got {stats.count}")
    return make_table("std", {k: stats.std(k) for k in stats.layers}, _names(model))


def aaws_raw(model):
    """Mean absolute weight per prunable neuron.

    A conv filter averages its own ``c_in * kh * kw`` weights. A dense neuron
    averages the weights of its outgoing connections into the next layer.
    Biases are excluded.
    """
    raw = {}
    for i in model.prunable:
        layer = model.layers[i]
        if isinstance(layer, Conv2D):
            raw[i] = np.abs(layer.filters).reshape(layer.width, -1).mean(axis=1)
        else:
            nxt = model.layers[model.next_parameterized(i)]
            if not isinstance(nxt, Dense):
                raise ValueError(f"dense layer {i} must feed a dense layer")
            raw[i] = np.abs(nxt.weights).mean(axis=1)
    return raw


def score_aaws(model):
    return make_table("aaws", aaws_raw(model), _names(model))


def compute_scores(model, metric, images=None, batch_size=256):
    """Score ``model`` with ``metric``; data metrics need ``images``."""
    if metric == "aaws":
        return score_aaws(model)
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; choose from {METRICS}")
    if images is None:
        raise ValueError(f"metric {metric!r} needs sample images")
    stats = collect_responses(model, images, batch_size)
    if metric == "mean":
        return score_mean_response(stats, model)
    return score_std_response(stats, model)


DUMP_COLUMNS = ("layer_name", "layer_index", "neuron_index", "raw", "modified")


def dump_scores(table, path):
    """Write one CSV row per neuron, ordered by (layer_index, neuron_index)."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(DUMP_COLUMNS)
        for nid, raw, mod in table.entries():
            writer.writerow([table.names.get(nid.layer, f"layer{nid.layer}"),
                             nid.layer, nid.index, repr(raw), repr(mod)])


def read_scores(path):
    with open(path, newline="") as f:
        return [{"layer_name": r["layer_name"], "layer_index": int(r["layer_index"]),
                 "neuron_index": int(r["neuron_index"]), "raw": float(r["raw"]),
                 "modified": float(r["modified"])}
                for r in csv.DictReader(f)]
