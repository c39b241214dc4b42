"""Sequential VGG-style networks: layers, backprop, SGD and model files."""

import copy
import io
import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from typing import ClassVar

import numpy as np

from thinner import seeding
from thinner import tensor as T
from thinner.errors import ChecksumError, ModelFormatError, ShapeError, VersionError

FORMAT_TAG = "THINNER-MODEL"
FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

class Layer:
    kind: ClassVar[str] = ""
    param_names: ClassVar[tuple] = ()

    def output_shape(self, in_shape):
        raise NotImplementedError

    def forward(self, x):
        """Return ``(y, cache)`` for a batch ``x``."""
        raise NotImplementedError

    def backward(self, dy, cache):
        """Return ``(dx, grads)`` where ``grads`` maps param name to gradient."""
        raise NotImplementedError

    def params(self):
        return {name: getattr(self, name) for name in self.param_names}

    def hyper(self):
        return {}

    @property
    def width(self):
        return None


@dataclass(eq=False)
class Conv2D(Layer):
    filters: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0

    kind: ClassVar[str] = "Conv2D"
    param_names: ClassVar[tuple] = ("filters", "bias")

    def __post_init__(self):
        if self.filters.ndim != 4:
            raise ShapeError(f"Conv2D filters must be rank 4, got {self.filters.shape}")
        if self.bias.shape != (self.filters.shape[0],):
            raise ShapeError(
                f"Conv2D bias {self.bias.shape} does not match {self.filters.shape[0]} filters")
        if self.stride < 1 or self.padding < 0:
            raise ShapeError(f"bad stride/padding {self.stride}/{self.padding}")

    @property
    def width(self):
        return self.filters.shape[0]

    def hyper(self):
        return {"stride": self.stride, "padding": self.padding}

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"Conv2D needs (c, h, w) input, got {in_shape}")
        c, h, w = in_shape
        c_out, c_in, kh, kw = self.filters.shape
        if c != c_in:
            raise ShapeError(f"Conv2D expects {c_in} input channels, got {c}")
        return (c_out,
                T.conv_output_size(h, kh, self.stride, self.padding),
                T.conv_output_size(w, kw, self.stride, self.padding))

    def forward(self, x):
        n, _, h, w = x.shape
        c_out, _, kh, kw = self.filters.shape
        oh = T.conv_output_size(h, kh, self.stride, self.padding)
        ow = T.conv_output_size(w, kw, self.stride, self.padding)
        cols = T.im2col(x, kh, kw, self.stride, self.padding)
        out = cols @ self.filters.reshape(c_out, -1).T + self.bias
        y = np.ascontiguousarray(out.reshape(n, oh, ow, c_out).transpose(0, 3, 1, 2))
        return y, (x.shape, cols)

    def backward(self, dy, cache):
        in_shape, cols = cache
        c_out, _, kh, kw = self.filters.shape
        dout = dy.transpose(0, 2, 3, 1).reshape(-1, c_out)
        grads = {
            "filters": (dout.T @ cols).reshape(self.filters.shape),
            "bias": dout.sum(axis=0),
        }
        dcols = dout @ self.filters.reshape(c_out, -1)
        dx = T.col2im(dcols, in_shape, kh, kw, self.stride, self.padding)
        return dx, grads


@dataclass(eq=False)
class Dense(Layer):
    weights: np.ndarray
    bias: np.ndarray

    kind: ClassVar[str] = "Dense"
    param_names: ClassVar[tuple] = ("weights", "bias")

    def __post_init__(self):
        if self.weights.ndim != 2:
            raise ShapeError(f"Dense weights must be rank 2, got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[1],):
            raise ShapeError(
                f"Dense bias {self.bias.shape} does not match {self.weights.shape[1]} outputs")

    @property
    def width(self):
        return self.weights.shape[1]

    def output_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ShapeError(f"Dense needs flat input, got {in_shape}; insert a Flatten")
        if in_shape[0] != self.weights.shape[0]:
            raise ShapeError(
                f"Dense expects {self.weights.shape[0]} inputs, got {in_shape[0]}")
        return (self.weights.shape[1],)

    def forward(self, x):
        return x @ self.weights + self.bias, x

    def backward(self, dy, x):
        grads = {"weights": x.T @ dy, "bias": dy.sum(axis=0)}
        return dy @ self.weights.T, grads


@dataclass(eq=False)
class ReLU(Layer):
    kind: ClassVar[str] = "ReLU"

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, mask):
        return dy * mask, {}


@dataclass(eq=False)
class MaxPool2D(Layer):
    """Non-overlapping max pooling; trailing rows/columns that do not fill a
    window are dropped."""

    size: int = 2

    kind: ClassVar[str] = "MaxPool2D"

    def __post_init__(self):
        if self.size < 1:
            raise ShapeError(f"pool size must be >= 1, got {self.size}")

    def hyper(self):
        return {"size": self.size}

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"MaxPool2D needs (c, h, w) input, got {in_shape}")
        c, h, w = in_shape
        if h < self.size or w < self.size:
            raise ShapeError(f"pool size {self.size} larger than map {h}x{w}")
        return (c, h // self.size, w // self.size)

    def forward(self, x):
        n, c, h, w = x.shape
        s = self.size
        oh, ow = h // s, w // s
        xc = x[:, :, :oh * s, :ow * s]
        win = xc.reshape(n, c, oh, s, ow, s).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, s * s)
        arg = win.argmax(axis=-1)
        y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
        return y, (x.shape, arg)

    def backward(self, dy, cache):
        in_shape, arg = cache
        n, c, h, w = in_shape
        s = self.size
        oh, ow = dy.shape[2], dy.shape[3]
        win = np.zeros((n, c, oh, ow, s * s))
        np.put_along_axis(win, arg[..., None], dy[..., None], axis=-1)
        dx = np.zeros(in_shape)
        dx[:, :, :oh * s, :ow * s] = (
            win.reshape(n, c, oh, ow, s, s).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh * s, ow * s))
        return dx, {}


@dataclass(eq=False)
class Flatten(Layer):
    kind: ClassVar[str] = "Flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, shape):
        return dy.reshape(shape), {}


@dataclass(eq=False)
class SoftmaxCrossEntropyOutput(Layer):
    """Marks the logits. Forward is the identity; the loss lives in
    :func:`softmax_cross_entropy`."""

    kind: ClassVar[str] = "SoftmaxCrossEntropyOutput"

    def output_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ShapeError(f"output layer needs flat logits, got {in_shape}")
        return tuple(in_shape)

    def forward(self, x):
        return x, None

    def backward(self, dy, cache):
        return dy, {}


LAYER_KINDS = {cls.kind: cls for cls in
               (Conv2D, Dense, ReLU, MaxPool2D, Flatten, SoftmaxCrossEntropyOutput)}
PARAMETERIZED = (Conv2D, Dense)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Model:
    layers: list
    prunable: list
    input_shape: tuple
    names: list = field(default=None)

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.prunable = [int(i) for i in self.prunable]
        if self.names is None:
            self.names = default_names(self.layers)
        if len(self.names) != len(self.layers):
            raise ShapeError(f"{len(self.names)} names for {len(self.layers)} layers")
        self.validate()

    def validate(self):
        self.shapes()
        param_idx = self.parameterized()
        if self.prunable != sorted(set(self.prunable)):
            raise ShapeError(f"prunable indices must be sorted and unique: {self.prunable}")
        for i in self.prunable:
            if not 0 <= i < len(self.layers) or not isinstance(self.layers[i], PARAMETERIZED):
                raise ShapeError(f"layer {i} is not a Conv2D/Dense layer and cannot be prunable")
            if i == param_idx[-1]:
                raise ShapeError(f"layer {i} is the output layer and cannot be prunable")

    def shapes(self):
        """Input shape followed by the output shape of every layer."""
        shapes = [self.input_shape]
        for k, layer in enumerate(self.layers):
            try:
                shapes.append(layer.output_shape(shapes[-1]))
            except ShapeError as e:
                raise ShapeError(f"layer {k} ({self.names[k]}, {layer.kind}): {e}") from None
        return shapes

    def parameterized(self):
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, PARAMETERIZED)]

    def next_parameterized(self, index):
        for j in range(index + 1, len(self.layers)):
            if isinstance(self.layers[j], PARAMETERIZED):
                return j
        return None

    def widths(self):
        return {i: self.layers[i].width for i in self.prunable}

    def total_neurons(self):
        return sum(self.widths().values())

    def num_params(self):
        return sum(p.size for layer in self.layers for p in layer.params().values())

    @property
    def num_classes(self):
        return self.shapes()[-1][0]

    def named_params(self):
        """``(layer_index, param_name) -> array`` in layer order."""
        return {(i, name): p
                for i, layer in enumerate(self.layers)
                for name, p in layer.params().items()}

    def copy(self):
        return copy.deepcopy(self)


def default_names(layers):
    names, conv, fc = [], 0, 0
    for layer in layers:
        if isinstance(layer, Conv2D):
            conv += 1
            names.append(f"conv{conv}")
        elif isinstance(layer, Dense):
            fc += 1
            names.append(f"fc{fc}")
        elif isinstance(layer, SoftmaxCrossEntropyOutput):
            names.append("softmax")
        else:
            names.append(layer.kind.lower())
    last = [i for i, layer in enumerate(layers) if isinstance(layer, PARAMETERIZED)]
    if last and isinstance(layers[last[-1]], Dense):
        names[last[-1]] = "output"
    return names


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 2
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be non-negative, got {self.epochs}")
        if not 0 <= self.seed < 2**64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {self.seed}")


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------

def init_model(spec, input_shape, seed=0):
    """Build a model from layer descriptors with He-initialized weights.

    Descriptors are dicts with a ``kind`` of ``conv``, ``dense``, ``relu``,
    ``maxpool``, ``flatten`` or ``output``. ``conv`` takes ``out``,
    ``kernel`` (default 3), ``stride`` (1) and ``padding`` (0); ``dense``
    takes ``out``; ``maxpool`` takes ``size`` (2). Any descriptor may carry a
    ``name``, and a parameterized one may set ``prunable: false``. Every
    parameterized layer except the last is prunable by default.
    """
    rng = seeding.stream(seed, seeding.INIT)
    shape = tuple(int(d) for d in input_shape)
    layers, names, flags = [], [], []
    for k, desc in enumerate(spec):
        kind = desc.get("kind")
        try:
            if kind == "conv":
                if len(shape) != 3:
                    raise ShapeError(f"conv needs (c, h, w) input, got {shape}")
                kh = kw = int(desc.get("kernel", 3))
                fan_in = shape[0] * kh * kw
                layer = Conv2D(
                    rng.normal(0.0, np.sqrt(2.0 / fan_in), (int(desc["out"]), shape[0], kh, kw)),
                    np.zeros(int(desc["out"])),
                    stride=int(desc.get("stride", 1)),
                    padding=int(desc.get("padding", 0)))
            elif kind == "dense":
                if len(shape) != 1:
                    raise ShapeError(f"dense needs flat input, got {shape}")
                layer = Dense(
                    rng.normal(0.0, np.sqrt(2.0 / shape[0]), (shape[0], int(desc["out"]))),
                    np.zeros(int(desc["out"])))
            elif kind == "relu":
                layer = ReLU()
            elif kind == "maxpool":
                layer = MaxPool2D(int(desc.get("size", 2)))
            elif kind == "flatten":
                layer = Flatten()
            elif kind == "output":
                layer = SoftmaxCrossEntropyOutput()
            else:
                raise ShapeError(f"unknown layer kind {kind!r}")
            shape = layer.output_shape(shape)
        except (KeyError, ShapeError) as e:
            raise ShapeError(f"layer descriptor {k} ({desc}) is not composable: {e}") from None
        layers.append(layer)
        names.append(desc.get("name"))
        flags.append(desc.get("prunable", True))

    auto = default_names(layers)
    names = [n if n is not None else a for n, a in zip(names, auto)]
    param_idx = [i for i, layer in enumerate(layers) if isinstance(layer, PARAMETERIZED)]
    prunable = [i for i in param_idx[:-1] if flags[i]]
    return Model(layers, prunable, tuple(int(d) for d in input_shape), names)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def _check_batch(model, batch):
    if batch.ndim != len(model.input_shape) + 1 or batch.shape[1:] != model.input_shape:
        raise ShapeError(
            f"batch shape {batch.shape} does not match model input {model.input_shape}")


def forward(model, batch, record_activations=False):
    """Logits for ``batch``; with ``record_activations`` also the raw output
    of every prunable layer as ``{layer_index: array}``."""
    batch = np.asarray(batch, dtype=np.float64)
    _check_batch(model, batch)
    model.shapes()
    x = batch
    acts = {} if record_activations else None
    wanted = set(model.prunable)
    for i, layer in enumerate(model.layers):
        x, _ = layer.forward(x)
        if record_activations and i in wanted:
            acts[i] = x
    return x, acts


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. ``logits``."""
    n, classes = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"labels must lie in [0, {classes}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    log_p = z - log_norm[:, None]
    loss = -log_p[np.arange(n), labels].mean()
    grad = np.exp(log_p)
    grad[np.arange(n), labels] -= 1.0
    return max(float(loss), 0.0), grad / n


def backward(model, batch, labels):
    """Mean cross-entropy loss and ``{(layer_index, param_name): gradient}``."""
    batch = np.asarray(batch, dtype=np.float64)
    _check_batch(model, batch)
    model.shapes()
    caches = []
    x = batch
    for layer in model.layers:
        x, cache = layer.forward(x)
        caches.append(cache)
    loss, dy = softmax_cross_entropy(x, labels)
    grads = {}
    for i in range(len(model.layers) - 1, -1, -1):
        dy, g = model.layers[i].backward(dy, caches[i])
        for name, value in g.items():
            grads[(i, name)] = value
    return loss, grads


def sgd_step(model, grads, config, velocity=None, masks=None):
    """Momentum SGD in place: ``v <- m*v - lr*g``; ``p <- p + v``.

    ``masks`` maps a parameter key to a 0/1 array; masked entries receive no
    gradient and therefore never move. Returns ``(model, velocity)``.
    """
    if velocity is None:
        velocity = {}
    params = model.named_params()
    for key, g in grads.items():
        p = params.get(key)
        if p is None:
            raise ShapeError(f"gradient for unknown parameter {key}")
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter {key} shape {p.shape}")
        if masks is not None and key in masks:
            g = g * masks[key]
        v = velocity.get(key)
        v = -config.learning_rate * g if v is None else config.momentum * v - config.learning_rate * g
        velocity[key] = v
        p += v
    return model, velocity


def train(model, dataset, config, masks=None, on_epoch=None, shuffle_key=()):
    """Minibatch SGD on a copy of ``model``.

    Returns ``(model, losses)`` with one mean loss per epoch. Batch order for
    epoch ``e`` comes from ``seeding.stream(config.seed, SHUFFLE, *shuffle_key, e)``.
    ``on_epoch(epoch, loss, model)`` is called after each epoch.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    model = model.copy()
    velocity = {}
    losses = []
    for epoch in range(config.epochs):
        rng = seeding.stream(config.seed, seeding.SHUFFLE, *shuffle_key, epoch)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads = backward(model, dataset.images[idx], dataset.labels[idx])
            sgd_step(model, grads, config, velocity, masks)
            total += loss * len(idx)
        losses.append(total / n)
        if on_epoch is not None:
            on_epoch(epoch, losses[-1], model)
    return model, losses


def predict(model, images, batch_size=512):
    out = []
    for start in range(0, len(images), batch_size):
        logits, _ = forward(model, images[start:start + batch_size])
        out.append(logits.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(model, dataset, batch_size=512):
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return float(np.mean(predict(model, dataset.images, batch_size) == dataset.labels))


# ---------------------------------------------------------------------------
# Model files
# ---------------------------------------------------------------------------
#
# Layout:
#   b"THINNER-MODEL <version> <header_bytes>\n"
#   <header_bytes> of UTF-8 JSON: layers (kind, name, hyper, param shapes and
#       byte offsets relative to the payload start), prunable, input_shape,
#       payload_bytes
#   payload: every parameter as little-endian float64, row-major, layer order
#   CRC-32 (little-endian uint32) of everything above

def _serialize(model):
    entries, chunks, offset = [], [], 0
    for i, layer in enumerate(model.layers):
        params = []
        for name, p in layer.params().items():
            raw = np.ascontiguousarray(p, dtype="<f8").tobytes()
            params.append({"name": name, "shape": list(p.shape), "offset": offset})
            chunks.append(raw)
            offset += len(raw)
        entries.append({"kind": layer.kind, "name": model.names[i],
                        "hyper": layer.hyper(), "params": params})
    header = json.dumps({
        "layers": entries,
        "prunable": model.prunable,
        "input_shape": list(model.input_shape),
        "payload_bytes": offset,
    }, sort_keys=True).encode()
    body = f"{FORMAT_TAG} {FORMAT_VERSION} {len(header)}\n".encode() + header + b"".join(chunks)
    return body + struct.pack("<I", zlib.crc32(body))


def atomic_write(path, data):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_model(model, path):
    atomic_write(path, _serialize(model))


def model_bytes(model):
    return _serialize(model)


def _deserialize(blob):
    stream = io.BytesIO(blob)
    first = stream.readline(256)
    parts = first.decode("ascii", errors="replace").split()
    if len(parts) != 3 or parts[0] != FORMAT_TAG:
        raise ModelFormatError("not a THINNER-MODEL file")
    try:
        version, header_len = int(parts[1]), int(parts[2])
    except ValueError:
        raise ModelFormatError(f"malformed model file preamble {first!r}") from None
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported model format version {version} "
                           f"(this build reads {FORMAT_VERSION})")
    if len(blob) < len(first) + 4:
        raise ChecksumError("model file truncated")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("model file checksum mismatch (truncated or corrupt)")

    header = json.loads(body[len(first):len(first) + header_len])
    payload = body[len(first) + header_len:]
    if len(payload) != header["payload_bytes"]:
        raise ModelFormatError(
            f"payload is {len(payload)} bytes, header says {header['payload_bytes']}")
    layers, names = [], []
    for entry in header["layers"]:
        cls = LAYER_KINDS.get(entry["kind"])
        if cls is None:
            raise ModelFormatError(f"unknown layer kind {entry['kind']!r}")
        params = {}
        for p in entry["params"]:
            count = int(np.prod(p["shape"]))
            arr = np.frombuffer(payload, dtype="<f8", count=count, offset=p["offset"])
            params[p["name"]] = arr.astype(np.float64).reshape(p["shape"])
        layers.append(cls(**params, **entry["hyper"]))
        names.append(entry["name"])
    return Model(layers, header["prunable"], tuple(header["input_shape"]), names)


def load_model(path):
    with open(path, "rb") as f:
        blob = f.read()
    return _deserialize(blob)


def models_equal(a, b):
    """Bit-exact comparison of structure and parameters."""
    return model_bytes(a) == model_bytes(b)
