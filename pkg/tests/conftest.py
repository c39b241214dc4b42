import sys

import numpy as np
import pytest

from thinner import network as N


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def naive_conv(x, f, stride, pad):
    """Direct six-loop cross-correlation of one (c, h, w) input."""
    c_in, h, w = x.shape
    c_out, _, kh, kw = f.shape
    xp = np.zeros((c_in, h + 2 * pad, w + 2 * pad))
    xp[:, pad:pad + h, pad:pad + w] = x
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((c_out, oh, ow))
    for o in range(c_out):
        for y in range(oh):
            for z in range(ow):
                s = 0.0
                for c in range(c_in):
                    for i in range(kh):
                        for j in range(kw):
                            s += xp[c, y * stride + i, z * stride + j] * f[o, c, i, j]
                out[o, y, z] = s
    return out


TOPOLOGIES = {
    # conv -> conv, conv -> pool -> flatten -> dense, dense -> dense
    "conv_stack": lambda r: [
        {"kind": "conv", "out": int(r.integers(2, 6)), "kernel": 3, "padding": 1},
        {"kind": "relu"},
        {"kind": "conv", "out": int(r.integers(2, 6)), "kernel": 3, "padding": int(r.integers(0, 2))},
        {"kind": "relu"},
        {"kind": "maxpool", "size": 2},
        {"kind": "conv", "out": int(r.integers(2, 5)), "kernel": 2},
        {"kind": "relu"},
        {"kind": "flatten"},
        {"kind": "dense", "out": int(r.integers(2, 7))},
        {"kind": "relu"},
        {"kind": "dense", "out": 3},
        {"kind": "output"},
    ],
    "conv_flat": lambda r: [
        {"kind": "conv", "out": int(r.integers(2, 7)), "kernel": 3, "stride": int(r.integers(1, 3)), "padding": 1},
        {"kind": "relu"},
        {"kind": "maxpool", "size": 2},
        {"kind": "flatten"},
        {"kind": "dense", "out": int(r.integers(2, 9))},
        {"kind": "relu"},
        {"kind": "dense", "out": 4},
        {"kind": "output"},
    ],
    "conv_no_pool": lambda r: [
        {"kind": "conv", "out": int(r.integers(2, 6)), "kernel": 3},
        {"kind": "relu"},
        {"kind": "flatten"},
        {"kind": "dense", "out": 3},
        {"kind": "output"},
    ],
    "mlp": lambda r: [
        {"kind": "flatten"},
        {"kind": "dense", "out": int(r.integers(2, 9))},
        {"kind": "relu"},
        {"kind": "dense", "out": int(r.integers(2, 9))},
        {"kind": "relu"},
        {"kind": "dense", "out": int(r.integers(2, 9))},
        {"kind": "dense", "out": 3},
        {"kind": "output"},
    ],
}


def random_model(rng, topology=None, input_shape=(2, 8, 8)):
    """Small random model with non-zero biases."""
    if topology is None:
        topology = list(TOPOLOGIES)[int(rng.integers(len(TOPOLOGIES)))]
    spec = TOPOLOGIES[topology](rng)
    model = N.init_model(spec, input_shape, seed=int(rng.integers(2**32)))
    for layer in model.layers:
        if isinstance(layer, (N.Conv2D, N.Dense)):
            layer.bias[:] = rng.normal(0, 0.3, layer.bias.shape)
    return model


def random_victims(rng, model, floor=1):
    victims = set()
    for layer, width in model.widths().items():
        count = int(rng.integers(0, width - floor + 1))
        for i in rng.choice(width, size=count, replace=False):
            victims.add((layer, int(i)))
    return victims


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(module.RESULTS, key=lambda l: int(l.split()[1].rstrip("."))):
        terminalreporter.write_line(line)
