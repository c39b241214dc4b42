"""Dense float64 tensor kernels.

Tensors are C-ordered (row-major, last axis contiguous) ``numpy.float64``
arrays. Every function here is pure: inputs are never written to.

Convolution goes through a single im2col mapping; the backward pass in
``thinner.network`` reuses the same mapping through ``col2im``.
"""

import numpy as np

from thinner.errors import ShapeError

DTYPE = np.float64


def as_tensor(x):
    """Return ``x`` as a C-contiguous float64 array with every dimension >= 1."""
    arr = np.ascontiguousarray(x, dtype=DTYPE)
    if arr.ndim == 0:
        raise ShapeError("scalars are not tensors; use shape (1,)")
    if any(d < 1 for d in arr.shape):
        raise ShapeError(f"every dimension must be >= 1, got shape {arr.shape}")
    return arr


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    return a @ b


def add(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    return a + b


def mul(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"mul needs equal shapes, got {a.shape} and {b.shape}")
    return a * b


def transpose(a, axes=None):
    return np.ascontiguousarray(np.transpose(a, axes))


def reshape(a, shape):
    shape = tuple(int(d) for d in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} ({a.size} values) to {shape}")
    return np.ascontiguousarray(a).reshape(shape)


def conv_output_size(size, kernel, stride, padding):
    if kernel > size + 2 * padding:
        raise ShapeError(
            f"kernel {kernel} larger than padded input {size} + 2*{padding}")
    return (size + 2 * padding - kernel) // stride + 1


def im2col(x, kh, kw, stride=1, padding=0):
    """Unfold a batch ``(n, c, h, w)`` into rows of receptive fields.

    Row ``(b, oy, ox)`` (row-major over batch and output position) holds the
    ``c*kh*kw`` input values seen by output pixel ``(oy, ox)`` of sample ``b``,
    ordered like a filter ``(c, kh, kw)`` flattened.
    """
    n, c, h, w = x.shape
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=DTYPE)
    for i in range(kh):
        i_end = i + stride * oh
        for j in range(kw):
            j_end = j + stride * ow
            cols[:, :, i, j] = x[:, :, i:i_end:stride, j:j_end:stride]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * kh * kw)


def col2im(cols, input_shape, kh, kw, stride=1, padding=0):
    """Adjoint of :func:`im2col`: scatter-add rows back onto the input grid."""
    n, c, h, w = input_shape
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    cols = cols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=DTYPE)
    for i in range(kh):
        i_end = i + stride * oh
        for j in range(kw):
            j_end = j + stride * ow
            out[:, :, i:i_end:stride, j:j_end:stride] += cols[:, :, i, j]
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(out)


def conv2d_forward(x, filters, stride=1, padding=0):
    """Zero-padded cross-correlation of ``x`` with ``filters``.

    ``x`` is ``(c_in, h, w)`` or a batch ``(n, c_in, h, w)``; ``filters`` is
    ``(c_out, c_in, kh, kw)``. The output keeps the batch axis if given.
    """
    if filters.ndim != 4:
        raise ShapeError(f"filters must be rank 4, got {filters.shape}")
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise ShapeError(f"conv input must be rank 3 or 4, got {x.shape}")
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = filters.shape
    if c != c_in:
        raise ShapeError(f"input has {c} channels but filters expect {c_in}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"bad stride/padding {stride}/{padding}")
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    cols = im2col(x, kh, kw, stride, padding)
    out = matmul(cols, filters.reshape(c_out, -1).T)
    out = out.reshape(n, oh, ow, c_out).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    return out[0] if single else out


def reduce_mean_spatial(feature_maps):
    """Mean of each channel's ``h x w`` map: ``(c, h, w) -> (c,)``."""
    if feature_maps.ndim != 3:
        raise ShapeError(f"expected rank-3 (c, h, w), got shape {feature_maps.shape}")
    return feature_maps.mean(axis=(1, 2))


def batch_mean_spatial(feature_maps):
    """Batched :func:`reduce_mean_spatial`: ``(n, c, h, w) -> (n, c)``."""
    if feature_maps.ndim != 4:
        raise ShapeError(f"expected rank-4 (n, c, h, w), got shape {feature_maps.shape}")
    return feature_maps.mean(axis=(2, 3))


def stable_argsort(scores):
    """Ascending argsort of a flat array; equal keys keep index order."""
    scores = np.asarray(scores)
    if scores.ndim != 1:
        raise ShapeError(f"argsort expects a flat array, got shape {scores.shape}")
    return np.argsort(scores, kind="stable")


def mean(a, axis):
    return np.mean(a, axis=axis)


def std(a, axis):
    """Population standard deviation (divide by n)."""
    return np.std(a, axis=axis, ddof=0)
