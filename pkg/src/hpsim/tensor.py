"""Dense tensor primitives with a fixed, documented accumulation order.

Tensors are plain ``numpy.ndarray`` objects in C (row-major) order whose
dtype is either ``float32`` ("single") or ``float64`` ("double").  Every
reduction in this module accumulates in a fixed order so that results are
bit-reproducible and agree exactly with naive loop implementations that
use the same order:

* :func:`matmul` sums over the inner index in ascending order.
* :func:`conv2d_forward` sums over (channel, kernel row, kernel column) in
  ascending lexicographic order.

"Convolution" here is cross-correlation (no kernel flip) with zero padding.
"""

from __future__ import annotations

import numpy as np

from hpsim.exceptions import ConfigurationError, DimensionError, DomainError, PrecisionError

PRECISIONS = {"single": np.float32, "double": np.float64}


def dtype_for(precision: str) -> np.dtype:
    try:
        return np.dtype(PRECISIONS[precision])
    except KeyError:
        raise DomainError(
            f"precision must be one of {sorted(PRECISIONS)}, got {precision!r}"
        ) from None


def precision_of(x: np.ndarray) -> str:
    for name, dt in PRECISIONS.items():
        if x.dtype == dt:
            return name
    raise PrecisionError(f"unsupported tensor dtype {x.dtype}")


def as_tensor(data, precision: str = "double") -> np.ndarray:
    """Copy ``data`` into a contiguous tensor of the given precision."""
    return np.array(data, dtype=dtype_for(precision), order="C", copy=True)


def _same_precision(*tensors: np.ndarray) -> None:
    kinds = {precision_of(t) for t in tensors}
    if len(kinds) > 1:
        raise PrecisionError(f"mixed precisions {sorted(kinds)}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product ``c[i, j] = sum_p a[i, p] * b[p, j]``, ascending ``p``."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    _same_precision(a, b)
    c = np.zeros((a.shape[0], b.shape[1]), dtype=a.dtype)
    for p in range(a.shape[1]):
        c += a[:, p, None] * b[None, p, :]
    return c


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - kernel
    if stride < 1 or pad < 0 or span < 0 or span % stride:
        raise ConfigurationError(
            f"non-integral conv output: size={size} kernel={kernel} "
            f"stride={stride} pad={pad}"
        )
    return span // stride + 1


def _check_conv(x: np.ndarray, k: np.ndarray, stride: int, pad: int):
    if x.ndim != 4 or k.ndim != 4 or x.shape[1] != k.shape[1]:
        raise DimensionError(f"conv2d shape mismatch: input {x.shape}, kernels {k.shape}")
    _same_precision(x, k)
    out_h = conv_output_size(x.shape[2], k.shape[2], stride, pad)
    out_w = conv_output_size(x.shape[3], k.shape[3], stride, pad)
    return out_h, out_w


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d_forward(x: np.ndarray, kernels: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Cross-correlate a ``B x C x H x W`` batch with ``F x C x R x S`` kernels."""
    out_h, out_w = _check_conv(x, kernels, stride, pad)
    batch = x.shape[0]
    n_filters, channels, rows, cols = kernels.shape
    xp = _pad(x, pad)
    out = np.zeros((batch, n_filters, out_h, out_w), dtype=x.dtype)
    h_end = stride * (out_h - 1) + 1
    w_end = stride * (out_w - 1) + 1
    for c in range(channels):
        for r in range(rows):
            for s in range(cols):
                patch = xp[:, c, r : r + h_end : stride, s : s + w_end : stride]
                out += kernels[None, :, c, r, s, None, None] * patch[:, None, :, :]
    return out


def conv2d_backward(
    x: np.ndarray,
    kernels: np.ndarray,
    grad_output: np.ndarray,
    stride: int = 1,
    pad: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(grad_input, grad_kernels)`` for :func:`conv2d_forward`."""
    out_h, out_w = _check_conv(x, kernels, stride, pad)
    expected = (x.shape[0], kernels.shape[0], out_h, out_w)
    if grad_output.shape != expected:
        raise DimensionError(f"grad_output shape {grad_output.shape}, expected {expected}")
    _same_precision(x, grad_output)
    _, channels, rows, cols = kernels.shape
    xp = _pad(x, pad)
    grad_xp = np.zeros_like(xp)
    grad_k = np.zeros_like(kernels)
    h_end = stride * (out_h - 1) + 1
    w_end = stride * (out_w - 1) + 1
    for c in range(channels):
        for r in range(rows):
            for s in range(cols):
                hs = slice(r, r + h_end, stride)
                ws = slice(s, s + w_end, stride)
                patch = xp[:, c, hs, ws]
                grad_k[:, c, r, s] = np.einsum("bfhw,bhw->f", grad_output, patch)
                grad_xp[:, c, hs, ws] += np.einsum("bfhw,f->bhw", grad_output, kernels[:, c, r, s])
    if pad:
        grad_x = grad_xp[:, :, pad:-pad, pad:-pad].copy()
    else:
        grad_x = grad_xp
    return grad_x, grad_k


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(pre_activation: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return np.where(pre_activation > 0, grad, 0).astype(grad.dtype, copy=False)


def sigmoid(z: np.ndarray) -> np.ndarray:
    # exp(-softplus(-z)) never overflows
    return np.exp(-np.logaddexp(0, -z)).astype(z.dtype, copy=False)


def logistic_xent_terms(logits: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise cross-entropy of independent logistic units and ``sigmoid - target``.

    Nothing is normalized across classes, so any column slice of the logits
    can be scored on its own.
    """
    if logits.shape != targets.shape:
        raise DimensionError(f"logits {logits.shape} vs targets {targets.shape}")
    _same_precision(logits, targets)
    if targets.size and (targets.min() < 0 or targets.max() > 1):
        raise DomainError("targets must lie in [0, 1]")
    # max(z, 0) - z t + log(1 + exp(-|z|))
    loss = np.maximum(logits, 0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))
    return loss, sigmoid(logits) - targets


def logistic_xent(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch-mean cross-entropy of independent logistic output units.

    Returns ``(loss, grad_logits)`` where the gradient is
    ``(sigmoid(z) - t) / B``.
    """
    if logits.ndim != 2:
        raise DimensionError(f"logits must be B x L, got {logits.shape}")
    terms, diff = logistic_xent_terms(logits, targets)
    batch = logits.shape[0]
    return float(terms.sum()) / batch, diff / batch
