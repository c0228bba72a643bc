"""Dense tensor primitives: "same" correlation, its adjoint, kernel composition
and bilinear resizing.

Images and feature maps are plain ``float64`` arrays of shape ``(H, W, C)``.
Kernel banks hold weights indexed ``(out, in, ky, kx)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Raised when tensor or kernel shapes are incompatible."""


@dataclass(frozen=True, eq=False)
class KernelBank:
    """A bank of ``out_channels x in_channels`` square kernels of odd size."""

    weights: np.ndarray
    unit_norm: bool = False

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64, copy=True)
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise DimensionError(f"kernel weights must be (out, in, k, k), got {w.shape}")
        if w.shape[2] % 2 != 1:
            raise DimensionError(f"kernel size must be odd, got {w.shape[2]}")
        if not np.all(np.isfinite(w)):
            raise ValueError("kernel weights must be finite")
        if self.unit_norm:
            norms = np.sqrt(np.sum(w**2, axis=(1, 2, 3)))
            if np.any(np.abs(norms - 1.0) > 1e-12):
                raise ValueError("unit-norm bank has an out-channel with norm != 1")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[2]

    @classmethod
    def identity(cls, channels: int, kernel_size: int = 1) -> "KernelBank":
        w = np.zeros((channels, channels, kernel_size, kernel_size))
        c = kernel_size // 2
        w[np.arange(channels), np.arange(channels), c, c] = 1.0
        return cls(w, unit_norm=True)

    @classmethod
    def normalized(cls, weights: np.ndarray) -> "KernelBank":
        """Scale every out-channel slice to unit Frobenius norm."""
        w = np.asarray(weights, dtype=np.float64)
        norms = np.sqrt(np.sum(w**2, axis=(1, 2, 3), keepdims=True))
        if np.any(norms == 0):
            raise ValueError("cannot normalize an all-zero kernel")
        w = w / norms
        # a second pass pins the norm to within a few ulps
        w = w / np.sqrt(np.sum(w**2, axis=(1, 2, 3), keepdims=True))
        return cls(w, unit_norm=True)

    def flipped(self) -> "KernelBank":
        """Adjoint bank: in/out swapped and spatially flipped."""
        return KernelBank(self.weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.weights**2)))


def _as_image(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise DimensionError(f"expected an (H, W, C) array, got shape {x.shape}")
    return x


def _correlate(weights: np.ndarray, x: np.ndarray) -> np.ndarray:
    # weights (O, C, k, k); x (H, W, C). One GEMM over im2col patches, so the
    # reduction order depends only on shapes.
    h, w, c = x.shape
    k = weights.shape[2]
    r = k // 2
    padded = np.pad(x, ((r, r), (r, r), (0, 0)))
    cols = sliding_window_view(padded, (k, k), axis=(0, 1)).reshape(h * w, c * k * k)
    return (cols @ weights.reshape(weights.shape[0], -1).T).reshape(h, w, -1)


def conv_forward(kernels: KernelBank, x) -> np.ndarray:
    """Zero-padded "same" correlation with stride 1.

    ``out[y, x, o] = sum_{c, ky, kx} K[o, c, ky, kx] * in[y + ky - r, x + kx - r, c]``
    """
    x = _as_image(x)
    if x.shape[2] != kernels.in_channels:
        raise DimensionError(
            f"input has {x.shape[2]} channels, kernels expect {kernels.in_channels}")
    return _correlate(kernels.weights, x)


def conv_transpose(kernels: KernelBank, y) -> np.ndarray:
    """Exact adjoint of :func:`conv_forward` under the Frobenius inner product."""
    y = _as_image(y)
    if y.shape[2] != kernels.out_channels:
        raise DimensionError(
            f"input has {y.shape[2]} channels, kernels produce {kernels.out_channels}")
    adj = kernels.weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    return _correlate(adj, y)


def compose_kernels(outer: KernelBank, inner: KernelBank) -> KernelBank:
    """Single bank equivalent to applying ``inner`` then ``outer``.

    Exact away from a border of width ``(k_outer + k_inner - 2) / 2``, where
    the intermediate zero padding of the sequential form differs.
    """
    if outer.in_channels != inner.out_channels:
        raise DimensionError(
            f"outer expects {outer.in_channels} channels, inner produces {inner.out_channels}")
    ko, ki = outer.kernel_size, inner.kernel_size
    k = ko + ki - 1
    out = np.zeros((outer.out_channels, inner.in_channels, k, k))
    # offsets add: tap b of outer after tap a of inner reads x at a + b
    for by in range(ko):
        for bx in range(ko):
            tap = outer.weights[:, :, by, bx]  # (O, M)
            if not tap.any():
                continue
            out[:, :, by:by + ki, bx:bx + ki] += np.einsum("om,mcyx->ocyx", tap, inner.weights)
    return KernelBank(out)


def resize_bilinear(x, new_height: int, new_width: int) -> np.ndarray:
    """Corner-aligned bilinear interpolation."""
    x = _as_image(x)
    if new_height < 1 or new_width < 1:
        raise ValueError("target size must be at least 1x1")
    h, w, _ = x.shape
    if (h, w) == (new_height, new_width):
        return x.copy()

    def axis(n_in, n_out):
        if n_out == 1 or n_in == 1:
            pos = np.zeros(n_out)
        else:
            pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        lo = np.minimum(np.floor(pos).astype(int), n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(h, new_height)
    x0, x1, fx = axis(w, new_width)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = x[y0][:, x0] * (1 - fx) + x[y0][:, x1] * fx
    bottom = x[y1][:, x0] * (1 - fx) + x[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


_OPS = {"mul": np.multiply, "add": np.add, "sub": np.subtract}


def elementwise(a, b, op: str) -> np.ndarray:
    a = _as_image(a)
    b = _as_image(b)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    try:
        fn = _OPS[op]
    except KeyError:
        raise ValueError(f"unknown op {op!r}") from None
    return fn(a, b)


def inner(a, b) -> float:
    """Frobenius inner product."""
    return float(np.vdot(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)))
