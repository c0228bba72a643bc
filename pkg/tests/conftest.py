import numpy as np
import pytest

from sirrkit.formation import DictionarySet
from sirrkit.tensor import KernelBank


def naive_correlate(weights, x):
    """Explicit quadruple sum with zero padding; the reference for every conv test."""
    weights = np.asarray(weights)
    h, w, cin = x.shape
    cout, _, k, _ = weights.shape
    r = k // 2
    out = np.zeros((h, w, cout))
    for y in range(h):
        for xx in range(w):
            for o in range(cout):
                acc = 0.0
                for c in range(cin):
                    for ky in range(k):
                        for kx in range(k):
                            yy, xs = y + ky - r, xx + kx - r
                            if 0 <= yy < h and 0 <= xs < w:
                                acc += weights[o, c, ky, kx] * x[yy, xs, c]
                out[y, xx, o] = acc
    return out


def unit_atoms(rng, n, k):
    w = rng.standard_normal((3, n, k, k))
    w /= np.sqrt(np.sum(w**2, axis=(0, 2, 3), keepdims=True))
    return KernelBank(w)


def random_dicts(rng, n=3, m=3, k=3):
    wf = KernelBank.normalized(rng.standard_normal((m, 3, k, k)))
    return DictionarySet(unit_atoms(rng, n, k), unit_atoms(rng, n, k), unit_atoms(rng, n, k), wf)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def naive_transpose(weights, y):
    """Scatter form of the adjoint: every output tap pushes back onto its inputs."""
    weights = np.asarray(weights)
    h, w, cout = y.shape
    _, cin, k, _ = weights.shape
    r = k // 2
    out = np.zeros((h, w, cin))
    for yy in range(h):
        for xx in range(w):
            for o in range(cout):
                for c in range(cin):
                    for ky in range(k):
                        for kx in range(k):
                            ys, xs = yy + ky - r, xx + kx - r
                            if 0 <= ys < h and 0 <= xs < w:
                                out[ys, xs, c] += weights[o, c, ky, kx] * y[yy, xx, o]
    return out


def compose_oracle(outer, inner):
    """Cascade of two correlations equals one correlation with the full 2-D convolution."""
    from scipy.signal import convolve2d
    outer, inner = np.asarray(outer), np.asarray(inner)
    cout, mid = outer.shape[:2]
    cin = inner.shape[1]
    k = outer.shape[2] + inner.shape[2] - 1
    out = np.zeros((cout, cin, k, k))
    for o in range(cout):
        for c in range(cin):
            for j in range(mid):
                out[o, c] += convolve2d(outer[o, j], inner[j, c], mode="full")
    return out


def scipy_forward(weights, x):
    from scipy.ndimage import correlate
    cout, cin = weights.shape[:2]
    return np.stack([sum(correlate(x[..., c], weights[o, c], mode="constant") for c in range(cin))
                     for o in range(cout)], axis=-1)


def scipy_adjoint(weights, y):
    from scipy.ndimage import convolve
    cout, cin = weights.shape[:2]
    return np.stack([sum(convolve(y[..., o], weights[o, c], mode="constant") for o in range(cout))
                     for c in range(cin)], axis=-1)


def csc_block_descent(i, banks, zs, etas, thresholds, stages):
    """Block prox-gradient on 0.5*||I - sum_j D_j z_j||^2 + sum_j theta_j ||z_j||_1.

    Written against scipy.ndimage only; blocks are visited in order with fresh values.
    """
    zs = [z.copy() for z in zs]
    history = []
    for _ in range(stages):
        for j, (d, eta, th) in enumerate(zip(banks, etas, thresholds)):
            res = i - sum(scipy_forward(b, z) for b, z in zip(banks, zs))
            v = zs[j] + eta * scipy_adjoint(d, res)
            zs[j] = np.sign(v) * np.maximum(np.abs(v) - th, 0.0)
        history.append([z.copy() for z in zs])
    return history
