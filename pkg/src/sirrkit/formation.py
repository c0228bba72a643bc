"""Image formation model, dictionary construction and reconstruction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from sirrkit.tensor import DimensionError, KernelBank, compose_kernels, conv_forward

SCHEMES = ("random_unit", "gradient_seeded")


@dataclass(frozen=True, eq=False)
class DictionarySet:
    """Synthesis dictionaries for the three layers plus the exclusion filters.

    ``m_t`` and ``m_r`` are always derived from ``w_filters`` and the
    corresponding layer dictionary; they are never passed in.
    """

    d_t: KernelBank
    d_r: KernelBank
    d_n: KernelBank
    w_filters: KernelBank
    m_t: KernelBank = field(init=False)
    m_r: KernelBank = field(init=False)

    def __post_init__(self):
        for name in ("d_t", "d_r", "d_n"):
            bank = getattr(self, name)
            if bank.out_channels != 3:
                raise DimensionError(f"{name} must synthesize 3 image channels")
        if not (self.d_t.in_channels == self.d_r.in_channels == self.d_n.in_channels):
            raise DimensionError("layer dictionaries must share the feature channel count")
        if self.w_filters.in_channels != 3:
            raise DimensionError("w_filters must act on 3-channel images")
        for name in ("d_t", "d_r", "d_n"):
            if np.any(np.abs(atom_norms(getattr(self, name)) - 1.0) > 1e-12):
                raise ValueError(f"{name} has an atom whose norm is not 1")
        if np.any(np.abs(np.sqrt(np.sum(self.w_filters.weights**2, axis=(1, 2, 3))) - 1.0) > 1e-12):
            raise ValueError("w_filters has an out-channel whose norm is not 1")
        object.__setattr__(self, "m_t", compose_kernels(self.w_filters, self.d_t))
        object.__setattr__(self, "m_r", compose_kernels(self.w_filters, self.d_r))

    @property
    def n(self) -> int:
        return self.d_t.in_channels

    @property
    def m(self) -> int:
        return self.w_filters.out_channels

    def replace(self, **banks) -> "DictionarySet":
        kw = dict(d_t=self.d_t, d_r=self.d_r, d_n=self.d_n, w_filters=self.w_filters)
        kw.update(banks)
        return DictionarySet(**kw)


@dataclass(frozen=True)
class BlendParams:
    gamma1: float = 0.8
    gamma2: float = 0.4
    seed: int = 0

    def __post_init__(self):
        if not 0.8 <= self.gamma1 <= 1.0:
            raise ValueError(f"gamma1 must lie in [0.8, 1.0], got {self.gamma1}")
        if not 0.4 <= self.gamma2 <= 1.0:
            raise ValueError(f"gamma2 must lie in [0.4, 1.0], got {self.gamma2}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    @classmethod
    def sample(cls, seed: int) -> "BlendParams":
        """Draw both blending weights uniformly from their ranges."""
        rng = np.random.default_rng(seed)
        return cls(float(rng.uniform(0.8, 1.0)), float(rng.uniform(0.4, 1.0)), seed)


def _check_pair(t, r):
    t = np.asarray(t, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if t.shape != r.shape:
        raise DimensionError(f"shape mismatch: {t.shape} vs {r.shape}")
    if t.ndim != 3 or t.shape[2] != 3:
        raise DimensionError(f"expected (H, W, 3) images, got {t.shape}")
    return t, r


def synthesize_blend(t, r, params: BlendParams, clamp: bool = True) -> np.ndarray:
    """``g1*T + g2*R - g1*g2*T*R``, clamped to [0, 1] unless ``clamp=False``."""
    t, r = _check_pair(t, r)
    g1, g2 = params.gamma1, params.gamma2
    out = g1 * t + g2 * r - g1 * g2 * (t * r)
    return np.clip(out, 0.0, 1.0) if clamp else out


def nonlinear_residual(t, r, params: BlendParams) -> np.ndarray:
    """The N that makes the unclamped blend equal ``T + R + N`` exactly."""
    t, r = _check_pair(t, r)
    g1, g2 = params.gamma1, params.gamma2
    return (g1 - 1.0) * t + (g2 - 1.0) * r - g1 * g2 * (t * r)


def atom_norms(bank: KernelBank) -> np.ndarray:
    """Norm of each synthesis atom (everything one feature channel writes)."""
    return np.sqrt(np.sum(bank.weights**2, axis=(0, 2, 3)))


def _random_unit(rng, n_out, n_in, w):
    return rng.standard_normal((n_out, n_in, w, w))


def _identity_first(rng, n, w):
    # synthesis bank (3 out, n in); atoms 0..2 copy feature c into colour c
    k = _random_unit(rng, 3, n, w)
    for c in range(min(3, n)):
        k[:, c] = 0.0
        k[c, c, w // 2, w // 2] = 1.0
    return _normalize_columns(k)


def _normalize_columns(k):
    # unit norm per feature atom (in-channel of a synthesis bank)
    norms = np.sqrt(np.sum(k**2, axis=(0, 2, 3), keepdims=True))
    k = k / norms
    return k / np.sqrt(np.sum(k**2, axis=(0, 2, 3), keepdims=True))


def derivative_stencils(w: int) -> list[np.ndarray]:
    """Horizontal difference, vertical difference and Laplacian, centred in w x w."""
    if w < 3:
        raise ValueError("derivative stencils need kernel size >= 3")
    c = w // 2
    dx = np.zeros((w, w))
    dx[c, c - 1], dx[c, c + 1] = -1.0, 1.0
    lap = np.zeros((w, w))
    lap[c, c] = -4.0
    lap[c - 1, c] = lap[c + 1, c] = lap[c, c - 1] = lap[c, c + 1] = 1.0
    return [dx, dx.T.copy(), lap]


def init_dictionaries(n: int = 16, m: int = 24, w: int = 5, seed: int = 0,
                      scheme: str = "gradient_seeded") -> DictionarySet:
    """Build a reproducible dictionary set.

    Layer dictionaries are normalized per feature atom, i.e. each of the ``n``
    filters mapping one feature channel to RGB has unit norm. ``w_filters``
    is normalized per output channel.
    """
    if n < 1 or m < 1:
        raise ValueError("n and m must be positive")
    if w < 1 or w % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {w}")
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    rng = np.random.default_rng(seed)
    if scheme == "random_unit":
        layers = [_normalize_columns(_random_unit(rng, 3, n, w)) for _ in range(3)]
        wf = _random_unit(rng, m, 3, w)
    else:
        layers = [_identity_first(rng, n, w) for _ in range(3)]
        wf = _random_unit(rng, m, 3, w)
        # zero DC response: every exclusion filter acts like a derivative
        wf -= wf.mean(axis=(1, 2, 3), keepdims=True)
        if w >= 3:
            for j, stencil in enumerate(derivative_stencils(w)[:m]):
                wf[j] = stencil[None, :, :]
    d_t, d_r, d_n = (KernelBank(k) for k in layers)
    return DictionarySet(d_t, d_r, d_n, KernelBank.normalized(wf))


def reconstruct_images(dicts: DictionarySet, z_t, z_r, z_n):
    """Map features to (T_hat, R_hat, N_hat). No clamping."""
    return (conv_forward(dicts.d_t, z_t),
            conv_forward(dicts.d_r, z_r),
            conv_forward(dicts.d_n, z_n))


def reconstruction_residual(i, dicts: DictionarySet, z_t, z_r, z_n) -> np.ndarray:
    i = np.asarray(i, dtype=np.float64)
    t_hat, r_hat, n_hat = reconstruct_images(dicts, z_t, z_r, z_n)
    if i.shape != t_hat.shape:
        raise DimensionError(f"image shape {i.shape} does not match features {t_hat.shape}")
    return i - t_hat - r_hat - n_hat
