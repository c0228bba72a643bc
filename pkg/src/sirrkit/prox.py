"""L1 priors and their proximal operators.

The solver only ever calls ``prox(v, threshold)`` on a feature tensor, so any
callable with that signature (a learned denoiser, say) can be swapped in.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

KINDS = ("soft_threshold", "nonneg_soft_threshold", "identity")

ProxFn = Callable[[np.ndarray, float], np.ndarray]


@dataclass(frozen=True)
class ProxSpec:
    kind: str = "soft_threshold"
    threshold: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown prox kind {self.kind!r}")
        if not self.threshold >= 0:
            raise ValueError("threshold must be non-negative")
        if self.kind == "identity" and self.threshold != 0:
            raise ValueError("identity prox requires threshold 0")


def soft_threshold(v, theta: float) -> np.ndarray:
    """Minimizer of 0.5*||x - v||^2 + theta*||x||_1."""
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.maximum(np.abs(v) - theta, 0.0)


def nonneg_soft_threshold(v, theta: float) -> np.ndarray:
    """Minimizer of 0.5*||x - v||^2 + theta*||x||_1 subject to x >= 0."""
    return np.maximum(np.asarray(v, dtype=np.float64) - theta, 0.0)


def identity(v, theta: float = 0.0) -> np.ndarray:
    return np.array(v, dtype=np.float64, copy=True)


_FUNCS: dict[str, ProxFn] = {
    "soft_threshold": soft_threshold,
    "nonneg_soft_threshold": nonneg_soft_threshold,
    "identity": identity,
}


def prox_fn(kind: str) -> ProxFn:
    try:
        return _FUNCS[kind]
    except KeyError:
        raise ValueError(f"unknown prox kind {kind!r}") from None


def prox_apply(spec: ProxSpec, v) -> np.ndarray:
    return prox_fn(spec.kind)(v, spec.threshold)


def prior_value(v, kind: str = "l1") -> float:
    if kind != "l1":
        raise ValueError(f"unknown prior {kind!r}")
    return float(np.sum(np.abs(v)))
