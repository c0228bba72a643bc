"""Block proximal-gradient solver for layer separation with an exclusion prior.

The objective over features ``z_t, z_r, z_n`` (layers) and ``z_a`` (auxiliary)
is::

    0.5 * ||I - D_t*z_t - D_r*z_r - D_n*z_n||^2                 (recon)
  + tau/2 * ||z_a - (M_t*z_t) . (M_r*z_r)||^2                    (equality)
  + lambda_t |z_t|_1 + lambda_r |z_r|_1 + lambda_n |z_n|_1        (sparse)
  + kappa |z_a|_1                                                 (exclusion)

where ``*`` is correlation, ``.`` the elementwise product and
``M_i = W * D_i``. One stage updates the four blocks in Gauss-Seidel order.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

from sirrkit import tensor
from sirrkit.formation import DictionarySet, reconstruct_images
from sirrkit.prox import KINDS, ProxFn, prox_fn
from sirrkit.tensor import DimensionError, conv_forward, resize_bilinear

log = logging.getLogger(__name__)

BLOCKS = ("t", "r", "n", "a")


class NumericalDivergence(FloatingPointError):
    """A block update produced non-finite values."""

    def __init__(self, block: str, detail: str = ""):
        self.block = block
        msg = f"non-finite values in block z_{block}"
        super().__init__(f"{msg}: {detail}" if detail else msg)


@dataclass
class SolverConfig:
    lambda_t: float = 0.001
    lambda_r: float = 0.05
    lambda_n: float = 0.1
    kappa: float = 0.01
    tau: float = 1.0
    eta_t: float = 0.1
    eta_r: float = 0.1
    eta_n: float = 0.1
    eta_a: float = 0.1
    stages: int = 30
    scales: int = 2
    rel_tol: float = 1e-6
    backtrack: bool = True
    backtrack_beta: float = 0.5
    max_backtracks: int = 20
    # divide the z_t / z_r / z_n thresholds by tau, as in the literal update rules
    tau_scaled_thresholds: bool = False
    # None -> 1 / (kernel_size**2 * 3)
    init_scale: Optional[float] = None
    prox_t: str = "soft_threshold"
    prox_r: str = "soft_threshold"
    prox_n: str = "soft_threshold"
    prox_a: str = "soft_threshold"

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("lambda_t", "lambda_r", "lambda_n", "kappa", "tau"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be a finite non-negative number, got {v}")
        for name in ("eta_t", "eta_r", "eta_n", "eta_a", "rel_tol"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be positive, got {v}")
        if self.stages < 0 or self.scales < 1:
            raise ValueError("stages must be >= 0 and scales >= 1")
        if not 0 < self.backtrack_beta < 1:
            raise ValueError("backtrack_beta must lie in (0, 1)")
        if self.max_backtracks < 0:
            raise ValueError("max_backtracks must be >= 0")
        if self.init_scale is not None and not math.isfinite(self.init_scale):
            raise ValueError("init_scale must be finite")
        for b in BLOCKS:
            if getattr(self, f"prox_{b}") not in KINDS:
                raise ValueError(f"prox_{b} must be one of {KINDS}")

    def replace(self, **kw) -> "SolverConfig":
        return dataclasses.replace(self, **kw)

    def eta(self, block: str) -> float:
        return getattr(self, f"eta_{block}")

    def threshold(self, block: str, eta: float) -> float:
        """Prox threshold for a block at step size ``eta``."""
        if block == "a":
            # unit-coefficient gradient, so the weight is kappa / tau
            if self.tau == 0:
                return 0.0 if self.kappa == 0 else math.inf
            return eta * self.kappa / self.tau
        lam = getattr(self, f"lambda_{block}")
        if self.tau_scaled_thresholds and block in ("t", "r") and self.tau > 0:
            return eta * lam / self.tau
        return eta * lam


@dataclass
class SolverState:
    z_t: np.ndarray
    z_r: np.ndarray
    z_n: np.ndarray
    z_a: np.ndarray
    objective_trace: list = field(default_factory=list)
    stage_index: int = 0
    steps: dict = field(default_factory=dict)
    # per-term objective breakdown after the latest stage
    terms: dict = field(default_factory=dict)

    def copy(self) -> "SolverState":
        return SolverState(self.z_t.copy(), self.z_r.copy(), self.z_n.copy(), self.z_a.copy(),
                           list(self.objective_trace), self.stage_index, dict(self.steps),
                           dict(self.terms))

    def block(self, name: str) -> np.ndarray:
        return getattr(self, f"z_{name}")

    @classmethod
    def zeros(cls, height: int, width: int, n: int, m: int) -> "SolverState":
        return cls(np.zeros((height, width, n)), np.zeros((height, width, n)),
                   np.zeros((height, width, n)), np.zeros((height, width, m)))


@dataclass
class SeparationResult:
    t_hat: np.ndarray
    r_hat: np.ndarray
    n_hat: np.ndarray
    residual: np.ndarray
    state: SolverState
    trace: list
    recon_l1: float
    aux_l1: float


def _check_shapes(i, dicts: DictionarySet, state: SolverState):
    i = np.asarray(i, dtype=np.float64)
    if i.ndim != 3 or i.shape[2] != 3:
        raise DimensionError(f"image must be (H, W, 3), got {i.shape}")
    h, w = i.shape[:2]
    for b, ch in (("t", dicts.n), ("r", dicts.n), ("n", dicts.n), ("a", dicts.m)):
        z = state.block(b)
        if z.shape != (h, w, ch):
            raise DimensionError(f"z_{b} has shape {z.shape}, expected {(h, w, ch)}")
    return i


# cached forward quantities; updating one block only touches its own entries
class _Cache:
    def __init__(self, i, dicts, state):
        self.i = i
        self.dicts = dicts
        self.rec = dict(zip("trn", reconstruct_images(dicts, state.z_t, state.z_r, state.z_n)))
        self.feat_t = conv_forward(dicts.m_t, state.z_t)
        self.feat_r = conv_forward(dicts.m_r, state.z_r)

    def residual(self):
        return self.i - self.rec["t"] - self.rec["r"] - self.rec["n"]


def _terms(cache: _Cache, state: SolverState, cfg: SolverConfig, **override) -> dict:
    rec = dict(cache.rec)
    rec.update({k: v for k, v in override.items() if k in ("t", "r", "n")})
    feat_t = override.get("feat_t", cache.feat_t)
    feat_r = override.get("feat_r", cache.feat_r)
    z = {b: override.get(f"z_{b}", state.block(b)) for b in BLOCKS}
    res = cache.i - rec["t"] - rec["r"] - rec["n"]
    recon = 0.5 * float(np.sum(res * res))
    gap = z["a"] - feat_t * feat_r
    equality = 0.5 * cfg.tau * float(np.sum(gap * gap)) if cfg.tau else 0.0
    sparse = (cfg.lambda_t * float(np.sum(np.abs(z["t"])))
              + cfg.lambda_r * float(np.sum(np.abs(z["r"])))
              + cfg.lambda_n * float(np.sum(np.abs(z["n"]))))
    exclusion = cfg.kappa * float(np.sum(np.abs(z["a"])))
    total = recon + equality + sparse + exclusion
    return dict(objective=total, recon_term=recon, equality_term=equality,
                sparse_term=sparse, exclusion_term=exclusion)


def objective_terms(i, dicts: DictionarySet, state: SolverState, cfg: SolverConfig) -> dict:
    i = _check_shapes(i, dicts, state)
    return _terms(_Cache(i, dicts, state), state, cfg)


def objective(i, dicts: DictionarySet, state: SolverState, cfg: SolverConfig) -> float:
    return objective_terms(i, dicts, state, cfg)["objective"]


def smooth_objective(i, dicts: DictionarySet, state: SolverState, cfg: SolverConfig) -> float:
    """Reconstruction plus equality terms; the part the block gradients differentiate."""
    t = objective_terms(i, dicts, state, cfg)
    return t["recon_term"] + t["equality_term"]


def _adjoint(kernels, y):
    # indirection so verification code can inject a broken adjoint
    return tensor.conv_transpose(kernels, y)


def _grad_zt(cache: _Cache, state, cfg):
    d = cache.dicts
    g = -_adjoint(d.d_t, cache.residual())
    if cfg.tau:
        gap = state.z_a - cache.feat_t * cache.feat_r
        g -= cfg.tau * _adjoint(d.m_t, cache.feat_r * gap)
    return g


def _grad_zr(cache: _Cache, state, cfg):
    d = cache.dicts
    g = -_adjoint(d.d_r, cache.residual())
    if cfg.tau:
        gap = state.z_a - cache.feat_t * cache.feat_r
        g -= cfg.tau * _adjoint(d.m_r, cache.feat_t * gap)
    return g


def _grad_zn(cache: _Cache, state, cfg):
    return -_adjoint(cache.dicts.d_n, cache.residual())


def _grad_za(cache: _Cache, state, cfg):
    return state.z_a - cache.feat_t * cache.feat_r


def grad_zt(i, dicts, state, cfg) -> np.ndarray:
    """Gradient of the smooth objective with respect to z_t."""
    i = _check_shapes(i, dicts, state)
    return _grad_zt(_Cache(i, dicts, state), state, cfg)


def grad_zr(i, dicts, state, cfg) -> np.ndarray:
    """Gradient with respect to z_r at whatever z_t the state holds.

    Inside a stage the state already carries the freshly updated z_t.
    """
    i = _check_shapes(i, dicts, state)
    return _grad_zr(_Cache(i, dicts, state), state, cfg)


def grad_zn(i, dicts, state, cfg) -> np.ndarray:
    i = _check_shapes(i, dicts, state)
    return _grad_zn(_Cache(i, dicts, state), state, cfg)


def grad_za(dicts, state, cfg) -> np.ndarray:
    """``z_a - (M_t*z_t) . (M_r*z_r)``: the equality-term gradient divided by tau."""
    return state.z_a - conv_forward(dicts.m_t, state.z_t) * conv_forward(dicts.m_r, state.z_r)


_GRADS = {"t": _grad_zt, "r": _grad_zr, "n": _grad_zn, "a": _grad_za}


def default_proxes(cfg: SolverConfig) -> dict[str, ProxFn]:
    return {b: prox_fn(getattr(cfg, f"prox_{b}")) for b in BLOCKS}


def _candidate_override(block, cand, dicts):
    if block == "t":
        return {"z_t": cand, "t": conv_forward(dicts.d_t, cand),
                "feat_t": conv_forward(dicts.m_t, cand)}
    if block == "r":
        return {"z_r": cand, "r": conv_forward(dicts.d_r, cand),
                "feat_r": conv_forward(dicts.m_r, cand)}
    if block == "n":
        return {"z_n": cand, "n": conv_forward(dicts.d_n, cand)}
    return {"z_a": cand}


def _commit(cache: _Cache, state: SolverState, block: str, override: dict):
    setattr(state, f"z_{block}", override[f"z_{block}"])
    if block in override:
        cache.rec[block] = override[block]
    if "feat_t" in override:
        cache.feat_t = override["feat_t"]
    if "feat_r" in override:
        cache.feat_r = override["feat_r"]


def safu_stage(i, dicts: DictionarySet, state: SolverState, cfg: SolverConfig,
               proxes: Optional[Mapping[str, ProxFn]] = None) -> SolverState:
    """Run one stage (z_t, z_r, z_n, then z_a) and return the new state.

    With ``cfg.backtrack`` each block shrinks its step by ``backtrack_beta``
    until the full objective does not increase; a block that still fails after
    ``max_backtracks`` shrinks is left unchanged and reports a step of 0.
    """
    i = _check_shapes(i, dicts, state)
    proxes = {**default_proxes(cfg), **(proxes or {})}
    state = state.copy()
    cache = _Cache(i, dicts, state)
    current = _terms(cache, state, cfg)["objective"]
    if not state.objective_trace:
        state.objective_trace.append(current)

    with np.errstate(over="ignore", invalid="ignore"):
        for b in BLOCKS:
            z = state.block(b)
            grad = _GRADS[b](cache, state, cfg)
            eta = cfg.eta(b)
            attempts = cfg.max_backtracks + 1 if cfg.backtrack else 1
            accepted = False
            for _ in range(attempts):
                cand = proxes[b](z - eta * grad, cfg.threshold(b, eta))
                override = _candidate_override(b, cand, dicts)
                if not cfg.backtrack:
                    if not np.all(np.isfinite(cand)):
                        raise NumericalDivergence(b, f"stage {state.stage_index}, step {eta:g}")
                    accepted = True
                    break
                value = _terms(cache, state, cfg, **override)["objective"]
                if value <= current + 1e-12:
                    accepted = True
                    break
                eta *= cfg.backtrack_beta
            if accepted:
                _commit(cache, state, b, override)
                state.steps[b] = eta
            else:
                state.steps[b] = 0.0
            if cfg.backtrack:
                current = value if accepted else current
            else:
                current = _terms(cache, state, cfg)["objective"]

    if not math.isfinite(current):
        bad = next((b for b in BLOCKS if not np.all(np.isfinite(state.block(b)))), "a")
        raise NumericalDivergence(bad, "objective is not finite")
    state.terms = _terms(cache, state, cfg)
    state.objective_trace.append(current)
    state.stage_index += 1
    return state


TraceCallback = Callable[[dict], None]


def initial_state(i, dicts: DictionarySet, cfg: SolverConfig) -> SolverState:
    """Analysis-operator warm start: ``z_t = beta * D_t^T I``, others zero except z_a."""
    i = np.asarray(i, dtype=np.float64)
    beta = cfg.init_scale
    if beta is None:
        beta = 1.0 / (dicts.d_t.kernel_size**2 * 3)
    h, w = i.shape[:2]
    state = SolverState.zeros(h, w, dicts.n, dicts.m)
    state.z_t = beta * _adjoint(dicts.d_t, i)
    state.z_a = conv_forward(dicts.m_t, state.z_t) * conv_forward(dicts.m_r, state.z_r)
    return state


def build_pyramid(i, scales: int) -> list[np.ndarray]:
    """Finest level first; each level halves height and width bilinearly."""
    i = np.asarray(i, dtype=np.float64)
    h, w = i.shape[:2]
    if min(h, w) < 2 ** (scales - 1):
        raise ValueError(f"image {h}x{w} is too small for {scales} scales")
    levels = [i]
    for _ in range(scales - 1):
        ph, pw = levels[-1].shape[:2]
        levels.append(resize_bilinear(levels[-1], max(1, ph // 2), max(1, pw // 2)))
    return levels


def _upsample_state(state: SolverState, h: int, w: int) -> SolverState:
    return SolverState(*(resize_bilinear(state.block(b), h, w) for b in BLOCKS))


def solve_multiscale(i, dicts: DictionarySet, cfg: SolverConfig,
                     proxes: Optional[Mapping[str, ProxFn]] = None,
                     callback: Optional[TraceCallback] = None) -> SeparationResult:
    """Coarse-to-fine separation of ``i`` into transmission, reflection and residual."""
    i = np.asarray(i, dtype=np.float64)
    if i.ndim != 3 or i.shape[2] != 3:
        raise DimensionError(f"image must be (H, W, 3), got {i.shape}")
    pyramid = build_pyramid(i, cfg.scales)
    trace = []
    state = None
    for level in range(cfg.scales - 1, -1, -1):
        img = pyramid[level]
        h, w = img.shape[:2]
        if state is None:
            state = initial_state(img, dicts, cfg)
        else:
            state = _upsample_state(state, h, w)
        scale = cfg.scales - level
        prev = None
        for k in range(cfg.stages):
            state = safu_stage(img, dicts, state, cfg, proxes)
            obj = state.objective_trace[-1]
            record = {"scale": scale, "stage": k + 1, **state.terms,
                      **{f"eta_{b}": state.steps.get(b, 0.0) for b in BLOCKS}}
            trace.append(record)
            if callback is not None:
                callback(record)
            log.debug("scale %d stage %d objective %.6g", scale, k + 1, obj)
            if prev is not None and abs(prev - obj) <= cfg.rel_tol * max(abs(prev), 1e-300):
                break
            prev = obj

    t_hat, r_hat, n_hat = reconstruct_images(dicts, state.z_t, state.z_r, state.z_n)
    residual = i - t_hat - r_hat - n_hat
    return SeparationResult(
        t_hat=t_hat, r_hat=r_hat, n_hat=n_hat, residual=residual, state=state, trace=trace,
        recon_l1=float(np.mean(np.abs(residual))),
        aux_l1=float(np.mean(np.abs(state.z_a))),
    )
