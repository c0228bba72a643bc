"""Numerical self-checks: adjointness of the convolution pair and analytic
block gradients against central finite differences."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from sirrkit import solver, tensor
from sirrkit.formation import init_dictionaries
from sirrkit.solver import SolverConfig, SolverState
from sirrkit.tensor import KernelBank, conv_forward, conv_transpose

FD_STEP = 1e-6


@dataclass
class CheckRow:
    name: str
    error: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return bool(self.error <= self.tolerance)


def adjoint_error(kernels: KernelBank, z, y) -> float:
    """``|<K z, y> - <z, K^T y>|`` relative to ``|z| |y| |K|``."""
    lhs = tensor.inner(conv_forward(kernels, z), y)
    rhs = tensor.inner(z, conv_transpose(kernels, y))
    scale = np.linalg.norm(z) * np.linalg.norm(y) * kernels.norm()
    return abs(lhs - rhs) / scale if scale else abs(lhs - rhs)


def random_adjoint_case(rng: np.random.Generator):
    k = int(rng.choice([1, 3, 5, 7]))
    h, w = (int(v) for v in rng.integers(1, 17, size=2))
    cin, cout = (int(v) for v in rng.integers(1, 7, size=2))
    kernels = KernelBank(rng.standard_normal((cout, cin, k, k)))
    return kernels, rng.standard_normal((h, w, cin)), rng.standard_normal((h, w, cout))


def random_instance(rng: np.random.Generator, size: int = 8, n: int = 3, m: int = 3,
                    kernel_size: int = 3, tau: float = 1.0):
    """Small random problem for gradient checks: image, dictionaries, state, config."""
    dicts = init_dictionaries(n=n, m=m, w=kernel_size, seed=int(rng.integers(2**32)),
                              scheme="random_unit")
    i = rng.uniform(0, 1, (size, size, 3))
    state = SolverState(*(0.5 * rng.standard_normal((size, size, c)) for c in (n, n, n, m)))
    cfg = SolverConfig(tau=tau, lambda_t=0.01, lambda_r=0.01, lambda_n=0.01, kappa=0.01)
    return i, dicts, state, cfg


def _fd(fun, z, step=FD_STEP):
    g = np.empty_like(z)
    flat, gflat = z.reshape(-1), g.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + step
        up = fun()
        flat[j] = orig - step
        down = fun()
        flat[j] = orig
        gflat[j] = (up - down) / (2 * step)
    return g


def fd_gradient(i, dicts, state: SolverState, cfg: SolverConfig, block: str,
                step: float = FD_STEP) -> np.ndarray:
    """Central differences of the smooth objective in one block.

    For ``z_a`` the equality term is divided by tau, matching the unit
    coefficient of the auxiliary gradient.
    """
    state = state.copy()
    z = state.block(block)

    def fun():
        if block == "a":
            return solver.objective_terms(i, dicts, state, cfg)["equality_term"] / cfg.tau
        return solver.smooth_objective(i, dicts, state, cfg)

    return _fd(fun, z, step)


def analytic_gradient(i, dicts, state, cfg, block: str) -> np.ndarray:
    if block == "t":
        return solver.grad_zt(i, dicts, state, cfg)
    if block == "r":
        return solver.grad_zr(i, dicts, state, cfg)
    if block == "n":
        return solver.grad_zn(i, dicts, state, cfg)
    return solver.grad_za(dicts, state, cfg)


def relative_error(a, b) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return float(np.linalg.norm(a - b) / denom) if denom else 0.0


def gradient_error(i, dicts, state, cfg, block: str) -> float:
    return relative_error(analytic_gradient(i, dicts, state, cfg, block),
                          fd_gradient(i, dicts, state, cfg, block))


@contextlib.contextmanager
def corrupted_adjoint():
    """Make the solver's gradients use an unflipped kernel in place of the adjoint."""
    original = solver._adjoint

    def broken(kernels, y):
        return tensor._correlate(kernels.weights.transpose(1, 0, 2, 3), np.asarray(y, float))

    solver._adjoint = broken
    try:
        yield
    finally:
        solver._adjoint = original


def run_gradcheck(seed: int = 0, size: int = 8, instances: int = 3, adjoint_cases: int = 100,
                  grad_tol: float = 1e-5, adjoint_tol: float = 1e-10) -> list[CheckRow]:
    """Gradient rows (worst error over instances) first, then adjointness."""
    if size > 16:
        raise ValueError("gradcheck size must be <= 16")
    rng = np.random.default_rng(seed)
    worst = dict.fromkeys(solver.BLOCKS, 0.0)
    for _ in range(instances):
        i, dicts, state, cfg = random_instance(rng, size=size)
        for b in solver.BLOCKS:
            worst[b] = max(worst[b], gradient_error(i, dicts, state, cfg, b))
    rows = [CheckRow(f"grad_z{b}", worst[b], grad_tol) for b in solver.BLOCKS]
    adj = 0.0
    for _ in range(adjoint_cases):
        adj = max(adj, adjoint_error(*random_adjoint_case(rng)))
    rows.append(CheckRow("adjoint_conv", adj, adjoint_tol))
    composite = 0.0
    for _ in range(max(1, adjoint_cases // 10)):
        i, dicts, state, cfg = random_instance(rng, size=size)
        for bank in (dicts.d_t, dicts.d_r, dicts.d_n, dicts.m_t, dicts.m_r):
            z = rng.standard_normal((size, size, bank.in_channels))
            y = rng.standard_normal((size, size, bank.out_channels))
            composite = max(composite, adjoint_error(bank, z, y))
    rows.append(CheckRow("adjoint_dictionaries", composite, adjoint_tol))
    return rows
