"""Circulant lattice operators on the periodic chain of ``n`` sites.

All functions act along the last axis, so an ensemble stored as an
``(r, n)`` array is handled in one call.

    A = n^2 * (periodic second difference)      (Ax)_i = n^2 (2x_i - x_{i+1} - x_{i-1})
    J = (n/2) * (periodic centred difference)   (Jx)_i = (n/2) (x_{i+1} - x_{i-1})
    D = n * (forward difference)                (Dx)_i = n (x_i - x_{i+1})

with ``A = D D^T`` and ``J = (D^T - D) / 2``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, MeanZeroError

EPS_MEAN = 1e-9
EPS_SOLVE = 1e-10


def check_dim(n: int) -> int:
    n = int(n)
    if n < 3:
        raise DimensionError(f"lattice needs n >= 3 sites, got {n}")
    return n


def _sites(x, n=None):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        raise DimensionError("expected a vector of lattice values")
    if n is not None and x.shape[-1] != n:
        raise DimensionError(f"expected {n} sites, got {x.shape[-1]}")
    check_dim(x.shape[-1])
    return x


def is_mean_zero(x, tol: float = EPS_MEAN) -> bool:
    x = np.asarray(x, dtype=float)
    scale = max(1.0, float(np.max(np.abs(x)))) if x.size else 1.0
    return bool(np.all(np.abs(x.mean(axis=-1)) <= tol * scale))


def require_mean_zero(x, tol: float = EPS_MEAN):
    # tolerance is relative to max|x| so that n^2-scaled vectors pass
    if not is_mean_zero(x, tol):
        worst = float(np.max(np.abs(np.asarray(x).mean(axis=-1))))
        raise MeanZeroError(f"vector mean {worst:.3e} exceeds tolerance {tol:.1e}")


def _up(x):
    return np.roll(x, -1, axis=-1)  # x_{i+1}


def _down(x):
    return np.roll(x, 1, axis=-1)  # x_{i-1}


def apply_A(x, n=None):
    x = _sites(x, n)
    m = x.shape[-1]
    return m * m * (2.0 * x - _up(x) - _down(x))


def apply_J(x, n=None):
    x = _sites(x, n)
    m = x.shape[-1]
    return 0.5 * m * (_up(x) - _down(x))


def apply_D(x, n=None):
    x = _sites(x, n)
    return x.shape[-1] * (x - _up(x))


def apply_Dt(x, n=None):
    x = _sites(x, n)
    return x.shape[-1] * (x - _down(x))


def a_eigenvalues(n: int, k=None):
    """Eigenvalues ``4 n^2 sin^2(pi k / n)`` of A for the Fourier modes ``k``."""
    n = check_dim(n)
    k = np.arange(n // 2 + 1) if k is None else np.asarray(k)
    return 4.0 * n * n * np.sin(np.pi * k / n) ** 2


def aj_eigenvalues(n: int, k=None):
    """Complex eigenvalues of A + J as seen by ``numpy.fft.rfft`` coefficients."""
    n = check_dim(n)
    k = np.arange(n // 2 + 1) if k is None else np.asarray(k)
    return a_eigenvalues(n, k) + 1j * n * np.sin(2.0 * np.pi * k / n)


def spectral_gap(n: int) -> float:
    return float(a_eigenvalues(n, 1))


def solve_A_inv(x, n=None):
    """Return the mean-zero ``y`` with ``A y = x`` for mean-zero ``x``."""
    x = _sites(x, n)
    require_mean_zero(x)
    m = x.shape[-1]
    lam = a_eigenvalues(m)
    inv = np.zeros_like(lam)
    inv[1:] = 1.0 / lam[1:]
    return np.fft.irfft(np.fft.rfft(x, axis=-1) * inv, n=m, axis=-1)


def _solve_D(x):
    # D y = x on the mean-zero subspace: y_{i+1} = y_i - x_i / n
    m = x.shape[-1]
    y = -np.concatenate([np.zeros(x.shape[:-1] + (1,)), np.cumsum(x[..., :-1], axis=-1)], axis=-1) / m
    return y - y.mean(axis=-1, keepdims=True)


def _solve_Dt(x):
    # D^T y = x on the mean-zero subspace: y_i = y_{i-1} + x_i / n
    m = x.shape[-1]
    y = np.cumsum(x, axis=-1) / m
    return y - y.mean(axis=-1, keepdims=True)


def apply_JAinv(x, n=None):
    """``J A^{-1} x`` through ``(D^{-1} - D^{-T}) / 2`` on mean-zero inputs."""
    x = _sites(x, n)
    require_mean_zero(x)
    return 0.5 * (_solve_D(x) - _solve_Dt(x))


def quad_form_Ainv(x, n=None):
    """``(1/n) <A^{-1} x, x>`` for mean-zero ``x``."""
    x = _sites(x, n)
    return np.sum(solve_A_inv(x) * x, axis=-1) / x.shape[-1]


def operator_matrix(apply, n: int) -> np.ndarray:
    """Dense matrix of a lattice operator, built column by column."""
    return apply(np.eye(n)).T


@dataclass(frozen=True)
class AssumptionReport:
    n: int
    antisymmetry_exact: bool
    commutator_residual: float
    commutator_tol: float
    c_ratio_max: float
    c_violations: int
    tau: float
    tau_limit: float

    @property
    def commute_ok(self) -> bool:
        return self.commutator_residual <= self.commutator_tol

    @property
    def ok(self) -> bool:
        return self.antisymmetry_exact and self.commute_ok and self.c_violations == 0

    def as_dict(self) -> dict:
        return {
            "n": self.n,
            "antisymmetry_exact": self.antisymmetry_exact,
            "commutator_residual": self.commutator_residual,
            "commutator_tol": self.commutator_tol,
            "commute_ok": self.commute_ok,
            "c_ratio_max": self.c_ratio_max,
            "c_violations": self.c_violations,
            "tau": self.tau,
            "tau_limit": self.tau_limit,
            "ok": self.ok,
        }


def check_assumptions(n: int, n_random: int = 1000, rng=None) -> AssumptionReport:
    """Check antisymmetry of J, [A, J] = 0, -J^2 <= A and the spectral gap of A.

    Dense matrices are assembled from the operator actions, so the checks see
    exactly the arithmetic that the simulations use.
    """
    n = check_dim(n)
    rng = np.random.default_rng(rng)
    A = operator_matrix(apply_A, n)
    J = operator_matrix(apply_J, n)
    antisym = bool(np.array_equal(J.T, -J))
    comm = float(np.max(np.abs(A @ J - J @ A)))

    x = rng.standard_normal((n_random, n))
    jx = apply_J(x)
    lhs = np.sum(jx * jx, axis=-1)
    rhs = np.sum(apply_A(x) * x, axis=-1)
    ratio = lhs / rhs
    # rounding slack: both sides are O(n^2 |x|^2) sums
    violations = int(np.sum(lhs > rhs * (1.0 + 1e-12)))

    return AssumptionReport(
        n=n,
        antisymmetry_exact=antisym,
        commutator_residual=comm,
        commutator_tol=1e-9 * n * n,
        c_ratio_max=float(np.max(ratio)),
        c_violations=violations,
        tau=spectral_gap(n),
        tau_limit=4.0 * np.pi ** 2,
    )
