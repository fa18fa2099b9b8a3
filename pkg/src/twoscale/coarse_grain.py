"""Block averaging ``P``, its lift ``N P^t`` and the macroscopic operators.

Macroscopic vectors are plain length-``m`` coordinate arrays.  The weighted
inner product ``<y, z>_Y = (1/m) sum y_i z_i`` lives only in
:func:`inner_Y` / :func:`norm2_Y`; nothing here rescales coordinates.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import linalg
from scipy.sparse.linalg import LinearOperator, eigsh

from . import operators as ops
from .errors import DimensionError, NumericalAbort


@dataclass(frozen=True)
class BlockScheme:
    """``n = k * m`` sites grouped into ``m`` consecutive blocks of ``k``."""

    n: int
    m: int
    k: int = field(init=False)

    def __post_init__(self):
        n, m = int(self.n), int(self.m)
        if m < 3:
            raise DimensionError(f"need m >= 3 blocks, got {m}")
        if n % m:
            raise DimensionError(f"block count {m} does not divide n = {n}")
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "k", n // m)

    def _micro(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n:
            raise DimensionError(f"expected {self.n} sites, got {x.shape[-1]}")
        return x

    def _macro(self, y):
        y = np.asarray(y, dtype=float)
        if y.shape[-1] != self.m:
            raise DimensionError(f"expected {self.m} blocks, got {y.shape[-1]}")
        return y

    # -- P and N P^t -------------------------------------------------------

    def project(self, x):
        x = self._micro(x)
        blocks = x.reshape(x.shape[:-1] + (self.m, self.k))
        # shifted mean: exact on block-constant input, so P N P^t = id bitwise
        first = blocks[..., :1]
        return first[..., 0] + (blocks - first).mean(axis=-1)

    def lift(self, y):
        return np.repeat(self._macro(y), self.k, axis=-1)

    def fluctuation(self, x):
        x = self._micro(x)
        return x - self.lift(self.project(x))

    # -- macroscopic operators -----------------------------------------------

    def macro_Ainv(self, y):
        """``P A^{-1} N P^t y`` for mean-zero ``y``."""
        y = self._macro(y)
        ops.require_mean_zero(y)
        return self.project(ops.solve_A_inv(self.lift(y)))

    @cached_property
    def _mean_zero_basis(self) -> np.ndarray:
        return linalg.null_space(np.ones((1, self.m)))

    @cached_property
    def macro_Ainv_matrix(self) -> np.ndarray:
        """Dense ``m x m`` matrix of ``P A^{-1} N P^t`` (coordinates, not Y-weighted)."""
        basis = np.eye(self.m) - 1.0 / self.m
        return self.macro_Ainv(basis).T

    @cached_property
    def _restricted_factor(self):
        q = self._mean_zero_basis
        b = q.T @ self.macro_Ainv_matrix @ q
        b = 0.5 * (b + b.T)
        try:
            return linalg.cho_factor(b)
        except linalg.LinAlgError as exc:
            raise NumericalAbort(f"P A^-1 N P^t not positive definite for {self}") from exc

    def macro_A(self, y):
        """Inverse of :meth:`macro_Ainv` on mean-zero vectors."""
        y = self._macro(y)
        ops.require_mean_zero(y)
        q = self._mean_zero_basis
        z = linalg.cho_solve(self._restricted_factor, (y @ q).T).T
        return z @ q.T

    @cached_property
    def macro_A_matrix(self) -> np.ndarray:
        return self.macro_A(np.eye(self.m) - 1.0 / self.m).T

    def apply_PAinvJNPt(self, xi):
        """``P A^{-1} J N P^t xi`` by the cumulative-sum closed form.

        Up to an additive constant the action is ``xi / (2m) - cumsum(xi) / m``;
        the constant is fixed by the output being mean-zero.
        """
        xi = self._macro(xi)
        ops.require_mean_zero(xi)
        out = 0.5 * xi / self.m - np.cumsum(xi, axis=-1) / self.m
        return out - out.mean(axis=-1, keepdims=True)

    @cached_property
    def PAinvJNPt_matrix(self) -> np.ndarray:
        return self.apply_PAinvJNPt(np.eye(self.m) - 1.0 / self.m).T

    @cached_property
    def fluctuation_constant(self) -> float:
        """Smallest ``gamma`` with ``|x - N P^t P x|^2 <= gamma m^-2 <x, A x>``.

        Equals ``m^2`` times the top eigenvalue of ``Q A^{-1} Q`` with ``Q`` the
        fluctuation projector; the same number bounds ``<Qx, A^{-1} Qx>``.
        """
        n = self.n

        def matvec(v):
            q = self.fluctuation(np.ravel(v))
            return self.fluctuation(ops.solve_A_inv(q))

        if n <= 600:
            mat = matvec_matrix(matvec, n)
            top = float(linalg.eigvalsh(0.5 * (mat + mat.T))[-1])
        else:
            op = LinearOperator((n, n), matvec=matvec, dtype=float)
            top = float(eigsh(op, k=1, which="LA", return_eigenvectors=False, tol=1e-10)[0])
        return self.m ** 2 * top


def matvec_matrix(matvec, n: int) -> np.ndarray:
    return np.column_stack([matvec(e) for e in np.eye(n)])


def inner_Y(y, z):
    y = np.asarray(y, dtype=float)
    return np.sum(y * np.asarray(z, dtype=float), axis=-1) / y.shape[-1]


def norm2_Y(y):
    return inner_Y(y, y)


def block_averages(profile, m: int, order: int = 8):
    """Cell averages of a periodic profile on ``[0, 1)`` over ``m`` equal blocks.

    Gauss-Legendre with ``order`` nodes per block; exact for polynomials of
    degree ``2 order - 1`` and spectrally accurate for smooth profiles.
    """
    nodes, weights = np.polynomial.legendre.leggauss(order)
    left = np.arange(m)[:, None] / m
    theta = left + (nodes[None, :] + 1.0) / (2.0 * m)
    return np.asarray(profile(theta), dtype=float) @ weights / 2.0
