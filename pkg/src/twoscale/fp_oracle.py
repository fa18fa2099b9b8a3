"""Ground truth at desk scale.

* A finite-volume Fokker-Planck solver for ``d_t(f mu) = div(mu (A + J) grad f)``
  at ``n = 3``, in orthonormal coordinates of the 2-D mean-zero plane.
* Exact Gaussian (Ornstein-Uhlenbeck) moment dynamics at any ``n`` from the
  circulant spectrum of ``A + J``.

Finite-volume layout: the symmetric part uses face fluxes
``a mu_face (f_j - f_i) / h``.  The antisymmetric part is rewritten as
``div(mu J grad f) = div(f V)`` with the divergence-free field ``V = -J grad mu``,
discretized through a stream function ``omega mu`` at cell corners (zero on
the outer ring, hence no flux through the box boundary) and logarithmic-mean
face values of ``f``.  With that choice the antisymmetric part produces no
entropy exactly and keeps ``f = 1`` stationary to rounding.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import operators as ops
from .coarse_grain import BlockScheme
from .errors import NumericalAbort
from .thermo import Potential


# -- N = 3 Fokker-Planck --------------------------------------------------------------


def plane_basis(n: int = 3) -> np.ndarray:
    """Orthonormal ``(n, 2)`` basis of the first Fourier mode pair."""
    j = np.arange(n)
    return np.sqrt(2.0 / n) * np.column_stack([np.cos(2 * np.pi * j / n), np.sin(2 * np.pi * j / n)])


def restricted_operators(n: int = 3):
    """``(E^T A E, E^T J E)`` for the mode-1 plane ``E``; at ``n = 3`` this is the whole mean-zero plane."""
    e = plane_basis(n)
    a = e.T @ ops.apply_A(e.T).T
    jm = e.T @ ops.apply_J(e.T).T
    return a, jm


def _log_mean(a, b):
    d = np.log(a) - np.log(b)
    small = np.abs(d) < 1e-8
    safe = np.where(small, 1.0, d)
    return np.where(small, 0.5 * (a + b), (a - b) / safe)


@dataclass
class Grid2D:
    """Cell-centred grid on ``[-radius, radius]^2`` holding ``f`` (density w.r.t. ``mu``)."""

    h: float
    radius: float = 6.0
    potential: Potential = field(default_factory=Potential)
    j_scale: float = 1.0
    f: np.ndarray | None = None

    def __post_init__(self):
        cells = int(round(2 * self.radius / self.h))
        self.cells = cells
        self.centres = -self.radius + (np.arange(cells) + 0.5) * self.h
        corners = -self.radius + np.arange(cells + 1) * self.h
        a, jm = restricted_operators(3)
        self.a = float(a[0, 0])
        self.omega = float(jm[0, 1]) * self.j_scale
        e = plane_basis(3)

        def energy(z1, z2):
            x = z1[..., None] * e[:, 0] + z2[..., None] * e[:, 1]
            return np.sum(self.potential.psi(x), axis=-1)

        zx, zy = np.meshgrid(self.centres, self.centres, indexing="ij")
        h0 = energy(zx, zy)
        shift = h0.min()
        self.mu = np.exp(-(h0 - shift))
        norm = self.mu.sum() * self.h ** 2
        self.mu /= norm
        c = self.centres
        fx, fy = np.meshgrid(corners[1:-1], c, indexing="ij")  # faces normal to z1
        self.mu_fx = np.exp(-(energy(fx, fy) - shift)) / norm
        gx, gy = np.meshgrid(c, corners[1:-1], indexing="ij")  # faces normal to z2
        self.mu_fy = np.exp(-(energy(gx, gy) - shift)) / norm
        vx, vy = np.meshgrid(corners, corners, indexing="ij")
        stream = self.omega * np.exp(-(energy(vx, vy) - shift)) / norm
        stream[0, :] = stream[-1, :] = stream[:, 0] = stream[:, -1] = 0.0
        # outward flux through the +z1 face of cell (i, j) is -(s_top - s_bottom) * f_face
        self.vel_x = -(stream[1:-1, 1:] - stream[1:-1, :-1])
        # through the +z2 face: s_right - s_left
        self.vel_y = stream[1:, 1:-1] - stream[:-1, 1:-1]
        if self.f is None:
            self.f = np.ones((cells, cells))

    @property
    def dt_max(self) -> float:
        return 0.25 * self.h ** 2 / self.a

    def mass(self, f=None) -> float:
        f = self.f if f is None else f
        return float(np.sum(f * self.mu) * self.h ** 2)

    def set_density(self, rho) -> None:
        """Set ``f = rho / mu`` from a Lebesgue density ``rho(z1, z2)``, renormalized to unit mass."""
        zx, zy = np.meshgrid(self.centres, self.centres, indexing="ij")
        f = rho(zx, zy) / self.mu
        self.f = f / self.mass(f)

    def _divergence(self, f):
        """``(mu h^2)^-1`` times the net inflow: the time derivative of ``f``."""
        flow = np.zeros_like(f)
        gx = self.a * self.mu_fx * (f[1:, :] - f[:-1, :])
        gy = self.a * self.mu_fy * (f[:, 1:] - f[:, :-1])
        if self.omega != 0.0:
            gx = gx + self.vel_x * _log_mean(f[1:, :], f[:-1, :])
            gy = gy + self.vel_y * _log_mean(f[:, 1:], f[:, :-1])
        flow[:-1, :] += gx
        flow[1:, :] -= gx
        flow[:, :-1] += gy
        flow[:, 1:] -= gy
        return flow / (self.mu * self.h ** 2)

    def rhs(self, f=None):
        return self._divergence(self.f if f is None else f)

    def moments(self):
        zx, zy = np.meshgrid(self.centres, self.centres, indexing="ij")
        w = self.f * self.mu * self.h ** 2
        mean = np.array([np.sum(w * zx), np.sum(w * zy)])
        dx, dy = zx - mean[0], zy - mean[1]
        cov = np.array([[np.sum(w * dx * dx), np.sum(w * dx * dy)], [np.sum(w * dx * dy), np.sum(w * dy * dy)]])
        return mean, cov


def fp_step(grid: Grid2D, dt: float) -> Grid2D:
    """One explicit Euler step, in place.  Mass is conserved to rounding."""
    if dt > grid.dt_max * (1 + 1e-12):
        raise NumericalAbort(f"dt={dt:.3e} exceeds the positivity bound {grid.dt_max:.3e}")
    f = grid.f + dt * grid.rhs()
    if np.any(f < 0) or not np.all(np.isfinite(f)):
        raise NumericalAbort("Fokker-Planck density lost positivity")
    grid.f = f
    return grid


def entropy(grid: Grid2D, f=None) -> float:
    """``S = int f log f dmu``."""
    f = grid.f if f is None else f
    return float(np.sum(grid.mu * f * np.log(f)) * grid.h ** 2)


def fisher_A(grid: Grid2D, f=None) -> float:
    """Discrete ``int A grad f . grad f / f dmu`` matching the face fluxes."""
    f = grid.f if f is None else f
    lf = np.log(f)
    ix = grid.a * grid.mu_fx * (f[1:, :] - f[:-1, :]) * (lf[1:, :] - lf[:-1, :])
    iy = grid.a * grid.mu_fy * (f[:, 1:] - f[:, :-1]) * (lf[:, 1:] - lf[:, :-1])
    return float(ix.sum() + iy.sum())


@dataclass
class EntropySeries:
    times: np.ndarray
    entropy: np.ndarray
    fisher: np.ndarray
    masses: np.ndarray

    @property
    def identity_residual(self) -> np.ndarray:
        """``|(S_{k+1} - S_k)/dt + (I_k + I_{k+1})/2|`` relative to ``max(1, I)``."""
        dt = np.diff(self.times)
        ds = np.diff(self.entropy) / dt
        ia = 0.5 * (self.fisher[1:] + self.fisher[:-1])
        return np.abs(ds + ia) / np.maximum(1.0, ia)

    @property
    def monotone(self) -> bool:
        return bool(np.all(np.diff(self.entropy) <= 1e-14 * max(1.0, abs(self.entropy[0]))))


def fp_entropy_series(grid: Grid2D, dt: float, n_steps: int, every: int = 1) -> EntropySeries:
    """Integrate and record ``S``, ``I_A`` and mass after every ``every`` steps."""
    times, s, fi, mass = [0.0], [entropy(grid)], [fisher_A(grid)], [grid.mass()]
    for k in range(1, n_steps + 1):
        fp_step(grid, dt)
        if k % every == 0:
            times.append(k * dt)
            s.append(entropy(grid))
            fi.append(fisher_A(grid))
            mass.append(grid.mass())
    return EntropySeries(np.array(times), np.array(s), np.array(fi), np.array(mass))


# -- Ornstein-Uhlenbeck moments --------------------------------------------------------------


def _unitary_dft(n: int) -> np.ndarray:
    return np.fft.fft(np.eye(n), axis=0) / np.sqrt(n)


def _full_eigenvalues(n: int):
    k = np.arange(n)
    return ops.a_eigenvalues(n, k) + 1j * n * np.sin(2 * np.pi * k / n), ops.a_eigenvalues(n, k)


@dataclass
class OuMoments:
    mean: np.ndarray
    cov: np.ndarray
    time: float
    cov_rate: np.ndarray | None = None

    def lyapunov_defect(self) -> float:
        """Max-norm residual of ``dS/dt = -(A+J)S - S(A+J)^T + 2A``, relative to ``max |2A|``."""
        n = self.mean.size
        m = ops.operator_matrix(ops.apply_A, n) + ops.operator_matrix(ops.apply_J, n)
        a = ops.operator_matrix(ops.apply_A, n)
        rhs = -m @ self.cov - self.cov @ m.T + 2 * a
        return float(np.max(np.abs(self.cov_rate - rhs)) / np.max(np.abs(2 * a)))


def ou_propagate(m0, cov0, t: float) -> OuMoments:
    """Exact mean and covariance of the linear dynamics at time ``t``.

    In the unitary Fourier basis the generator is diagonal with eigenvalues
    ``l_k = a_k + i n sin(2 pi k / n)``, so
    ``S_kl(t) = S_kl(0) exp(-(l_k + conj l_l) t) + delta_kl (1 - exp(-2 a_k t))`` for ``k != 0``.
    """
    m0 = np.asarray(m0, dtype=float)
    cov0 = np.asarray(cov0, dtype=float)
    n = m0.size
    lam, a = _full_eigenvalues(n)
    mean = np.real(np.fft.ifft(np.fft.fft(m0) * np.exp(-lam * t)))
    f = _unitary_dft(n)
    s0 = f @ cov0 @ f.conj().T
    decay = np.exp(-np.add.outer(lam, lam.conj()) * t)
    noise = np.where(a > 0, 1.0 - np.exp(-2 * a * t), 0.0)
    s_t = s0 * decay + np.diag(noise)
    rate = -np.add.outer(lam, lam.conj()) * s0 * decay + np.diag(np.where(a > 0, 2 * a * np.exp(-2 * a * t), 0.0))
    back = lambda s: np.real(f.conj().T @ s @ f)
    cov = back(s_t)
    return OuMoments(mean, 0.5 * (cov + cov.T), float(t), back(rate))


def stationary_cov(n: int) -> np.ndarray:
    """Identity restricted to the mean-zero subspace."""
    return np.eye(n) - 1.0 / n


def ou_theta_exact(moments: OuMoments, eta, scheme: BlockScheme) -> float:
    """``(1/2n)[Tr(A^-1 S) + d^T A^-1 d]`` with ``d = m - N P^t eta``, on the mean-zero subspace."""
    n = scheme.n
    f = _unitary_dft(n)
    diag = np.real(np.einsum("ki,ij,kj->k", f, moments.cov, f.conj()))
    a = ops.a_eigenvalues(n, np.arange(n))
    trace = float(np.sum(diag[1:] / a[1:]))
    d = moments.mean - scheme.lift(eta)
    return (trace + n * float(ops.quad_form_Ainv(d))) / (2.0 * n)
