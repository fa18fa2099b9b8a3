"""Macroscopic ODE on block profiles and the limiting nonlinear PDE on the torus.

The lattice drift ``-(A + J) grad H`` with ``(Jx)_i = (n/2)(x_{i+1} - x_{i-1})``
produces the transport term ``-d/dtheta phi'(zeta)`` in the continuum limit,
while the stated limiting equation carries ``+d/dtheta phi'(zeta)``.  The PDE
routines therefore take ``sign`` (default ``+1``, the stated equation);
comparisons against lattice dynamics use :data:`LATTICE_TRANSPORT`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from . import metrics
from .coarse_grain import BlockScheme
from .errors import NumericalAbort
from .thermo import PsiKTable, macro_energy, macro_grad_H

LATTICE_TRANSPORT = -1


# -- macroscopic ODE ---------------------------------------------------------------


def macro_rhs(eta, table: PsiKTable, scheme: BlockScheme):
    """``-(Abar + Jbar) grad H(eta)`` evaluated as ``-Abar (w + P A^-1 J N P^t w)``."""
    w = macro_grad_H(eta, table)
    return -scheme.macro_A(w + scheme.apply_PAinvJNPt(w))


def macro_jacobian(eta, table: PsiKTable, scheme: BlockScheme) -> np.ndarray:
    m = scheme.m
    proj = np.eye(m) - 1.0 / m
    return -scheme.macro_A_matrix @ (np.eye(m) + scheme.PAinvJNPt_matrix) @ proj * table.d2psi(eta)[None, :]


@dataclass
class MacroTrajectory:
    times: np.ndarray
    profiles: np.ndarray
    scheme: BlockScheme
    table_key: str
    energies: np.ndarray
    growth_rate: float

    @property
    def energy_bound(self) -> np.ndarray:
        """``exp(C t) (H(eta_0) + 1)`` with the a priori growth rate ``C``."""
        return np.exp(self.growth_rate * self.times) * (self.energies[0] + 1.0)

    @property
    def energy_bound_ok(self) -> bool:
        return bool(np.all(self.energies <= self.energy_bound * (1 + 1e-12)))


def energy_growth_rate(table: PsiKTable, interval: float | None = None, c: float = 1.0) -> float:
    """Gronwall rate ``c Lambda^2 / lambda`` for the coarse-grained energy.

    From ``dH/dt <= (c/2)|grad H|^2 <= (c Lambda^2 / lambda) H`` when ``H`` is
    measured from its minimum.
    """
    from .thermo import convexity_bounds

    lam, big = convexity_bounds(table, interval)
    return c * big * big / lam


def integrate_macro(eta0, t_end: float, table: PsiKTable, scheme: BlockScheme, t_eval=None, rtol: float = 1e-8, atol: float = 1e-11) -> MacroTrajectory:
    """Integrate the macroscopic ODE with an implicit adaptive Runge-Kutta method (Radau IIA)."""
    eta0 = np.asarray(eta0, dtype=float)
    t_eval = np.array([0.0, t_end]) if t_eval is None else np.asarray(t_eval, dtype=float)
    if t_end == 0:
        profiles = np.repeat(eta0[None], len(t_eval), axis=0)
    else:
        sol = solve_ivp(
            lambda t, y: macro_rhs(y, table, scheme),
            (0.0, t_end),
            eta0,
            method="Radau",
            t_eval=t_eval,
            rtol=rtol,
            atol=atol,
            jac=lambda t, y: macro_jacobian(y, table, scheme),
        )
        if not sol.success:
            raise NumericalAbort(f"macro ODE integration failed: {sol.message}; state {sol.y[:, -1]!r}")
        profiles = sol.y.T
    drift = np.max(np.abs(profiles.mean(axis=1) - eta0.mean()))
    if drift > 1e-10:
        raise NumericalAbort(f"macro ODE lost mean conservation ({drift:.2e})")
    span = float(np.max(np.abs(profiles)))
    energies = macro_energy(profiles, table)
    return MacroTrajectory(t_eval, profiles, scheme, table.key(), energies, energy_growth_rate(table, span))


def gaussian_macro_propagator(scheme: BlockScheme, t: float) -> np.ndarray:
    """``expm(-t Abar (I + B))`` on mean-zero profiles for ``psi_K' = id``."""
    from scipy.linalg import expm

    m = scheme.m
    gen = -scheme.macro_A_matrix @ (np.eye(m) + scheme.PAinvJNPt_matrix) @ (np.eye(m) - 1.0 / m)
    return expm(t * gen)


# -- limiting PDE ---------------------------------------------------------------------


class LinearFlux:
    """``phi'(m) = m``: the flux of the Gaussian model, valid on all of R."""

    m_max = np.inf

    def dphi(self, z):
        return np.asarray(z, dtype=float)

    def d2phi(self, z):
        return np.ones_like(np.asarray(z, dtype=float))


def pde_nodes(m_pde: int) -> np.ndarray:
    """Cell centres ``(j + 1/2) / m_pde``."""
    return (np.arange(m_pde) + 0.5) / m_pde


def pde_rhs(zeta, flux, sign: int = 1):
    """``D2 u + sign * D1 u`` with ``u = phi'(zeta)``; periodic, mesh ``1/m_pde``."""
    zeta = np.asarray(zeta, dtype=float)
    m = zeta.shape[-1]
    u = flux.dphi(zeta)
    up, down = np.roll(u, -1, axis=-1), np.roll(u, 1, axis=-1)
    return m * m * (up - 2.0 * u + down) + sign * 0.5 * m * (up - down)


@dataclass
class PdeGridSolution:
    m_pde: int
    dt: float
    times: np.ndarray
    values: np.ndarray
    sign: int = 1

    @property
    def nodes(self) -> np.ndarray:
        return pde_nodes(self.m_pde)

    def mass(self) -> np.ndarray:
        return self.values.mean(axis=-1)


def _check_range(zeta, flux):
    if np.max(np.abs(zeta)) > flux.m_max:
        from .errors import TableRangeError

        raise TableRangeError(f"PDE state {np.max(np.abs(zeta)):.3g} outside flux table")


def solve_pde(zeta0, t_end: float, flux, sign: int = 1, t_eval=None, dt: float | None = None, c0: float | None = None) -> PdeGridSolution:
    """IMEX Euler for ``zeta_t = (phi'(zeta))'' + sign (phi'(zeta))'``.

    Frozen-coefficient diffusion ``c0 D2`` (``c0 = max phi''``) is implicit and
    inverted with the FFT; the remainder of the diffusion and the advection
    are explicit.  Default ``dt = 0.25 h^2 / max phi''``.  The discrete mass
    is restored after every step, so it is conserved to rounding.
    """
    zeta = np.array(zeta0, dtype=float)
    m = zeta.size
    _check_range(zeta, flux)
    lo = -np.max(np.abs(zeta)) if np.isfinite(flux.m_max) else -1.0
    probe = np.linspace(lo, -lo, 257)
    cmax = float(np.max(flux.d2phi(probe)))
    c0 = cmax if c0 is None else c0
    dt = 0.25 / (m * m * cmax) if dt is None else dt
    t_eval = np.array([0.0, t_end]) if t_eval is None else np.asarray(t_eval, dtype=float)
    n_steps = max(int(np.ceil(t_end / dt - 1e-9)), 1) if t_end > 0 else 0
    dt = t_end / n_steps if n_steps else dt
    targets = [int(round(t / dt)) if n_steps else 0 for t in t_eval]

    d2_eig = -4.0 * m * m * np.sin(np.pi * np.arange(m // 2 + 1) / m) ** 2
    denom = 1.0 - dt * c0 * d2_eig
    mass0 = zeta.mean()

    out, ti = [], 0
    while ti < len(targets) and targets[ti] == 0:
        out.append(zeta.copy())
        ti += 1
    for k in range(1, n_steps + 1):
        lin = np.fft.irfft(d2_eig * np.fft.rfft(zeta), n=m)
        rhs = zeta + dt * (pde_rhs(zeta, flux, sign) - c0 * lin)
        zeta = np.fft.irfft(np.fft.rfft(rhs) / denom, n=m)
        zeta += mass0 - zeta.mean()
        if not np.all(np.isfinite(zeta)):
            raise NumericalAbort(f"PDE solution became non-finite at step {k}")
        while ti < len(targets) and targets[ti] == k:
            out.append(zeta.copy())
            ti += 1
    _check_range(zeta, flux)
    return PdeGridSolution(m, dt, np.asarray(t_eval, dtype=float), np.array(out), sign)


def gaussian_exact_pde(zeta0, t, sign: int = 1):
    """Exact solution of ``zeta_t = zeta'' + sign zeta'`` from nodal data.

    Fourier mode ``k`` is multiplied by ``exp((-4 pi^2 k^2 + sign 2 pi i k) t)``.
    """
    zeta0 = np.asarray(zeta0, dtype=float)
    m = zeta0.shape[-1]
    k = np.arange(m // 2 + 1)
    t = np.asarray(t, dtype=float)
    factor = np.exp(np.multiply.outer(t, -4.0 * np.pi ** 2 * k * k + sign * 2j * np.pi * k))
    return np.fft.irfft(np.fft.rfft(zeta0) * factor, n=m, axis=-1)


@dataclass
class UniquenessReport:
    times: np.ndarray
    gap: np.ndarray
    bound: np.ndarray
    rate: float

    @property
    def ok(self) -> bool:
        return bool(np.all(self.gap <= self.bound * (1 + 1e-9) + 1e-15))


def pde_uniqueness_contraction(sol1: PdeGridSolution, sol2: PdeGridSolution, flux) -> UniquenessReport:
    """Monitor ``F(t) = |zeta1 - zeta2|_{H^-1}^2 / 2`` against ``F(0) exp(C t)``.

    ``C = sup phi'' * (sup phi'' / inf phi'')`` over the range of both solutions.
    """
    if sol1.m_pde != sol2.m_pde or not np.allclose(sol1.times, sol2.times):
        raise ValueError("solutions must share grid and checkpoints")
    diff = sol1.values - sol2.values
    if np.max(np.abs(diff.mean(axis=-1))) > 1e-12:
        raise ValueError("solutions carry different mass; the H^-1 gap is undefined")
    diff = diff - diff.mean(axis=-1, keepdims=True)
    gap = 0.5 * metrics.h_minus1_sq(diff)
    span = max(np.max(np.abs(sol1.values)), np.max(np.abs(sol2.values)))
    probe = np.linspace(-span, span, 513)
    d2 = flux.d2phi(probe)
    rate = float(d2.max() * d2.max() / d2.min())
    return UniquenessReport(sol1.times, gap, gap[0] * np.exp(rate * sol1.times), rate)
