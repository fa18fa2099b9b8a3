"""Discrete H^-1 norm, ensemble estimators and the error functional ``E(T, M, N)``."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import linalg

from . import operators as ops
from .coarse_grain import BlockScheme, norm2_Y
from .errors import DimensionError, MeanZeroError


# -- step functions and H^-1 -------------------------------------------------------


@dataclass(frozen=True)
class StepFunction:
    """``x(theta) = values[i]`` on ``[i/n, (i+1)/n)``."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))

    @property
    def n(self) -> int:
        return self.values.shape[-1]

    def refine(self, n: int) -> "StepFunction":
        if n % self.n:
            raise DimensionError(f"mesh 1/{n} does not refine mesh 1/{self.n}")
        return StepFunction(np.repeat(self.values, n // self.n, axis=-1))


def common_mesh(*sizes: int) -> int:
    return math.lcm(*[int(s) for s in sizes])


def _values(w):
    return w.values if isinstance(w, StepFunction) else np.asarray(w, dtype=float)


def h_minus1_sq(w, tol: float = ops.EPS_MEAN):
    """``|w|_{H^-1}^2 = int g^2`` with ``g' = w`` and ``int g = 0``, for a mean-zero step function.

    The primitive is piecewise linear with nodal values ``G_j = h sum_{i<j} w_i``,
    so the integral is exact: ``h (a^2 + a b + b^2) / 3`` per cell after
    removing the mean of ``g``.  Acts on the last axis.
    """
    w = _values(w)
    if not ops.is_mean_zero(w, tol):
        raise MeanZeroError("H^-1 norm needs a mean-zero function")
    n = w.shape[-1]
    h = 1.0 / n
    w = w - w.mean(axis=-1, keepdims=True)
    g = np.concatenate([np.zeros(w.shape[:-1] + (1,)), np.cumsum(w, axis=-1) * h], axis=-1)
    a, b = g[..., :-1], g[..., 1:]
    g = g - np.sum(0.5 * h * (a + b), axis=-1, keepdims=True)
    a, b = g[..., :-1], g[..., 1:]
    return np.sum(h * (a * a + a * b + b * b) / 3.0, axis=-1)


def norm_sandwich_ratios(n: int) -> tuple[float, float]:
    """Extreme values of ``(1/n)<A^-1 x, x> / |xbar|_{H^-1}^2`` over mean-zero ``x``.

    Both quadratic forms commute with lattice shifts, so the extremes are
    attained on the Fourier modes.
    """
    j = np.arange(n)
    k = np.arange(1, n // 2 + 1)
    modes = np.cos(2.0 * np.pi * np.outer(k, j) / n)
    ratio = ops.quad_form_Ainv(modes) / h_minus1_sq(modes)
    return float(ratio.min()), float(ratio.max())


def norm_sandwich_constant(ns) -> float:
    """Smallest ``C`` with ``C^-1 |xbar|^2 <= (1/n)<A^-1 x, x> <= C |xbar|^2`` for all listed ``n``."""
    worst = 1.0
    for n in ns:
        lo, hi = norm_sandwich_ratios(n)
        worst = max(worst, hi, 1.0 / lo)
    return worst


# -- ensemble estimators -------------------------------------------------------------


def _mean_and_stderr(samples):
    samples = np.asarray(samples, dtype=float)
    r = samples.shape[0]
    se = samples.std(ddof=1) / np.sqrt(r) if r > 1 else 0.0
    return float(samples.mean()), float(se)


def theta_estimate(states, eta, scheme: BlockScheme):
    """Monte Carlo ``Theta = (1/2n) E <A^-1 d, d>`` with ``d = x - N P^t eta``; returns ``(value, stderr)``."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    d = states - scheme.lift(eta)
    return _mean_and_stderr(0.5 * ops.quad_form_Ainv(d, scheme.n))


def hydro_gap(states, zeta_nodes, mass_tol: float = 1e-8):
    """Monte Carlo ``E |xbar - zeta|_{H^-1}^2`` on the common refinement of both meshes."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    zeta = np.asarray(zeta_nodes, dtype=float)
    n = common_mesh(states.shape[-1], zeta.size)
    diff = StepFunction(states).refine(n).values - StepFunction(zeta).refine(n).values
    mass = diff.mean(axis=-1, keepdims=True)
    if np.max(np.abs(mass)) > mass_tol:
        raise MeanZeroError(f"ensemble and profile carry different mass ({np.max(np.abs(mass)):.2e})")
    return _mean_and_stderr(h_minus1_sq(diff - mass))


def macro_gap(states, eta, scheme: BlockScheme):
    """Monte Carlo ``E |P x - eta|_Y^2``."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    return _mean_and_stderr(norm2_Y(scheme.project(states) - np.asarray(eta, dtype=float)))


def time_integral(times, values, stderrs=None):
    """Trapezoid integral; the error bar assumes fully correlated checkpoint errors."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if times.size < 2:
        return 0.0, 0.0
    weights = np.zeros_like(times)
    dt = np.diff(times)
    weights[:-1] += 0.5 * dt
    weights[1:] += 0.5 * dt
    se = 0.0 if stderrs is None else float(weights @ np.asarray(stderrs, dtype=float))
    return float(weights @ values), se


# -- error functional ------------------------------------------------------------------


@dataclass
class TheoremConstants:
    """Inputs of ``E(T, M, N)``.

    ``energy_drop`` is ``H(eta_0) - H(eta_T)``, ``energy0`` is ``H(eta_0)`` and
    ``growth`` the Gronwall rate ``C`` of the coarse-grained energy.
    ``assumed`` lists the constants that are hypotheses rather than measurements.
    """

    c: float
    lam: float
    Lam: float
    tau: float
    gamma: float
    kappa: float
    rho: float
    alpha: float
    C1: float
    C2: float
    T: float
    M: int
    N: int
    energy_drop: float = 0.0
    energy0: float = 0.0
    growth: float = 0.0
    assumed: tuple = ("rho", "C1")

    def __post_init__(self):
        positive = {"c": self.c, "lam": self.lam, "Lam": self.Lam, "tau": self.tau, "gamma": self.gamma, "rho": self.rho, "M": self.M, "N": self.N}
        bad = [k for k, v in positive.items() if not v > 0]
        nonneg = {"kappa": self.kappa, "alpha": self.alpha, "C1": self.C1, "T": self.T, "energy0": self.energy0, "growth": self.growth}
        bad += [k for k, v in nonneg.items() if not v >= 0]
        if bad:
            raise ValueError(f"theorem constants must be positive: {bad}")

    @property
    def rho_hat(self) -> float:
        s = self.rho + self.lam + self.kappa ** 2 / self.rho
        disc = s * s - 4.0 * self.rho * self.lam
        if disc < -1e-12 * s * s:
            raise ValueError("inconsistent lambda, rho, kappa: negative discriminant in rho_hat")
        # rationalized form of (s - sqrt(disc)) / 2, free of cancellation
        return 2.0 * self.rho * self.lam / (s + math.sqrt(max(disc, 0.0)))

    def as_dict(self) -> dict:
        out = asdict(self)
        out["rho_hat"] = self.rho_hat
        out["assumed"] = list(self.assumed)
        return out


def error_functional_E(k: TheoremConstants) -> tuple[float, dict]:
    """``E(T, M, N)`` and its four terms."""
    c, lam, Lam, tau, gam, kap, rho = k.c, k.lam, k.Lam, k.tau, k.gamma, k.kappa, k.rho
    T, M, N, C1 = k.T, float(k.M), float(k.N), k.C1
    moment = k.alpha + 2.0 * C1 / k.rho_hat
    drop = max(k.energy_drop, 0.0)
    terms = {
        "scale": T * M / N,
        "macro": 4.0 * c * gam * Lam ** 2 * T / lam * moment / M,
        "fluct": C1 * (gam * kap ** 2 / (2 * lam * rho ** 2) + 2 * c * gam * kap ** 2 / (tau * lam * rho ** 2) + 4 * gam * c / (lam * tau)) / M ** 2,
        "cross": math.sqrt(2 * T * gam) * math.sqrt(moment) * (
            (1 + math.sqrt(c / tau) + math.sqrt(2 * c * gam) / M) * math.sqrt(C1)
            + math.sqrt(2) * (1 + math.sqrt(c / tau)) * drop
            + k.growth * T * math.sqrt(1 + math.exp(k.growth * T) * k.energy0)
        ) / M,
    }
    return float(sum(terms.values())), terms


@dataclass
class BoundVerdict:
    lhs: float
    rhs: float
    margin: float
    mc_stderr: float
    ok: bool
    detail: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)


def theorem1_bound_check(theta_values, theta_stderrs, times, gaps, gap_stderrs, constants: TheoremConstants, n_sigma: float = 3.0) -> BoundVerdict:
    """Check ``max(sup Theta, (lambda/8) int gap) <= exp(8 c Lambda^2 T / lambda) (Theta(0) + E)``.

    The check is statistical: it passes when the left side plus ``n_sigma``
    combined standard errors stays below the right side.
    """
    theta_values = np.asarray(theta_values, dtype=float)
    theta_stderrs = np.asarray(theta_stderrs, dtype=float)
    i = int(np.argmax(theta_values))
    integral, integral_se = time_integral(times, gaps, gap_stderrs)
    gap_term = constants.lam / 8.0 * integral
    if theta_values[i] >= gap_term:
        lhs, lhs_se = float(theta_values[i]), float(theta_stderrs[i])
    else:
        lhs, lhs_se = gap_term, constants.lam / 8.0 * integral_se
    e_total, terms = error_functional_E(constants)
    growth = math.exp(8.0 * constants.c * constants.Lam ** 2 * constants.T / constants.lam)
    rhs = growth * (float(theta_values[0]) + e_total)
    se = math.hypot(lhs_se, growth * float(theta_stderrs[0]))
    return BoundVerdict(lhs, rhs, rhs - lhs, se, lhs + n_sigma * se <= rhs, {"E": e_total, "terms": terms, "prefactor": growth, "gap_integral": integral})


# -- Gaussian entropy functionals ---------------------------------------------------------


def _mean_zero_basis(n: int) -> np.ndarray:
    return linalg.null_space(np.ones((1, n)))


def gaussian_relative_entropy(mean1, cov1, mean2, cov2) -> float:
    """KL divergence of Gaussians living on the mean-zero subspace (shifted by a common mean)."""
    mean1, mean2 = np.asarray(mean1, dtype=float), np.asarray(mean2, dtype=float)
    n = mean1.size
    q = _mean_zero_basis(n)
    s1 = q.T @ np.asarray(cov1, dtype=float) @ q
    s2 = q.T @ np.asarray(cov2, dtype=float) @ q
    delta = q.T @ (mean1 - mean2)
    try:
        c1 = linalg.cholesky(0.5 * (s1 + s1.T), lower=True)
        c2 = linalg.cholesky(0.5 * (s2 + s2.T), lower=True)
    except linalg.LinAlgError as exc:
        raise ValueError("covariance not positive definite on the mean-zero subspace") from exc
    a = linalg.solve_triangular(c2, c1, lower=True)
    b = linalg.solve_triangular(c2, delta, lower=True)
    logdet = 2.0 * (np.sum(np.log(np.diag(c2))) - np.sum(np.log(np.diag(c1))))
    return float(0.5 * (np.sum(a * a) - (n - 1) + b @ b + logdet))


def free_energy_gap_gaussian(mean, cov, profile) -> float:
    """``|(1/n) KL(f | mu) - (int phi(zeta) - phi(int zeta))|`` for ``psi = x^2/2``.

    ``mu`` is the Gaussian on the hyperplane of mean ``mean(mean)`` with
    identity covariance; with ``phi(m) = m^2/2`` the macroscopic side is half
    the variance of the profile (step function or cell-centred nodes).
    """
    mean = np.asarray(mean, dtype=float)
    n = mean.size
    ref = np.full(n, mean.mean())
    kl = gaussian_relative_entropy(mean, cov, ref, np.eye(n))
    zeta = np.asarray(profile, dtype=float)
    macro = 0.5 * float(np.mean((zeta - zeta.mean()) ** 2))
    return abs(kl / n - macro)
