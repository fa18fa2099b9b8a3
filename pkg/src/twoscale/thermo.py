"""Single-site potential, Cramer transform and block free energies.

The single-site potential is ``psi(x) = x^2/2 + a cos(b x)`` with
``|a| b^2 < 1`` so that ``psi'' > 0`` everywhere; ``a = 0`` is the Gaussian
case in which every object below has a closed form.

``psi_K`` is tabulated only up to an additive constant: the tables are used
through ``psi_K'`` and ``psi_K''`` and through energy differences.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import integrate
from scipy.interpolate import CubicHermiteSpline
from scipy.signal import fftconvolve

from . import coarse_grain
from .errors import NumericalAbort, TableRangeError

TABLE_FORMAT_VERSION = 1
_TILT_HALF_WIDTH = 14.0  # Gaussian tail beyond this is < 1e-40 of the mass
_TILT_STEP = 0.05


@dataclass(frozen=True)
class Potential:
    """``psi(x) = x^2/2 + a cos(b x)``."""

    a: float = 0.0
    b: float = 1.0

    def __post_init__(self):
        if abs(self.a) * self.b ** 2 >= 1.0:
            raise ValueError(f"need |a| b^2 < 1 for a convex potential, got a={self.a}, b={self.b}")

    @property
    def is_gaussian(self) -> bool:
        return self.a == 0.0

    def delta(self, x):
        return self.a * np.cos(self.b * x)

    def d_delta(self, x):
        return -self.a * self.b * np.sin(self.b * x)

    def psi(self, x):
        x = np.asarray(x, dtype=float)
        return 0.5 * x * x + self.delta(x)

    def dpsi(self, x):
        x = np.asarray(x, dtype=float)
        return x + self.d_delta(x)

    def d2psi(self, x):
        x = np.asarray(x, dtype=float)
        return 1.0 - self.a * self.b ** 2 * np.cos(self.b * x)

    @property
    def perturbation_norms(self) -> tuple[float, float, float]:
        """Sup norms of the perturbation and its first two derivatives."""
        a, b = abs(self.a), abs(self.b)
        return a, a * b, a * b * b

    @property
    def max_curvature(self) -> float:
        return 1.0 + abs(self.a) * self.b ** 2

    def as_dict(self) -> dict:
        return {"a": float(self.a), "b": float(self.b)}


# -- log-partition and tilted moments ------------------------------------------


def log_partition(sigma: float, potential: Potential) -> float:
    """``log int exp(sigma x - psi(x)) dx`` by adaptive quadrature.

    Written as ``sigma^2/2 + log int exp(-(x - sigma)^2/2 - delta(x)) dx`` and
    integrated over ``|x - sigma| <= 14``.
    """
    sigma = float(sigma)
    integrand = lambda u: np.exp(-0.5 * u * u - potential.delta(sigma + u))
    val, err, info = _quad(integrand, -_TILT_HALF_WIDTH, _TILT_HALF_WIDTH)
    if not np.isfinite(val) or val <= 0 or err > 1e-10 * val:
        raise NumericalAbort(f"log-partition quadrature failed at sigma={sigma}: {info}")
    return 0.5 * sigma * sigma + float(np.log(val))


def _quad(f, lo, hi):
    val, err, info = integrate.quad(f, lo, hi, epsabs=0.0, epsrel=1e-13, limit=400, full_output=1)[:3]
    return val, err, info.get("last", "")


def tilted_stats(sigma, potential: Potential):
    """``(log Z, mean, variance)`` of the tilted law ``exp(sigma x - psi(x)) / Z``.

    Vectorized in ``sigma``; the trapezoid rule on a uniform grid is
    exponentially accurate here because the integrand is entire with Gaussian
    decay.
    """
    sigma = np.asarray(sigma, dtype=float)
    u = np.arange(-_TILT_HALF_WIDTH, _TILT_HALF_WIDTH + 0.5 * _TILT_STEP, _TILT_STEP)
    s = sigma[..., None]
    w = np.exp(-0.5 * u * u - potential.delta(s + u))
    z = w.sum(axis=-1)
    m1 = (w * u).sum(axis=-1) / z
    m2 = (w * u * u).sum(axis=-1) / z
    log_z = 0.5 * sigma * sigma + np.log(z * _TILT_STEP)
    return log_z, sigma + m1, m2 - m1 * m1


def tilted_mean(sigma, potential: Potential):
    return tilted_stats(sigma, potential)[1]


def solve_tilt(m, potential: Potential, tol: float = 1e-13, max_iter: int = 100):
    """Find ``sigma`` with ``tilted_mean(sigma) = m`` (safeguarded Newton)."""
    m = np.asarray(m, dtype=float)
    slack = abs(potential.a * potential.b) + 1e-3
    lo, hi = m - slack, m + slack
    sigma = m.copy()
    for _ in range(max_iter):
        _, mean, var = tilted_stats(sigma, potential)
        resid = mean - m
        if np.all(np.abs(resid) <= tol * np.maximum(1.0, np.abs(m))):
            return sigma
        lo = np.where(resid < 0, sigma, lo)
        hi = np.where(resid > 0, sigma, hi)
        step = sigma - resid / var
        bad = ~((step > lo) & (step < hi)) | ~np.isfinite(step)
        sigma = np.where(bad, 0.5 * (lo + hi), step)
    raise NumericalAbort(f"tilt equation did not converge (max residual {np.max(np.abs(resid)):.2e})")


def cramer(m, potential: Potential):
    """Cramer transform ``(phi, phi', phi'')`` at ``m``.

    ``phi(m) = sup_s {s m - log Z(s)}`` is attained at the tilt ``s*`` whose
    mean is ``m``; then ``phi' = s*`` and ``phi'' = 1 / Var_{s*}``.
    """
    sigma = solve_tilt(m, potential)
    log_z, _, var = tilted_stats(sigma, potential)
    m = np.asarray(m, dtype=float)
    return sigma * m - log_z, sigma, 1.0 / var


# -- tables ----------------------------------------------------------------------


def _grid(m_max: float, h: float, ghost: int = 0) -> np.ndarray:
    count = int(round(m_max / h))
    return np.arange(-count - ghost, count + ghost + 1) * h


class _Table:
    """Shared interpolation and range checking for tabulated convex functions."""

    m: np.ndarray
    f: np.ndarray
    df: np.ndarray
    d2f: np.ndarray

    @property
    def m_max(self) -> float:
        return float(self.m[-1])

    def _check(self, z):
        z = np.asarray(z, dtype=float)
        bad = np.abs(z) > self.m_max * (1 + 1e-12)
        if np.any(bad) or not np.all(np.isfinite(z)):
            worst = float(np.max(np.abs(z))) if np.all(np.isfinite(z)) else float("nan")
            raise TableRangeError(f"value {worst:.4g} outside table interval [-{self.m_max}, {self.m_max}]")
        return z

    @cached_property
    def _f_spline(self):
        return CubicHermiteSpline(self.m, self.f, self.df)

    @cached_property
    def _df_spline(self):
        return CubicHermiteSpline(self.m, self.df, self.d2f)

    def value(self, z):
        return self._f_spline(self._check(z))

    def first(self, z):
        return self._df_spline(self._check(z))

    def second(self, z):
        return self._df_spline(self._check(z), 1)

    def content_hash(self) -> str:
        """Git-style blob hash of the tabulated arrays."""
        payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in (self.m, self.f, self.df, self.d2f))
        header = f"blob {len(payload)}\0".encode()
        return hashlib.sha1(header + payload).hexdigest()


@dataclass(eq=False)
class CramerTable(_Table):
    potential: Potential
    m: np.ndarray
    f: np.ndarray
    df: np.ndarray
    d2f: np.ndarray

    def phi(self, z):
        return self.value(z)

    def dphi(self, z):
        return self.first(z)

    def d2phi(self, z):
        return self.second(z)


def build_cramer_table(potential: Potential, m_max: float = 3.0, h: float = 1 / 64) -> CramerTable:
    m = _grid(m_max, h)
    phi, dphi, d2phi = cramer(m, potential)
    table = CramerTable(potential, m, phi, dphi, d2phi)
    if not (np.all(d2phi > 0) and np.all(np.diff(dphi) > 0)):
        raise NumericalAbort("Cramer transform not uniformly convex on the grid")
    return table


@dataclass(eq=False)
class PsiKTable(_Table):
    potential: Potential
    k: int
    m: np.ndarray
    f: np.ndarray
    df: np.ndarray
    d2f: np.ndarray
    mass_defect: float = 0.0
    grid_step: float = 1 / 64
    meta: dict = field(default_factory=dict)

    def psi(self, z):
        return self.value(z)

    def dpsi(self, z):
        return self.first(z)

    def d2psi(self, z):
        return self.second(z)

    def key(self) -> str:
        return table_key(self.potential, self.k, self.m_max, float(self.m[1] - self.m[0]), self.grid_step)

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format_version": TABLE_FORMAT_VERSION,
            "kind": "psi_k",
            "potential": self.potential.as_dict(),
            "k": self.k,
            "grid_step": self.grid_step,
            "mass_defect": self.mass_defect,
            "content_hash": self.content_hash(),
            "m": self.m.tolist(),
            "psi": self.f.tolist(),
            "dpsi": self.df.tolist(),
            "d2psi": self.d2f.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PsiKTable":
        if data.get("format_version") != TABLE_FORMAT_VERSION or data.get("kind") != "psi_k":
            raise ValueError("unsupported table file")
        table = cls(
            Potential(**data["potential"]),
            int(data["k"]),
            np.array(data["m"]),
            np.array(data["psi"]),
            np.array(data["dpsi"]),
            np.array(data["d2psi"]),
            mass_defect=float(data["mass_defect"]),
            grid_step=float(data["grid_step"]),
        )
        if table.content_hash() != data["content_hash"]:
            raise ValueError("table content hash mismatch")
        return table

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "PsiKTable":
        return cls.from_dict(json.loads(Path(path).read_text()))


def table_key(potential: Potential, k: int, m_max: float, h_m: float, h_u: float) -> str:
    return f"psik_a{potential.a:g}_b{potential.b:g}_k{k}_m{m_max:g}_hm{h_m:g}_hu{h_u:g}"


def _conv(f, g, h, half):
    """Convolution of centred densities sampled on ``j h``; trimmed to ``|j| <= half``."""
    full = fftconvolve(f, g, axes=-1) * h
    centre = full.shape[-1] // 2
    lo, hi = max(centre - half, 0), min(centre + half + 1, full.shape[-1])
    kept = full[..., lo:hi]
    total = full.sum(axis=-1) * h
    loss = np.abs(total - kept.sum(axis=-1) * h) / total
    return kept, total, float(np.max(loss))


def _sum_density_at_mean(q, h, k, half):
    """Density at 0 of the sum of ``k`` iid centred variables with density ``q``.

    Binary exponentiation of the convolution; each product is renormalized to
    unit mass and the mass defect of every doubling step is tracked.
    """
    result, base, e = None, q, k
    worst = 0.0
    while e:
        if e & 1:
            if result is None:
                result = base
            else:
                result, total, loss = _conv(result, base, h, half)
                worst = max(worst, loss, float(np.max(np.abs(total - 1.0))))
                result = result / (result.sum(axis=-1, keepdims=True) * h)
        e >>= 1
        if e:
            base, total, loss = _conv(base, base, h, half)
            worst = max(worst, loss, float(np.max(np.abs(total - 1.0))))
            base = base / (base.sum(axis=-1, keepdims=True) * h)
    centre = result.shape[-1] // 2
    return result[..., centre], worst


def build_psi_k(
    potential: Potential,
    k: int,
    m_max: float = 3.0,
    h_m: float = 1 / 32,
    h_u: float = 1 / 64,
    mass_tol: float = 1e-10,
    chunk: int = 32,
) -> PsiKTable:
    """Tabulate ``psi_K`` and its first two derivatives on ``[-m_max, m_max]``.

    With ``s = phi'(m)`` the density of the block mean at ``m`` factorizes as
    ``exp(-k phi(m))`` times the density at 0 of a centred sum of ``k`` draws
    from the ``s``-tilted single-site law, so
    ``psi_K(m) = phi(m) - log(g_k(m)) / k`` up to a constant.  ``g_k`` comes
    from grid convolution; its derivatives from fourth-order differences.
    """
    k = int(k)
    if k < 1:
        raise ValueError("block size must be >= 1")
    if k == 1:
        m = _grid(m_max, h_m)
        return PsiKTable(potential, 1, m, potential.psi(m), potential.dpsi(m), potential.d2psi(m), 0.0, h_u)

    ghost = 2
    m_ext = _grid(m_max, h_m, ghost)
    phi, sigma, d2phi = cramer(m_ext, potential)
    var = 1.0 / d2phi
    log_z = sigma * m_ext - phi

    q_half = int(np.ceil(_TILT_HALF_WIDTH * np.sqrt(var.max()) / h_u))
    half = int(np.ceil(_TILT_HALF_WIDTH * np.sqrt(k * var.max()) / h_u))
    u = np.arange(-q_half, q_half + 1) * h_u

    while True:
        log_g = np.empty_like(m_ext)
        worst = 0.0
        for start in range(0, m_ext.size, chunk):
            sl = slice(start, start + chunk)
            x = m_ext[sl, None] + u
            q = np.exp(sigma[sl, None] * x - potential.psi(x) - log_z[sl, None])
            q /= q.sum(axis=-1, keepdims=True) * h_u
            dens, loss = _sum_density_at_mean(q, h_u, k, half)
            log_g[sl] = np.log(dens)
            worst = max(worst, loss)
        if worst <= mass_tol:
            break
        if half > 2 ** 22:
            raise NumericalAbort(f"convolution grid cannot hold the mass (defect {worst:.2e})")
        half *= 2

    corr = log_g / k
    h = h_m
    c = slice(ghost, -ghost)
    d1 = (-corr[4:] + 8 * corr[3:-1] - 8 * corr[1:-3] + corr[:-4]) / (12 * h)
    d2 = (-corr[4:] + 16 * corr[3:-1] - 30 * corr[2:-2] + 16 * corr[1:-3] - corr[:-4]) / (12 * h * h)
    psi = phi[c] - corr[c]
    dpsi = sigma[c] - d1
    d2psi = d2phi[c] - d2
    table = PsiKTable(potential, k, m_ext[c], psi, dpsi, d2psi, worst, h_u)
    return table


def load_or_build_psi_k(potential: Potential, k: int, cache_dir=None, **kwargs) -> PsiKTable:
    if cache_dir is None:
        return build_psi_k(potential, k, **kwargs)
    m_max = kwargs.get("m_max", 3.0)
    h_m = kwargs.get("h_m", 1 / 32)
    h_u = kwargs.get("h_u", 1 / 64)
    path = Path(cache_dir) / (table_key(potential, k, m_max, h_m, h_u) + ".json")
    if path.exists():
        try:
            return PsiKTable.load(path)
        except (ValueError, KeyError):
            pass
    table = build_psi_k(potential, k, **kwargs)
    path.parent.mkdir(parents=True, exist_ok=True)
    table.save(path)
    return table


# -- macroscopic Hamiltonian -------------------------------------------------------


def macro_grad_H(y, table: PsiKTable):
    """Y-gradient of ``(1/M) sum psi_K(y_i)`` projected onto mean-zero vectors."""
    g = table.dpsi(y)
    return g - g.mean(axis=-1, keepdims=True)


def macro_energy(y, table: PsiKTable):
    """``(1/M) sum psi_K(y_i) - psi_K(mean y)``: the coarse-grained energy above the flat profile.

    By convexity this is nonnegative and vanishes exactly at constant profiles.
    """
    y = np.asarray(y, dtype=float)
    return table.psi(y).mean(axis=-1) - table.psi(y.mean(axis=-1))


def local_gibbs_log_weight(x, eta, table: PsiKTable, scheme: coarse_grain.BlockScheme):
    """Unnormalized log-density ``N P^t grad H(eta) . x`` of the local Gibbs state w.r.t. ``mu``."""
    w = scheme.lift(macro_grad_H(eta, table))
    return np.sum(w * np.asarray(x, dtype=float), axis=-1)


def convexity_bounds(table: _Table, interval: float | None = None) -> tuple[float, float]:
    """``(min, max)`` of the tabulated second derivative, optionally on ``|m| <= interval``."""
    sel = slice(None) if interval is None else np.abs(table.m) <= interval + 1e-12
    d2 = table.d2f[sel]
    return float(d2.min()), float(d2.max())
