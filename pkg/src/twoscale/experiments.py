"""End-to-end experiment pipelines shared by the CLI and the acceptance suite."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import coarse_grain as cg
from . import fp_oracle as fp
from . import macro_pde as mp
from . import metrics as mt
from . import micro_sim as ms
from . import operators as ops
from . import thermo as th


def cosine_profile(amplitude: float = 0.5, mean: float = 0.0):
    return lambda theta: mean + amplitude * np.cos(2.0 * np.pi * theta)


# -- hydrodynamic runs -------------------------------------------------------------------


@dataclass(frozen=True)
class HydroConfig:
    n: int
    m: int
    r: int = 200
    t_end: float = 0.1
    n_checkpoints: int = 6
    dt: float = 1e-5
    theta: float = 0.5
    a: float = 0.0
    b: float = 1.0
    amplitude: float = 0.5
    mean: float = 0.0
    m_pde: int = 512
    seed: int = 0
    rho: float = 1.0
    C1: float = 1.0
    c: float = 1.0
    sweeps: int = 100
    threads: int = 1
    table_cache: str | None = None

    @property
    def potential(self) -> th.Potential:
        return th.Potential(self.a, self.b)

    @property
    def checkpoints(self) -> tuple:
        return tuple(np.linspace(0.0, self.t_end, self.n_checkpoints))


@dataclass
class HydroResult:
    config: HydroConfig
    times: np.ndarray
    hydro: np.ndarray  # (checkpoints, 2): value, stderr
    theta: np.ndarray
    macro: np.ndarray
    alpha_hat: np.ndarray
    constants: mt.TheoremConstants
    verdict: mt.BoundVerdict
    table_hash: str
    wall_time: float
    sampler: ms.SamplerDiagnostics
    energy_bound_ok: bool
    extra: dict = field(default_factory=dict)

    @property
    def sup_gap(self) -> tuple[float, float]:
        i = int(np.argmax(self.hydro[:, 0]))
        return float(self.hydro[i, 0]), float(self.hydro[i, 1])

    @property
    def sup_theta(self) -> tuple[float, float]:
        i = int(np.argmax(self.theta[:, 0]))
        return float(self.theta[i, 0]), float(self.theta[i, 1])

    def rows(self) -> list[dict]:
        cfg = self.config
        return [
            {
                "N": cfg.n, "M": cfg.m, "K": cfg.n // cfg.m, "a": cfg.a, "b": cfg.b, "seed": cfg.seed, "time": float(t),
                "hydro_gap": h[0], "hydro_gap_se": h[1], "theta": q[0], "theta_se": q[1],
                "macro_gap": g[0], "macro_gap_se": g[1], "alpha_hat": float(al),
            }
            for t, h, q, g, al in zip(self.times, self.hydro, self.theta, self.macro, self.alpha_hat)
        ]


def pde_flux(potential: th.Potential, m_max: float = 3.0):
    return mp.LinearFlux() if potential.is_gaussian else th.build_cramer_table(potential, m_max)


def run_hydro(cfg: HydroConfig) -> HydroResult:
    """Microscopic ensemble vs macroscopic ODE vs limiting PDE for one ``(N, M)``."""
    start = time.perf_counter()
    scheme = cg.BlockScheme(cfg.n, cfg.m)
    pot = cfg.potential
    table = th.load_or_build_psi_k(pot, scheme.k, cfg.table_cache)
    profile = cosine_profile(cfg.amplitude, cfg.mean)
    eta0 = cg.block_averages(profile, cfg.m)

    sim = ms.SimConfig(scheme, cfg.dt, cfg.t_end, cfg.r, cfg.seed, "semi-implicit", cfg.checkpoints, pot, cfg.theta)
    ens = ms.run_ensemble(sim, ms.InitialData("conditional", eta0, cfg.sweeps), table, cfg.threads)
    times = ens.times

    traj = mp.integrate_macro(eta0, cfg.t_end, table, scheme, t_eval=times)
    zeta0 = cg.block_averages(profile, cfg.m_pde)
    pde = mp.solve_pde(zeta0, cfg.t_end, pde_flux(pot), sign=mp.LATTICE_TRANSPORT, t_eval=times)

    hydro = np.array([mt.hydro_gap(cp.states, z) for cp, z in zip(ens.checkpoints, pde.values)])
    theta = np.array([mt.theta_estimate(cp.states, eta, scheme) for cp, eta in zip(ens.checkpoints, traj.profiles)])
    macro = np.array([mt.macro_gap(cp.states, eta, scheme) for cp, eta in zip(ens.checkpoints, traj.profiles)])
    alpha = np.array([cp.alpha_hat for cp in ens.checkpoints])

    span = float(np.max(np.abs(traj.profiles)))
    lam, big = th.convexity_bounds(table, span)
    consts = mt.TheoremConstants(
        c=cfg.c, lam=lam, Lam=big, tau=ops.spectral_gap(cfg.n), gamma=scheme.fluctuation_constant,
        kappa=abs(pot.a) * pot.b ** 2, rho=cfg.rho, alpha=float(alpha.max()), C1=cfg.C1,
        C2=float(traj.energies[0]), T=cfg.t_end, M=cfg.m, N=cfg.n,
        energy_drop=float(traj.energies[0] - traj.energies[-1]), energy0=float(traj.energies[0]),
        growth=traj.growth_rate,
    )
    verdict = mt.theorem1_bound_check(theta[:, 0], theta[:, 1], times, macro[:, 0], macro[:, 1], consts)
    return HydroResult(
        cfg, times, hydro, theta, macro, alpha, consts, verdict, table.content_hash(),
        time.perf_counter() - start, ens.diagnostics, traj.energy_bound_ok,
    )


def strictly_decreasing(values, stderrs, n_sigma: float = 2.0) -> bool:
    """Each step down exceeds ``n_sigma`` combined standard errors."""
    v, s = np.asarray(values), np.asarray(stderrs)
    return bool(np.all(v[:-1] - v[1:] > n_sigma * np.hypot(s[:-1], s[1:])))


# -- OU cross-validation ----------------------------------------------------------------------


@dataclass
class OuCheck:
    times: np.ndarray
    mean_stat: np.ndarray  # (checkpoints, 3): empirical, exact, MC sigma
    var_stat: np.ndarray
    theta_stat: np.ndarray
    max_site_mean_z: np.ndarray

    def ok(self, n_sigma: float) -> bool:
        dev = lambda s: np.abs(s[:, 0] - s[:, 1]) <= n_sigma * s[:, 2] + 1e-14
        return bool(np.all(dev(self.mean_stat)) and np.all(dev(self.var_stat)))


def ou_ensemble_check(n: int = 64, m: int = 8, r: int = 400, t_end: float = 0.025, n_checkpoints: int = 5,
                      dt: float = 1e-6, stationary: bool = False, seed: int = 0, theta: float = 1.0) -> OuCheck:
    """Compare a Gaussian ensemble with the exact OU moments at several checkpoints.

    Summaries: the ensemble mean projected on the direction of the exact
    mean, and the site-averaged variance.  Their MC standard errors follow
    from the exact Gaussian law.
    """
    scheme = cg.BlockScheme(n, m)
    pot = th.Potential()
    cps = tuple(np.linspace(t_end / n_checkpoints, t_end, n_checkpoints))
    sim = ms.SimConfig(scheme, dt, t_end, r, seed, "semi-implicit", cps, pot, theta)
    if stationary:
        eta0 = np.zeros(m)
        init = ms.InitialData("local_gibbs", eta0)
        m0, cov0 = np.zeros(n), fp.stationary_cov(n)
    else:
        eta0 = cg.block_averages(cosine_profile(1.0), m)
        init = ms.InitialData("lift", eta0)
        m0, cov0 = scheme.lift(eta0), np.zeros((n, n))
    table = th.build_psi_k(pot, scheme.k)
    ens = ms.run_ensemble(sim, init, table)
    mean_stat, var_stat, theta_stat, zmax = [], [], [], []
    for cp in ens.checkpoints:
        ou = fp.ou_propagate(m0, cov0, cp.time)
        emp_mean = cp.mean
        norm = np.linalg.norm(ou.mean)
        u = ou.mean if norm > 1e-12 else np.eye(n)[0] - 1.0 / n  # any mean-zero direction when m = 0
        u = u / np.linalg.norm(u)
        mean_stat.append((emp_mean @ u, ou.mean @ u, np.sqrt(u @ ou.cov @ u / r)))
        v_emp = float(np.mean(np.var(cp.states, axis=0, ddof=1)))
        var_stat.append((v_emp, float(np.trace(ou.cov)) / n, np.sqrt(2.0 * np.sum(ou.cov ** 2) / (n * n * (r - 1)))))
        th_emp = mt.theta_estimate(cp.states, eta0, scheme)
        theta_stat.append((th_emp[0], fp.ou_theta_exact(ou, eta0, scheme), th_emp[1]))
        sd = np.sqrt(np.maximum(np.diag(ou.cov), 1e-300) / r)
        zmax.append(float(np.max(np.abs(emp_mean - ou.mean) / sd)))
    return OuCheck(ens.times, np.array(mean_stat), np.array(var_stat), np.array(theta_stat), np.array(zmax))


# -- Gaussian entropy proxy ---------------------------------------------------------------------


def gaussian_entropy_integral(n: int, m: int, t_end: float = 0.1, n_times: int = 21, amplitude: float = 0.5):
    """``int_0^T (1/N) KL(f_t | G_t) dt`` for local Gibbs initial data in the Gaussian model.

    ``f_t`` is propagated exactly (OU moments); ``G_t`` is the local Gibbs
    state of the macroscopic ODE solution, here ``N(N P^t eta(t), I)`` on the
    mean hyperplane.
    """
    scheme = cg.BlockScheme(n, m)
    eta0 = cg.block_averages(cosine_profile(amplitude), m)
    m0 = scheme.lift(eta0)
    cov0 = fp.stationary_cov(n)
    times = np.linspace(0.0, t_end, n_times)
    values = []
    for t in times:
        ou = fp.ou_propagate(m0, cov0, t)
        eta_t = mp.gaussian_macro_propagator(scheme, t) @ (eta0 - eta0.mean()) + eta0.mean()
        values.append(mt.gaussian_relative_entropy(ou.mean, ou.cov, scheme.lift(eta_t), cov0) / n)
    integral, _ = mt.time_integral(times, values)
    return integral, times, np.array(values)


# -- N = 3 oracle suite ---------------------------------------------------------------------------


def fp_suite(h: float = 1 / 64, n_steps: int = 200, radius: float = 6.0, potential: th.Potential | None = None) -> dict:
    """Stationarity, mass and entropy-identity checks for the N = 3 Fokker-Planck oracle."""
    pot = potential or th.Potential()
    out = {}
    for s in (0.0, 0.5, 1.0):
        g = fp.Grid2D(h, radius, pot, s)
        dt = 0.8 * g.dt_max
        for _ in range(10):
            fp.fp_step(g, dt)
        out[f"stationarity_residual_s{s}"] = float(np.max(np.abs(g.f - 1.0)))
    g = fp.Grid2D(h, radius, pot, 1.0)
    g.set_density(lambda x, y: np.exp(-((x - 1.0) ** 2 + (y - 0.5) ** 2) / (2 * 0.64)))
    series = fp.fp_entropy_series(g, 0.8 * g.dt_max, n_steps)
    out["identity_residual"] = float(series.identity_residual.max())
    out["entropy_monotone"] = series.monotone
    out["mass_drift"] = float(np.ptp(series.masses))
    out["entropy_start"] = float(series.entropy[0])
    out["entropy_end"] = float(series.entropy[-1])
    return out
