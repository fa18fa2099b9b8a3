"""Ensemble integration of the lattice SDE ``dX = -(A + J) grad H(X) dt + sqrt(2A) dW``.

Every trajectory owns a counter-based random stream keyed by
``(seed, stream, trajectory index)``, so results do not depend on the
ensemble size, on chunking or on thread count.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import operators as ops
from .coarse_grain import BlockScheme
from .errors import NumericalAbort
from .thermo import Potential, PsiKTable, macro_grad_H

log = logging.getLogger(__name__)

INTEGRATORS = ("explicit", "semi-implicit")
STREAM_INITIAL = 0
STREAM_DYNAMICS = 1
EPS_DRIFT = 1e-8


def trajectory_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(stream), int(index)))
    return np.random.Generator(np.random.Philox(ss))


def explicit_dt_bound(n: int, potential: Potential) -> float:
    """Largest stable explicit Euler step ``1 / (2 * 4 n^2 * max psi'')``."""
    return 1.0 / (8.0 * n * n * potential.max_curvature)


@dataclass(frozen=True)
class SimConfig:
    """Run parameters.

    ``theta`` selects the implicit weight of the semi-implicit scheme: 1 is
    backward Euler on the linear part, 1/2 is the trapezoidal rule, which
    leaves the Gaussian invariant measure exactly invariant for any step.
    """

    scheme: BlockScheme
    dt: float
    t_end: float
    r: int
    seed: int = 0
    integrator: str = "semi-implicit"
    checkpoints: tuple = ()
    potential: Potential = field(default_factory=Potential)
    theta: float = 1.0
    noise_block: int = 32

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.t_end < 0 or self.r < 1:
            raise ValueError("need t_end >= 0 and r >= 1")
        if self.integrator not in INTEGRATORS:
            raise ValueError(f"integrator must be one of {INTEGRATORS}")
        if not 0.5 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [1/2, 1]")
        if self.integrator == "explicit":
            bound = explicit_dt_bound(self.scheme.n, self.potential)
            if self.dt > bound:
                raise ValueError(f"explicit step dt={self.dt:.3e} exceeds the stability bound {bound:.3e}")
        cps = tuple(float(t) for t in self.checkpoints)
        if list(cps) != sorted(cps) or any(t < 0 or t > self.t_end * (1 + 1e-12) for t in cps):
            raise ValueError("checkpoints must be sorted and lie in [0, t_end]")
        object.__setattr__(self, "checkpoints", cps)

    @property
    def n_steps(self) -> int:
        return int(np.ceil(self.t_end / self.dt - 1e-9))

    @property
    def step(self) -> float:
        """Time step actually used: ``t_end`` is hit exactly."""
        return self.t_end / self.n_steps if self.n_steps else self.dt

    def checkpoint_steps(self) -> list[int]:
        return [int(round(t / self.step)) if self.n_steps else 0 for t in self.checkpoints]


# -- dynamics ------------------------------------------------------------------


def drift(x, potential: Potential):
    """``-(A + J) grad H(x)`` with ``grad H(x)_i = psi'(x_i)``."""
    g = potential.dpsi(x)
    return -(ops.apply_A(g) + ops.apply_J(g))


def noise_increment(b, dt: float):
    """Map standard normals ``b`` to the conservative increment ``sqrt(2) n (b_{i+1} - b_i) sqrt(dt)``."""
    n = b.shape[-1]
    return np.sqrt(2.0 * dt) * n * (np.roll(b, -1, axis=-1) - b)


def noise_step(dt: float, rng: np.random.Generator, n: int, size=None):
    """One noise increment (or a batch of shape ``size + (n,)``) with covariance ``2 A dt``."""
    if dt < 0:
        raise ValueError("dt must be nonnegative")
    shape = (n,) if size is None else tuple(np.atleast_1d(size)) + (n,)
    return noise_increment(rng.standard_normal(shape), dt)


def step(x, dt: float, potential: Potential, noise=None, integrator: str = "semi-implicit", theta: float = 1.0):
    """Advance states ``x`` (last axis = sites) by one step.

    ``noise`` is the conservative increment for this step (``None`` for the
    noiseless drift).  The semi-implicit scheme treats ``-(A + J) x``
    implicitly with weight ``theta`` in Fourier space and the bounded
    remainder ``-(A + J)(psi'(x) - x)`` explicitly.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    if integrator == "explicit":
        out = x + dt * drift(x, potential)
        if noise is not None:
            out = out + noise
    elif integrator == "semi-implicit":
        lam = ops.aj_eigenvalues(n)
        rhs = np.fft.rfft(x, axis=-1) * (1.0 - (1.0 - theta) * dt * lam)
        if not potential.is_gaussian:
            rhs -= dt * lam * np.fft.rfft(potential.d_delta(x), axis=-1)
        if noise is not None:
            rhs += np.fft.rfft(noise, axis=-1)
        out = np.fft.irfft(rhs / (1.0 + theta * dt * lam), n=n, axis=-1)
    else:
        raise ValueError(f"unknown integrator {integrator!r}")
    if not np.all(np.isfinite(out)):
        raise NumericalAbort(f"non-finite state after step (dt={dt:.3e}, |x|max={np.nanmax(np.abs(x)):.3e})")
    return out


class NoiseSource:
    """Buffered per-trajectory normals; draws blocks of ``block`` steps per stream."""

    def __init__(self, seed: int, indices, n: int, block: int = 32, stream: int = STREAM_DYNAMICS):
        self.gens = [trajectory_rng(seed, stream, i) for i in indices]
        self.n = n
        self.block = int(block)
        self._buf = None
        self._pos = self.block

    def next(self) -> np.ndarray:
        if self._pos == self.block:
            self._buf = np.stack([g.standard_normal((self.block, self.n)) for g in self.gens], axis=1)
            self._pos = 0
        out = self._buf[self._pos]
        self._pos += 1
        return out


# -- samplers --------------------------------------------------------------------


@dataclass(frozen=True)
class SamplerDiagnostics:
    acceptance: float
    step_size: float
    exact: bool = False

    @property
    def ok(self) -> bool:
        return self.exact or 0.1 <= self.acceptance <= 0.9


EXACT = SamplerDiagnostics(1.0, 0.0, exact=True)


def _exchange_mcmc(x, groups: int, rng, energy, sweeps: int, step0: float = 1.5):
    """Metropolis pair exchanges ``(x_i, x_j) -> (x_i + d, x_j - d)`` inside consecutive groups.

    ``x`` has length ``groups * size``; sums within every group are preserved
    exactly up to rounding.  ``energy(values, sites)`` is the per-site energy.
    The step size is tuned during the first half of the sweeps; acceptance is
    measured over the second half.
    """
    x = x.reshape(groups, -1).copy()
    size = x.shape[1]
    if size < 2 or sweeps <= 0:
        return x.ravel(), EXACT
    sites = np.arange(x.size).reshape(groups, size)
    half = size // 2
    s = step0
    accepted = proposed = 0
    tune_until = sweeps // 2
    for sweep in range(sweeps):
        perm = np.argsort(rng.random((groups, size)), axis=1)
        i, j = perm[:, :half], perm[:, half : 2 * half]
        xi, xj = np.take_along_axis(x, i, 1), np.take_along_axis(x, j, 1)
        si, sj = np.take_along_axis(sites, i, 1), np.take_along_axis(sites, j, 1)
        d = s * (2.0 * rng.random(xi.shape) - 1.0)
        de = energy(xi + d, si) + energy(xj - d, sj) - energy(xi, si) - energy(xj, sj)
        acc = np.log(rng.random(xi.shape)) < -de
        np.put_along_axis(x, i, np.where(acc, xi + d, xi), 1)
        np.put_along_axis(x, j, np.where(acc, xj - d, xj), 1)
        rate = acc.mean()
        if sweep < tune_until:
            s *= np.exp(rate - 0.5)
        else:
            accepted += acc.sum()
            proposed += acc.size
    return x.ravel(), SamplerDiagnostics(accepted / max(proposed, 1), s)


def sample_conditional_mu(y, scheme: BlockScheme, potential: Potential, rng, sweeps: int = 100):
    """Draw ``x ~ mu(dx | P x = y)`` for the product measure ``exp(-sum psi)``.

    Gaussian case: exact, ``x = N P^t y + (z - N P^t P z)`` with ``z`` standard
    normal.  Otherwise that draw seeds a per-block exchange Metropolis chain.
    """
    y = np.asarray(y, dtype=float)
    lifted = scheme.lift(y)
    if scheme.k == 1:
        return lifted, EXACT
    x = lifted + scheme.fluctuation(rng.standard_normal(scheme.n))
    if potential.is_gaussian:
        return x, EXACT
    x, diag = _exchange_mcmc(x, scheme.m, rng, lambda v, _: potential.psi(v), sweeps)
    x = x - scheme.lift(scheme.project(x) - y)  # remove rounding drift of block means
    return x, diag


def sample_local_gibbs(eta, table: PsiKTable, scheme: BlockScheme, potential: Potential, rng, sweeps: int = 100):
    """Draw from the local Gibbs state ``exp(N P^t grad H(eta) . x) mu(dx)`` at fixed mean ``mean(eta)``."""
    eta = np.asarray(eta, dtype=float)
    w = scheme.lift(macro_grad_H(eta, table))
    z = w + rng.standard_normal(scheme.n)
    x = z - z.mean() + eta.mean()
    if potential.is_gaussian:
        return x, EXACT
    return _exchange_mcmc(x, 1, rng, lambda v, s: potential.psi(v) - w[s] * v, sweeps)


# -- ensembles ---------------------------------------------------------------------


@dataclass(frozen=True)
class InitialData:
    """``kind``: ``lift`` (deterministic N P^t eta0), ``local_gibbs`` or ``conditional``."""

    kind: str
    eta0: np.ndarray
    sweeps: int = 100

    def __post_init__(self):
        if self.kind not in ("lift", "local_gibbs", "conditional"):
            raise ValueError(f"unknown initial data kind {self.kind!r}")
        object.__setattr__(self, "eta0", np.asarray(self.eta0, dtype=float))


def initial_states(config: SimConfig, initial: InitialData, table: PsiKTable | None = None, indices=None):
    """Initial states for the trajectories ``indices`` plus the worst sampler diagnostics."""
    scheme = config.scheme
    indices = range(config.r) if indices is None else indices
    states, worst = [], EXACT
    for i in indices:
        rng = trajectory_rng(config.seed, STREAM_INITIAL, i)
        if initial.kind == "lift":
            x, d = scheme.lift(initial.eta0), EXACT
        elif initial.kind == "conditional":
            x, d = sample_conditional_mu(initial.eta0, scheme, config.potential, rng, initial.sweeps)
        else:
            if table is None:
                raise ValueError("local Gibbs initial data needs a psi_K table")
            x, d = sample_local_gibbs(initial.eta0, table, scheme, config.potential, rng, initial.sweeps)
        states.append(x)
        if worst.exact or (not d.exact and abs(d.acceptance - 0.5) > abs(worst.acceptance - 0.5)):
            worst = d
    if not worst.ok:
        log.warning("exchange sampler acceptance %.3f outside [0.1, 0.9]", worst.acceptance)
    return np.array(states), worst


@dataclass
class Checkpoint:
    time: float
    states: np.ndarray

    @property
    def mean(self) -> np.ndarray:
        return self.states.mean(axis=0)

    @property
    def cov(self) -> np.ndarray:
        return np.cov(self.states, rowvar=False)

    @property
    def alpha_hat(self) -> float:
        """``(1/n) E|x|^2``, the per-site second moment."""
        return float(np.mean(np.sum(self.states ** 2, axis=1)) / self.states.shape[1])


@dataclass
class EnsembleResult:
    config: SimConfig
    checkpoints: list
    diagnostics: SamplerDiagnostics
    max_mean_drift: float

    @property
    def times(self) -> np.ndarray:
        return np.array([c.time for c in self.checkpoints])


def _integrate_chunk(config: SimConfig, x0: np.ndarray, indices) -> tuple[list, float]:
    x = x0.copy()
    mean0 = x.mean(axis=1)
    noise = NoiseSource(config.seed, indices, config.scheme.n, config.noise_block)
    targets = config.checkpoint_steps()
    dt = config.step
    snaps = []
    ti = 0
    while ti < len(targets) and targets[ti] == 0:
        snaps.append(x.copy())
        ti += 1
    for k in range(1, config.n_steps + 1):
        inc = noise_increment(noise.next(), dt)
        x = step(x, dt, config.potential, inc, config.integrator, config.theta)
        while ti < len(targets) and targets[ti] == k:
            snaps.append(x.copy())
            ti += 1
    drift_max = float(np.max(np.abs(x.mean(axis=1) - mean0))) if x.size else 0.0
    return snaps, drift_max


def run_ensemble(config: SimConfig, initial: InitialData, table: PsiKTable | None = None, threads: int = 1) -> EnsembleResult:
    """Integrate ``config.r`` trajectories and return their states at the checkpoints.

    Trajectories are split into contiguous chunks for ``threads`` workers; the
    per-trajectory streams make the output independent of the split.
    """
    x0, diag = initial_states(config, initial, table)
    chunks = np.array_split(np.arange(config.r), max(1, min(int(threads), config.r)))
    if len(chunks) == 1:
        results = [_integrate_chunk(config, x0, chunks[0])]
    else:
        with ThreadPoolExecutor(len(chunks)) as pool:
            results = list(pool.map(lambda idx: _integrate_chunk(config, x0[idx], idx), chunks))
    drift_max = max(r[1] for r in results)
    if drift_max > EPS_DRIFT:
        raise NumericalAbort(f"mean drift {drift_max:.2e} exceeds {EPS_DRIFT:.0e}")
    steps = config.checkpoint_steps()
    cps = [
        Checkpoint(s * config.step, np.concatenate([r[0][i] for r in results], axis=0))
        for i, s in enumerate(steps)
    ]
    return EnsembleResult(config, cps, diag, drift_max)
