"""Two-scale hydrodynamic-limit experiments for weakly asymmetric Kawasaki dynamics.

Modules
-------
operators     circulant lattice operators ``A``, ``J``, ``D`` and their inverses
coarse_grain  block averaging and the macroscopic operators
thermo        single-site potential, Cramer transform, block free energy ``psi_K``
micro_sim     ensemble SDE integration and samplers
macro_pde     macroscopic ODE and limiting PDE solvers
metrics       H^-1 norm, estimators, the error functional ``E(T, M, N)``
fp_oracle     N = 3 Fokker-Planck solver and exact Gaussian moments
experiments   end-to-end pipelines used by the CLI and the acceptance suite
cli           ``twoscale`` command-line entry point
"""

__version__ = "0.1.0"
