"""Command-line orchestration: ``twoscale {verify,simulate,macro,pde,sweep,oracle}``.

Configuration is an INI file; command-line flags override it.  Every run
writes ``results.csv``, ``manifest.json`` and ``verdicts.json`` to ``--out``.
Exit codes: 0 success, 1 identity failure, 2 config error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import coarse_grain as cg
from . import experiments as ex
from . import macro_pde as mp
from . import metrics as mt
from . import operators as ops
from . import thermo as th
from .errors import ConfigError, NumericalAbort, TableRangeError

log = logging.getLogger("twoscale")

EXIT_OK, EXIT_IDENTITY, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2, 3

DEFAULTS = {
    "model": {"a": "0.0", "b": "1.0", "amplitude": "0.5", "mean": "0.0"},
    "schedule": {"pairs": "128:16, 256:16, 512:32"},
    "sim": {"r": "200", "t_end": "0.1", "dt": "1e-5", "theta": "0.5", "checkpoints": "6", "sweeps": "100"},
    "pde": {"m_pde": "512"},
    "theorem": {"rho": "1.0", "C1": "1.0", "c": "1.0"},
    "run": {"seed": "0", "threads": "1", "deterministic": "true"},
}


# -- configuration --------------------------------------------------------------------------


def _parse_pairs(text: str):
    pairs = []
    for item in text.replace(";", ",").split(","):
        item = item.strip()
        if not item:
            continue
        try:
            n, m = (int(v) for v in item.split(":"))
        except ValueError as exc:
            raise ConfigError(f"[schedule] pairs: cannot parse {item!r} as N:M") from exc
        pairs.append((n, m))
    if not pairs:
        raise ConfigError("[schedule] pairs: empty schedule")
    for n, m in pairs:
        if m < 3 or n % m:
            raise ConfigError(f"[schedule] pairs: M={m} must be >= 3 and divide N={n}")
    for (n1, m1), (n2, m2) in zip(pairs, pairs[1:]):
        if not (n2 > n1 and n2 / m2 >= n1 / m1):
            raise ConfigError(f"[schedule] pairs: need N increasing and N/M non-decreasing ({n1}:{m1} -> {n2}:{m2})")
    return pairs


class Config:
    """Resolved configuration with typed accessors and field-level diagnostics."""

    def __init__(self, parser: configparser.ConfigParser):
        self.parser = parser

    def _get(self, section, key, kind):
        raw = self.parser.get(section, key)
        try:
            if kind is bool:
                return self.parser.getboolean(section, key)
            return kind(raw)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key} = {raw!r}: expected {kind.__name__}") from exc

    def float(self, section, key):
        return self._get(section, key, float)

    def int(self, section, key):
        return self._get(section, key, int)

    def bool(self, section, key):
        return self._get(section, key, bool)

    @property
    def pairs(self):
        return _parse_pairs(self.parser.get("schedule", "pairs"))

    def as_dict(self) -> dict:
        return {s: dict(self.parser.items(s)) for s in self.parser.sections()}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.as_dict(), sort_keys=True).encode()).hexdigest()

    def validate(self):
        a, b = self.float("model", "a"), self.float("model", "b")
        if abs(a) * b * b >= 1:
            raise ConfigError(f"[model] a={a}, b={b}: need |a| b^2 < 1")
        for key in ("r", "checkpoints"):
            if self.int("sim", key) < 1:
                raise ConfigError(f"[sim] {key} must be >= 1")
        for key in ("t_end", "dt"):
            if not self.float("sim", key) > 0:
                raise ConfigError(f"[sim] {key} must be positive")
        if not 0.5 <= self.float("sim", "theta") <= 1.0:
            raise ConfigError("[sim] theta must lie in [0.5, 1]")
        if self.int("pde", "m_pde") < 3:
            raise ConfigError("[pde] m_pde must be >= 3")
        seed = self.int("run", "seed")
        if not 0 <= seed < 2 ** 64:
            raise ConfigError("[run] seed must be an unsigned 64-bit integer")
        self.int("run", "threads")
        self.bool("run", "deterministic")
        self.pairs
        for key in ("rho", "C1", "c"):
            if not self.float("theorem", key) > 0:
                raise ConfigError(f"[theorem] {key} must be positive")


def load_config(path=None, overrides: dict | None = None) -> Config:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    parser.optionxform = str
    parser.read_dict(DEFAULTS)
    if path is not None:
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"config syntax error: {exc}") from exc
        unknown = [f"[{s}] {k}" for s in parser.sections() for k in parser[s] if s not in DEFAULTS or k not in DEFAULTS[s]]
        if unknown:
            raise ConfigError(f"unknown config fields: {', '.join(unknown)}")
    for (section, key), value in (overrides or {}).items():
        if value is not None:
            parser.set(section, key, str(value))
    cfg = Config(parser)
    cfg.validate()
    return cfg


def hydro_config(cfg: Config, n: int, m: int, table_cache=None) -> ex.HydroConfig:
    return ex.HydroConfig(
        n=n, m=m, r=cfg.int("sim", "r"), t_end=cfg.float("sim", "t_end"), n_checkpoints=cfg.int("sim", "checkpoints"),
        dt=cfg.float("sim", "dt"), theta=cfg.float("sim", "theta"), a=cfg.float("model", "a"), b=cfg.float("model", "b"),
        amplitude=cfg.float("model", "amplitude"), mean=cfg.float("model", "mean"), m_pde=cfg.int("pde", "m_pde"),
        seed=cfg.int("run", "seed"), rho=cfg.float("theorem", "rho"), C1=cfg.float("theorem", "C1"),
        c=cfg.float("theorem", "c"), sweeps=cfg.int("sim", "sweeps"), threads=cfg.int("run", "threads"),
        table_cache=table_cache,
    )


# -- output -----------------------------------------------------------------------------------


def _git_revision() -> str | None:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True, cwd=Path(__file__).parent, timeout=5)
        return out.stdout.strip() or None
    except (OSError, subprocess.SubprocessError):
        return None


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


class Output:
    def __init__(self, out_dir, cfg: Config, command: str):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        self.command = command
        self.rows: list[dict] = []
        self.verdicts: dict = {}
        self.tables: dict = {}

    def write(self):
        deterministic = self.cfg.bool("run", "deterministic")
        rows = self.rows
        if deterministic:
            rows = [{k: v for k, v in r.items() if k != "wall_time"} for r in rows]
        columns = []
        for r in rows:
            columns += [k for k in r if k not in columns]
        with open(self.dir / "results.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=["config_hash"] + columns, lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({"config_hash": self.cfg.digest(), **{k: _fmt(v) for k, v in r.items()}})
        manifest = {
            "command": self.command,
            "version": __version__,
            "config": self.cfg.as_dict(),
            "config_hash": self.cfg.digest(),
            "tables": self.tables,
        }
        if not deterministic:
            manifest["git_revision"] = _git_revision()
        (self.dir / "manifest.json").write_text(json.dumps(_jsonable(manifest), indent=2, sort_keys=True) + "\n")
        verdicts = {"config_hash": self.cfg.digest(), "tables": self.tables, **self.verdicts}
        (self.dir / "verdicts.json").write_text(json.dumps(_jsonable(verdicts), indent=2, sort_keys=True) + "\n")


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


# -- commands ------------------------------------------------------------------------------------


def cmd_verify(cfg: Config, out: Output) -> int:
    """Hard identities plus measured constants for every scheme in the schedule."""
    pot = th.Potential(cfg.float("model", "a"), cfg.float("model", "b"))
    rng = np.random.default_rng(cfg.int("run", "seed"))
    hard_ok = True
    for n, m in cfg.pairs:
        scheme = cg.BlockScheme(n, m)
        rep = ops.check_assumptions(n, rng=rng)
        y = rng.standard_normal((8, m))
        npp = float(np.max(np.abs(scheme.project(scheme.lift(y)) - y)))
        xi = rng.standard_normal((8, m))
        xi -= xi.mean(axis=1, keepdims=True)
        dense = scheme.project(ops.apply_JAinv(scheme.lift(xi)))
        closed = scheme.apply_PAinvJNPt(xi)
        ups = float(np.max(np.abs(dense - closed)) / np.max(np.abs(dense)))
        table = th.build_psi_k(pot, scheme.k)
        lam, big = th.convexity_bounds(table, 2.0)
        lo, hi = mt.norm_sandwich_ratios(n)
        ok = rep.ok and npp == 0.0 and ups <= 1e-10 and lam > 0
        hard_ok &= ok
        out.tables[f"psi_k_K{scheme.k}"] = table.content_hash()
        out.rows.append({
            "N": n, "M": m, "K": scheme.k, "antisymmetry_exact": rep.antisymmetry_exact,
            "commutator_residual": rep.commutator_residual, "c_ratio_max": rep.c_ratio_max,
            "c_violations": rep.c_violations, "tau": rep.tau, "gamma": scheme.fluctuation_constant,
            "lambda": lam, "Lambda": big, "NPPt_residual": npp, "upsilon_rel_err": ups,
            "sandwich_lo": lo, "sandwich_hi": hi, "ok": ok,
        })
    out.verdicts["identities_ok"] = hard_ok
    return EXIT_OK if hard_ok else EXIT_IDENTITY


def cmd_simulate(cfg: Config, out: Output) -> int:
    n, m = cfg.pairs[0]
    res = ex.run_hydro(hydro_config(cfg, n, m, out.dir / "tables"))
    for r in res.rows():
        out.rows.append({**r, "wall_time": res.wall_time})
    out.tables[f"psi_k_K{n // m}"] = res.table_hash
    out.verdicts["theorem1"] = res.verdict.as_dict()
    out.verdicts["constants"] = res.constants.as_dict()
    out.verdicts["energy_bound_ok"] = res.energy_bound_ok
    out.verdicts["sampler_ok"] = res.sampler.ok
    return EXIT_OK


def cmd_macro(cfg: Config, out: Output) -> int:
    pot = th.Potential(cfg.float("model", "a"), cfg.float("model", "b"))
    profile = ex.cosine_profile(cfg.float("model", "amplitude"), cfg.float("model", "mean"))
    t_end = cfg.float("sim", "t_end")
    times = np.linspace(0.0, t_end, cfg.int("sim", "checkpoints"))
    ok = True
    for n, m in cfg.pairs:
        scheme = cg.BlockScheme(n, m)
        table = th.load_or_build_psi_k(pot, scheme.k, out.dir / "tables")
        traj = mp.integrate_macro(cg.block_averages(profile, m), t_end, table, scheme, t_eval=times)
        out.tables[f"psi_k_K{scheme.k}"] = table.content_hash()
        ok &= traj.energy_bound_ok
        for t, eta, e, bound in zip(traj.times, traj.profiles, traj.energies, traj.energy_bound):
            out.rows.append({"N": n, "M": m, "time": float(t), "mean": float(eta.mean()), "energy": float(e),
                             "energy_bound": float(bound), "h_minus1_sq": float(mt.h_minus1_sq(eta - eta.mean()))})
    out.verdicts["energy_bound_ok"] = ok
    return EXIT_OK


def cmd_pde(cfg: Config, out: Output) -> int:
    pot = th.Potential(cfg.float("model", "a"), cfg.float("model", "b"))
    profile = ex.cosine_profile(cfg.float("model", "amplitude"), cfg.float("model", "mean"))
    m_pde, t_end = cfg.int("pde", "m_pde"), cfg.float("sim", "t_end")
    times = np.linspace(0.0, t_end, cfg.int("sim", "checkpoints"))
    flux = ex.pde_flux(pot)
    zeta0 = cg.block_averages(profile, m_pde)
    sol = mp.solve_pde(zeta0, t_end, flux, t_eval=times)
    exact = mp.gaussian_exact_pde(zeta0, times) if pot.is_gaussian else None
    for i, t in enumerate(times):
        row = {"m_pde": m_pde, "time": float(t), "mass": float(sol.values[i].mean()),
               "l2_norm": float(np.sqrt(np.mean(sol.values[i] ** 2)))}
        if exact is not None:
            row["l2_error_vs_exact"] = float(np.sqrt(np.mean((sol.values[i] - exact[i]) ** 2)))
        out.rows.append(row)
    drift = float(np.max(np.abs(sol.mass() - sol.mass()[0])))
    out.verdicts["mass_drift"] = drift
    return EXIT_OK if drift <= 1e-13 else EXIT_IDENTITY


def cmd_sweep(cfg: Config, out: Output) -> int:
    results = []
    try:
        for n, m in cfg.pairs:
            res = ex.run_hydro(hydro_config(cfg, n, m, out.dir / "tables"))
            results.append(res)
            gap, gap_se = res.sup_gap
            th_, th_se = res.sup_theta
            out.tables[f"psi_k_K{n // m}"] = res.table_hash
            out.rows.append({"N": n, "M": m, "K": n // m, "sup_hydro_gap": gap, "sup_hydro_gap_se": gap_se,
                             "sup_theta": th_, "sup_theta_se": th_se, "bound_margin": res.verdict.margin,
                             "bound_ok": res.verdict.ok, "wall_time": res.wall_time})
            out.verdicts[f"theorem1_N{n}_M{m}"] = res.verdict.as_dict()
    finally:
        if results:
            gaps = [r.sup_gap for r in results]
            out.verdicts["gap_decreasing"] = ex.strictly_decreasing([g[0] for g in gaps], [g[1] for g in gaps])
            out.verdicts["bounds_ok"] = all(r.verdict.ok for r in results)
    return EXIT_OK


def cmd_oracle(cfg: Config, out: Output) -> int:
    suite = ex.fp_suite()
    for key, value in suite.items():
        out.rows.append({"check": key, "value": value})
    ou = ex.ou_ensemble_check(seed=cfg.int("run", "seed"))
    dev = np.abs(ou.theta_stat[:, 0] - ou.theta_stat[:, 1]) / ou.theta_stat[:, 2]
    for t, d in zip(ou.times, dev):
        out.rows.append({"check": f"ou_theta_sigma_t{t:.4f}", "value": float(d)})
    stationary = max(v for k, v in suite.items() if k.startswith("stationarity"))
    out.verdicts.update({
        "stationarity_ok": stationary <= 1e-8,
        "entropy_identity_ok": suite["identity_residual"] <= 1e-4,
        "entropy_monotone": suite["entropy_monotone"],
        "ou_theta_within_3sigma": bool(np.all(dev <= 3.0)),
        "ou_moments_within_3sigma": ou.ok(3.0),
    })
    hard = out.verdicts["stationarity_ok"] and out.verdicts["entropy_identity_ok"] and out.verdicts["entropy_monotone"]
    return EXIT_OK if hard else EXIT_IDENTITY


COMMANDS = {"verify": cmd_verify, "simulate": cmd_simulate, "macro": cmd_macro, "pde": cmd_pde, "sweep": cmd_sweep, "oracle": cmd_oracle}


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="twoscale", description="Two-scale hydrodynamic-limit experiments.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", type=Path, help="INI configuration file")
    p.add_argument("--seed", type=int, help="unsigned 64-bit seed")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p.add_argument("--threads", type=int, help="worker threads for ensemble chunks")
    p.add_argument("--deterministic", type=_bool, help="omit wall-clock fields so outputs are bit-identical")
    p.add_argument("--set", dest="sets", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override any config field; repeatable")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    overrides = {("run", "seed"): args.seed, ("run", "threads"): args.threads,
                 ("run", "deterministic"): None if args.deterministic is None else str(args.deterministic).lower()}
    try:
        for item in args.sets:
            field, sep, value = item.partition("=")
            section, dot, key = field.strip().partition(".")
            if not (sep and dot) or section not in DEFAULTS or key not in DEFAULTS[section]:
                raise ConfigError(f"--set {item!r}: expected a known SECTION.KEY=VALUE")
            overrides[(section, key)] = value.strip()
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Output(args.out, cfg, args.command)
    try:
        code = COMMANDS[args.command](cfg, out)
    except (NumericalAbort, TableRangeError, FloatingPointError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        out.verdicts["abort"] = str(exc)
        code = EXIT_ABORT
    finally:
        out.write()
    return code


if __name__ == "__main__":
    sys.exit(main())
