"""Command-line interface: configuration, dispatch and reproducible file output.

Configuration comes from an optional JSON file plus flag overrides (flags
win). Every run writes a manifest JSON with the resolved configuration, the
RNG identifier and sha256 checksums of the emitted files; re-running with
the manifest as the config file reproduces the outputs byte for byte at any
thread count. Exit codes: 0 ok, 1 invariant breach, 2 usage or config error.
"""

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, asdict, fields

import numpy as np

from . import __version__
from .spin_algebra import SpinSpace, coherent_x_state, make_spin_ops, matrix_to_json
from .generators import ModelParams, master_evolve
from .ito_calculus import qsde_coefficients, unitarity_defect
from . import filters as filt
from . import trajectory as traj
from . import charfuncs as cf

UNITARITY_TOL = 1e-12
FLOAT_FMT = "%.17g"
OUTDIR_ENV = "SPINPROBE_OUTDIR"


class ConfigError(ValueError):
    """Bad configuration or usage; maps to exit code 2."""


class InvariantError(RuntimeError):
    """A declared invariant failed at run time; maps to exit code 1."""


@dataclass
class RunConfig:
    """Fully resolved run configuration; unknown input keys are rejected."""

    J: float = 0.5
    alpha: float = None
    kappa: float = None
    M: float = None
    phi: float = 0.0
    B: float = 0.0
    T: float = 1.0
    dt: float = 1e-3
    scheme: str = "polarimetry"
    mode: str = "normalized"
    N: int = 1
    base_seed: int = 0
    outdir: str = None
    k_min: float = -5.0
    k_max: float = 5.0
    k_points: int = 41
    alpha_list: tuple = (2.0, 4.0, 8.0, 16.0)
    initial_state: str = "coherent_x"
    snapshots: int = 11
    record_full_state: bool = False
    generator: str = "finite"
    process: str = None
    alpha_schedule: tuple = None

    def to_params(self) -> ModelParams:
        try:
            return ModelParams.build(
                j=self.J,
                alpha=self.alpha,
                kappa=self.kappa,
                M=self.M,
                phi=self.phi,
                B=self.B,
                T=self.T,
                dt=self.dt,
                alpha_schedule=self.alpha_schedule,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def initial_rho(self, params):
        space = params.space
        if self.initial_state == "coherent_x":
            return coherent_x_state(space).rho
        if self.initial_state == "maximally_mixed":
            return np.eye(space.dim, dtype=complex) / space.dim
        if self.initial_state == "fz_top":
            rho = np.zeros((space.dim, space.dim), dtype=complex)
            rho[0, 0] = 1.0
            return rho
        raise ConfigError(f"unknown initial_state {self.initial_state!r}")

    def k_grid(self) -> np.ndarray:
        if self.k_points < 1 or self.k_max < self.k_min:
            raise ConfigError("k grid needs k_points >= 1 and k_min <= k_max")
        return np.linspace(self.k_min, self.k_max, self.k_points)


def _parse_j(value):
    if isinstance(value, str) and "/" in value:
        num, den = value.split("/", 1)
        return float(num) / float(den)
    return float(value)


def parse_config(path=None, overrides=None) -> RunConfig:
    """Load, merge and validate the configuration.

    path may point at a plain config JSON or at a manifest produced by a
    previous run (its nested "config" object is used). overrides is a dict
    of already-typed values from command-line flags; flags win.
    """
    data = {}
    if path is not None:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must contain a JSON object")
        if "config" in data and isinstance(data["config"], dict):
            data = data["config"]
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    merged = dict(data)
    for key, value in (overrides or {}).items():
        if value is not None:
            merged[key] = value

    cfg = RunConfig()
    for key, value in merged.items():
        setattr(cfg, key, value)
    try:
        cfg.J = _parse_j(cfg.J)
        SpinSpace.from_j(cfg.J)
        for name in ("alpha", "kappa", "M", "phi", "B", "T", "dt", "k_min", "k_max"):
            value = getattr(cfg, name)
            if value is not None:
                setattr(cfg, name, float(value))
        cfg.N = int(cfg.N)
        cfg.base_seed = int(cfg.base_seed)
        cfg.k_points = int(cfg.k_points)
        cfg.snapshots = int(cfg.snapshots)
        cfg.record_full_state = bool(cfg.record_full_state)
        if cfg.alpha_list is not None:
            cfg.alpha_list = tuple(float(a) for a in cfg.alpha_list)
        if cfg.alpha_schedule is not None:
            cfg.alpha_schedule = tuple((float(t), float(a)) for t, a in cfg.alpha_schedule)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

    if cfg.scheme not in filt.SCHEMES:
        raise ConfigError(f"scheme must be one of {filt.SCHEMES}, got {cfg.scheme!r}")
    if cfg.mode not in filt.MODES:
        raise ConfigError(f"mode must be one of {filt.MODES}, got {cfg.mode!r}")
    if cfg.N < 1:
        raise ConfigError("N must be at least 1")
    if not 0 <= cfg.base_seed < 2**64:
        raise ConfigError("base_seed must be a 64-bit unsigned integer")
    if cfg.initial_state not in ("coherent_x", "maximally_mixed", "fz_top"):
        raise ConfigError(f"unknown initial_state {cfg.initial_state!r}")
    if cfg.process is not None and cfg.process not in cf.PROCESSES:
        raise ConfigError(f"process must be one of {cf.PROCESSES}, got {cfg.process!r}")
    if cfg.generator not in ("finite", "limit"):
        raise ConfigError(f"generator must be 'finite' or 'limit', got {cfg.generator!r}")

    # Reconcile alpha/kappa/M when determinable; commands that need full model
    # parameters and lack them fail in their own to_params() call.
    if sum(v is not None for v in (cfg.alpha, cfg.kappa, cfg.M)) >= 2:
        params = cfg.to_params()  # validates reconciliation and the time grid
        if cfg.scheme == "polarimetry":
            a2dt = max(params.drive_power(i * params.dt) for i in range(params.n_steps)) * params.dt
            if a2dt > filt.JUMP_BOUND:
                raise ConfigError(
                    f"alpha^2 dt = {a2dt:.4g} exceeds the one-jump bound {filt.JUMP_BOUND} "
                    "for the polarimetry scheme; reduce dt"
                )
    if cfg.outdir is None:
        cfg.outdir = os.environ.get(OUTDIR_ENV, ".")
    return cfg


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return FLOAT_FMT % value
    return str(value)


def write_csv(path, header, rows):
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(outdir, command, cfg: RunConfig, outputs, threads, started):
    manifest = {
        "tool": "spinprobe",
        "version": __version__,
        "command": command,
        "rng": traj.RNG_NAME,
        "threads": threads,
        "wall_clock_s": time.time() - started,
        "config": asdict(cfg),
        "outputs": {os.path.basename(p): _sha256(p) for p in outputs},
    }
    path = os.path.join(outdir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_check_unitarity(cfg: RunConfig, outdir, threads):
    params = cfg.to_params()
    report = {}
    worst = 0.0
    for name in ("U0", "U", "Uprime", "Ubar"):
        defect = unitarity_defect(qsde_coefficients(name, params, t=0.0))
        norms = defect.norms()
        report[name] = norms
        worst = max(worst, defect.max_norm())
    report["max_defect"] = worst
    path = os.path.join(outdir, "unitarity.json")
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(json.dumps(report, indent=2, sort_keys=True))
    if worst >= UNITARITY_TOL:
        raise InvariantError(f"unitarity defect {worst:.3e} >= {UNITARITY_TOL}")
    return [path]


def cmd_master(cfg: RunConfig, outdir, threads):
    params = cfg.to_params()
    rho0 = cfg.initial_rho(params)
    times, states = master_evolve(rho0, params, generator=cfg.generator)
    f_x, f_y, f_z = make_spin_ops(params.space)
    fz2_op = f_z @ f_z
    rows = []
    for t, rho in zip(times, states):
        rows.append(
            (
                t,
                np.trace(rho @ f_x).real,
                np.trace(rho @ f_y).real,
                np.trace(rho @ f_z).real,
                np.trace(rho @ fz2_op).real,
                np.trace(rho @ rho).real,
            )
        )
    path = os.path.join(outdir, "master.csv")
    write_csv(path, ["t", "fx", "fy", "fz", "fz2", "purity"], rows)
    return [path]


def cmd_simulate(cfg: RunConfig, outdir, threads):
    params = cfg.to_params()
    rho0 = cfg.initial_rho(params)
    sim = {
        "polarimetry": traj.simulate_polarimetry,
        "homodyne": traj.simulate_homodyne,
        "limit": traj.simulate_limit,
    }[cfg.scheme]
    rec = sim(params, cfg.base_seed, rho0=rho0)
    if cfg.mode == "linear":
        obs = rec.events if cfg.scheme == "polarimetry" else rec.dy
        run = filt.run_filter(cfg.scheme, "linear", params, obs, rho0=rho0)
        loglik = run.loglik
    else:
        loglik = np.zeros_like(rec.t)
    rows = []
    for i, t in enumerate(rec.t):
        if i == 0:
            obs_str = ""
        elif cfg.scheme == "polarimetry":
            obs_str = {0: "", 1: "xi", 2: "eta"}[int(rec.events[i - 1])]
        else:
            obs_str = _fmt(rec.dy[i - 1])
        rows.append((t, obs_str, rec.fx[i], rec.fz[i], rec.var_z[i], rec.purity[i], loglik[i]))
    path = os.path.join(outdir, "trajectory.csv")
    write_csv(path, ["t", "event_or_dy", "fx", "fz", "var_fz", "purity", "loglik"], rows)
    outputs = [path]
    if cfg.record_full_state:
        rec = sim(params, cfg.base_seed, rho0=rho0, keep_states=True)
        spath = os.path.join(outdir, "states.json")
        with open(spath, "w") as fh:
            json.dump({"t": list(map(float, rec.t)), "rho": [matrix_to_json(r) for r in rec.states]}, fh)
            fh.write("\n")
        outputs.append(spath)
    return outputs


def cmd_ensemble(cfg: RunConfig, outdir, threads, per_trajectory=None):
    params = cfg.to_params()
    rho0 = cfg.initial_rho(params)
    snaps = traj.default_snapshot_indices(params.n_steps, cfg.snapshots)
    summary = traj.run_ensemble(
        params, cfg.scheme, cfg.N, cfg.base_seed, rho0=rho0, threads=threads, snapshot_indices=snaps
    )
    names = sorted(summary.series_mean)
    header = ["t"]
    for name in names:
        header += [f"mean_{name}", f"sem_{name}"]
    rows = []
    for i, t in enumerate(summary.t):
        row = [t]
        for name in names:
            row += [summary.series_mean[name][i], summary.series_sem[name][i]]
        rows.append(row)
    path = os.path.join(outdir, "ensemble.csv")
    write_csv(path, header, rows)

    tpath = os.path.join(outdir, "terminals.csv")
    tnames = sorted(summary.terminals)
    write_csv(
        tpath,
        tnames,
        zip(*[summary.terminals[name] for name in tnames]),
    )

    spath = os.path.join(outdir, "mean_states.json")
    with open(spath, "w") as fh:
        json.dump(
            {
                "snapshot_times": [float(summary.t[i]) for i in summary.snapshot_indices],
                "mean_rho": [matrix_to_json(r) for r in summary.mean_rho],
                "sem_frobenius": [float(x) for x in summary.sem_rho_frob],
            },
            fh,
            indent=2,
        )
        fh.write("\n")
    outputs = [path, tpath, spath]

    if per_trajectory:
        tdir = os.path.join(outdir, per_trajectory)
        os.makedirs(tdir, exist_ok=True)
        for i in range(cfg.N):
            rec = traj._simulate_full(cfg.scheme, params, cfg.base_seed, rho0=rho0, traj_index=i)
            rows = []
            for step, t in enumerate(rec.t):
                if step == 0:
                    obs_str = ""
                elif cfg.scheme == "polarimetry":
                    obs_str = {0: "", 1: "xi", 2: "eta"}[int(rec.events[step - 1])]
                else:
                    obs_str = _fmt(rec.dy[step - 1])
                rows.append((t, obs_str, rec.fx[step], rec.fz[step], rec.var_z[step], rec.purity[step]))
            tp = os.path.join(tdir, f"trajectory_{i:05d}.csv")
            write_csv(tp, ["t", "event_or_dy", "fx", "fz", "var_fz", "purity"], rows)
            outputs.append(tp)
    return outputs


_PROCESS_SCHEME = {"plus": "polarimetry", "minus": "polarimetry", "homodyne": "homodyne", "limit": "limit"}


def cmd_charfunc(cfg: RunConfig, outdir, threads):
    if cfg.process is None:
        raise ConfigError("charfunc requires a process (plus, minus, homodyne or limit)")
    scheme = _PROCESS_SCHEME[cfg.process]
    params = cfg.to_params()
    rho0 = cfg.initial_rho(params)
    p = np.diagonal(rho0).real
    k = cfg.k_grid()
    if cfg.process == "limit":
        analytic = cf.charfunc_limit_analytic(k, params.M, p, params.T)
    elif cfg.process == "plus":
        analytic = cf.charfunc_plus_analytic(k, params)
    elif cfg.process == "minus":
        analytic = cf.charfunc_minus_analytic(k, params, p)
    else:
        analytic = cf.charfunc_homodyne_analytic(k, params, p)
    summary = traj.run_ensemble(params, scheme, cfg.N, cfg.base_seed, rho0=rho0, threads=threads)
    empirical = cf.empirical_charfunc(summary, cfg.process, k)
    rows = [
        (
            k[i],
            params.T,
            analytic.values[i].real,
            analytic.values[i].imag,
            empirical.values[i].real,
            empirical.values[i].imag,
            empirical.stderr[i],
        )
        for i in range(k.size)
    ]
    path = os.path.join(outdir, "charfunc.csv")
    write_csv(
        path,
        ["k", "t", "re_analytic", "im_analytic", "re_empirical", "im_empirical", "stderr"],
        rows,
    )
    return [path]


def cmd_converge(cfg: RunConfig, outdir, threads):
    if cfg.M is None:
        params = cfg.to_params()
        m_value = params.M
    else:
        m_value = cfg.M
    space = SpinSpace.from_j(cfg.J)
    rho0 = cfg.initial_rho(ModelParams.build(j=cfg.J, alpha=1.0, kappa=0.0, T=cfg.T, dt=cfg.T))
    p = np.diagonal(rho0).real
    study = cf.convergence_study(m_value, cfg.alpha_list, cfg.k_grid(), cfg.T, p, j=cfg.J)
    rows = [
        (
            study.alphas[i],
            study.kappas[i],
            study.d_polarimetry[i],
            study.d_homodyne[i],
            study.rate_polarimetry,
            study.rate_homodyne,
        )
        for i in range(study.alphas.size)
    ]
    path = os.path.join(outdir, "converge.csv")
    write_csv(
        path,
        ["alpha", "kappa", "d_polarimetry", "d_homodyne", "rate_polarimetry", "rate_homodyne"],
        rows,
    )
    if study.alphas.size > 1:
        if not (np.all(np.diff(study.d_polarimetry) < 0) and np.all(np.diff(study.d_homodyne) < 0)):
            raise InvariantError("convergence distances are not strictly decreasing")
    return [path]


COMMANDS = {
    "simulate": cmd_simulate,
    "ensemble": cmd_ensemble,
    "master": cmd_master,
    "charfunc": cmd_charfunc,
    "converge": cmd_converge,
    "check-unitarity": cmd_check_unitarity,
}

_CSV_DOC = """CSV column orders (fixed):
  simulate    t, event_or_dy, fx, fz, var_fz, purity, loglik
  master      t, fx, fy, fz, fz2, purity
  ensemble    t, then mean_/sem_ pairs in alphabetical series order;
              terminals.csv has per-trajectory terminal columns
  charfunc    k, t, re_analytic, im_analytic, re_empirical, im_empirical, stderr
  converge    alpha, kappa, d_polarimetry, d_homodyne, rate_polarimetry, rate_homodyne
Floats are printed with 17 significant digits for exact round-tripping."""


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spinprobe",
        description="Spin-gas polarimetry and homodyne co-simulation toolbox.",
        epilog=_CSV_DOC,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"spinprobe {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, epilog=_CSV_DOC, formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="JSON config file or a previous run manifest")
        p.add_argument("--outdir", help=f"output directory (default ${OUTDIR_ENV} or .)")
        p.add_argument("--threads", type=int, default=1, help="trajectory worker threads")
        p.add_argument("--J", help="spin magnitude (number or fraction like 3/2)")
        p.add_argument("--alpha", type=float)
        p.add_argument("--kappa", type=float)
        p.add_argument("--M", type=float)
        p.add_argument("--phi", type=float)
        p.add_argument("--B", type=float)
        p.add_argument("--T", type=float)
        p.add_argument("--dt", type=float)
        p.add_argument("--scheme", choices=filt.SCHEMES)
        p.add_argument("--mode", choices=filt.MODES)
        p.add_argument("--N", type=int)
        p.add_argument("--seed", dest="base_seed", type=int)
        p.add_argument("--k-min", dest="k_min", type=float)
        p.add_argument("--k-max", dest="k_max", type=float)
        p.add_argument("--k-points", dest="k_points", type=int)
        p.add_argument("--alpha-list", dest="alpha_list", help="comma-separated drive amplitudes")
        p.add_argument("--initial-state", dest="initial_state",
                       choices=("coherent_x", "maximally_mixed", "fz_top"))
        p.add_argument("--snapshots", type=int)
        p.add_argument("--record-full-state", dest="record_full_state", action="store_const", const=True)
        p.add_argument("--generator", choices=("finite", "limit"))
        p.add_argument("--process", choices=cf.PROCESSES)
        if name == "ensemble":
            p.add_argument("--per-trajectory", help="subdirectory for per-trajectory CSVs")
    return parser


def _overrides_from_args(args) -> dict:
    keys = (
        "J", "alpha", "kappa", "M", "phi", "B", "T", "dt", "scheme", "mode", "N",
        "base_seed", "k_min", "k_max", "k_points", "alpha_list", "initial_state",
        "snapshots", "record_full_state", "generator", "process", "outdir",
    )
    out = {}
    for key in keys:
        value = getattr(args, key, None)
        if value is None:
            continue
        if key == "alpha_list" and isinstance(value, str):
            value = tuple(float(a) for a in value.split(","))
        out[key] = value
    return out


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    started = time.time()
    try:
        cfg = parse_config(args.config, _overrides_from_args(args))
        outdir = cfg.outdir
        os.makedirs(outdir, exist_ok=True)
        command = COMMANDS[args.command]
        if args.command == "ensemble":
            outputs = command(cfg, outdir, args.threads, per_trajectory=getattr(args, "per_trajectory", None))
        else:
            outputs = command(cfg, outdir, args.threads)
        manifest = write_manifest(outdir, args.command, cfg, outputs, args.threads, started)
        print(f"wrote {len(outputs)} file(s) + {os.path.basename(manifest)} in {outdir}")
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except InvariantError as exc:
        print(f"invariant breach: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
