"""Co-simulation of observation records and their filters, plus ensemble runs.

Records are sampled from the filter's own predictive law: counting events
from the state-dependent channel rates, photocurrents by adding white noise
to the predicted drift (the innovations are Wiener increments by
construction). Every trajectory draws exclusively from its own
counter-based Philox stream keyed by (base_seed, trajectory_index), so runs
are bit-identical for any batching, thread count or execution order.
Ensemble summaries reduce per-trajectory contributions in fixed blocks of
:data:`BLOCK` trajectories, in index order, which keeps the floating-point
reduction tree independent of scheduling.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .generators import ModelParams
from .spin_algebra import DensityState, coherent_x_state
from . import filters
from .filters import build_kernels, pol_drift_raw, pol_jump_raw, homodyne_raw, limit_raw, finish_step

BLOCK = 256
RNG_NAME = "philox4x64 key=(base_seed, trajectory_index)"

_MASK64 = (1 << 64) - 1


def trajectory_rng(base_seed: int, index: int) -> np.random.Generator:
    """Independent counter-based stream for one trajectory."""
    key = np.array([base_seed & _MASK64, index & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass
class TrajectoryRecord:
    """One co-simulated record with its filtered summaries.

    Counting records carry per-step events (0 none, 1 xi, 2 eta), the
    cumulative channel counts and the scaled sum/difference processes
    y_plus = (Y_xi + Y_eta)/alpha^2 and y_minus = (Y_xi - Y_eta)/alpha.
    Diffusive records carry the photocurrent increments and the integrated
    record y. Innovation series are cumulative.
    """

    scheme: str
    seed: int
    traj_index: int
    params: ModelParams
    t: np.ndarray
    fx: np.ndarray
    fz: np.ndarray
    fz2: np.ndarray
    var_z: np.ndarray
    purity: np.ndarray
    loglik: np.ndarray
    events: np.ndarray = None
    counts_xi: np.ndarray = None
    counts_eta: np.ndarray = None
    y_plus: np.ndarray = None
    y_minus: np.ndarray = None
    inn_xi: np.ndarray = None
    inn_eta: np.ndarray = None
    dy: np.ndarray = None
    y: np.ndarray = None
    inn: np.ndarray = None
    states: np.ndarray = None

    @property
    def terminal_y(self) -> float:
        """Terminal value of the scheme's headline output process."""
        if self.scheme == "polarimetry":
            return float(self.y_minus[-1])
        return float(self.y[-1])


@dataclass
class EnsembleSummary:
    """Scheduling-invariant reductions over an ensemble of trajectories."""

    scheme: str
    N: int
    base_seed: int
    params: ModelParams
    t: np.ndarray
    snapshot_indices: np.ndarray
    mean_rho: np.ndarray          # (n_snap, dim, dim)
    sem_rho_frob: np.ndarray      # (n_snap,) Frobenius-norm MC standard error
    series_mean: dict             # name -> (n+1,) ensemble mean
    series_sem: dict              # name -> (n+1,) MC standard error of the mean
    terminals: dict               # name -> (N,) per-trajectory terminal values

    def terminal_stats(self) -> dict:
        """Mean and variance of every terminal observable."""
        return {
            name: (float(np.mean(v)), float(np.var(v, ddof=1)) if len(v) > 1 else 0.0)
            for name, v in self.terminals.items()
        }


def _resolve_rho0(params, rho0):
    if rho0 is None:
        rho0 = coherent_x_state(params.space)
    if isinstance(rho0, DensityState):
        rho0 = rho0.rho
    return np.asarray(rho0, dtype=complex)


def _check_jump_bound(params):
    a2max = max(params.drive_power(i * params.dt) for i in range(params.n_steps))
    if a2max * params.dt > filters.JUMP_BOUND:
        raise ValueError(
            f"alpha^2 dt = {a2max * params.dt:.4g} exceeds the one-jump bound "
            f"{filters.JUMP_BOUND}; reduce dt"
        )


class _FullCollector:
    """Retains everything needed to build per-trajectory records."""

    def __init__(self, scheme, n, batch, dim, keep_states):
        self.scheme = scheme
        shape = (batch, n + 1)
        self.fx = np.zeros(shape)
        self.fz = np.zeros(shape)
        self.fz2 = np.zeros(shape)
        self.var_z = np.zeros(shape)
        self.purity = np.zeros(shape)
        self.loglik = np.zeros(shape)
        self.states = np.zeros((batch, n + 1, dim, dim), dtype=complex) if keep_states else None
        if scheme == "polarimetry":
            self.events = np.zeros((batch, n), dtype=np.int8)
            self.inn_xi = np.zeros(shape)
            self.inn_eta = np.zeros(shape)
        else:
            self.dy = np.zeros((batch, n))
            self.inn = np.zeros(shape)

    def start(self, rho, moments):
        self._set_moments(0, moments, np.zeros(rho.shape[0]))
        if self.states is not None:
            self.states[:, 0] = rho

    def _set_moments(self, idx, moments, loglik):
        fx, fz, fz2, var_z, purity = moments
        self.fx[:, idx] = fx
        self.fz[:, idx] = fz
        self.fz2[:, idx] = fz2
        self.var_z[:, idx] = var_z
        self.purity[:, idx] = purity
        self.loglik[:, idx] = loglik

    def step_counting(self, i, ev, inn_xi_inc, inn_eta_inc, rho, moments, loglik):
        self.events[:, i] = ev
        self.inn_xi[:, i + 1] = self.inn_xi[:, i] + inn_xi_inc
        self.inn_eta[:, i + 1] = self.inn_eta[:, i] + inn_eta_inc
        self._set_moments(i + 1, moments, loglik)
        if self.states is not None:
            self.states[:, i + 1] = rho

    def step_diffusive(self, i, dy, inn_inc, rho, moments, loglik):
        self.dy[:, i] = dy
        self.inn[:, i + 1] = self.inn[:, i] + inn_inc
        self._set_moments(i + 1, moments, loglik)
        if self.states is not None:
            self.states[:, i + 1] = rho


class _ReducedCollector:
    """Accumulates block sums for ensemble summaries; nothing per step per path."""

    SERIES_COUNTING = ("fx", "fz", "var_z", "purity", "inn_xi", "inn_eta", "counts_xi", "counts_eta")
    SERIES_DIFFUSIVE = ("fx", "fz", "var_z", "purity", "inn")

    def __init__(self, scheme, n, batch, dim, snapshot_indices):
        self.scheme = scheme
        self.batch = batch
        names = self.SERIES_COUNTING if scheme == "polarimetry" else self.SERIES_DIFFUSIVE
        self.sums = {name: np.zeros(n + 1) for name in names}
        self.sumsq = {name: np.zeros(n + 1) for name in names}
        self.snapshot_indices = snapshot_indices
        self.rho_sum = np.zeros((len(snapshot_indices), dim, dim), dtype=complex)
        self.rho_abs2_sum = np.zeros((len(snapshot_indices), dim, dim))
        self._snap_pos = {int(g): k for k, g in enumerate(snapshot_indices)}
        if scheme == "polarimetry":
            self.cum_inn_xi = np.zeros(batch)
            self.cum_inn_eta = np.zeros(batch)
            self.n_xi = np.zeros(batch, dtype=np.int64)
            self.n_eta = np.zeros(batch, dtype=np.int64)
        else:
            self.cum_inn = np.zeros(batch)
            self.cum_y = np.zeros(batch)
            self.qv = np.zeros(batch)
        self.loglik = np.zeros(batch)

    def _add_series(self, idx, name, values):
        self.sums[name][idx] += values.sum()
        self.sumsq[name][idx] += (values**2).sum()

    def _snapshot(self, idx, rho):
        k = self._snap_pos.get(idx)
        if k is not None:
            self.rho_sum[k] += rho.sum(axis=0)
            self.rho_abs2_sum[k] += (np.abs(rho) ** 2).sum(axis=0)

    def start(self, rho, moments):
        self._store(0, moments)
        self._snapshot(0, rho)

    def _store(self, idx, moments):
        fx, fz, fz2, var_z, purity = moments
        self._add_series(idx, "fx", fx)
        self._add_series(idx, "fz", fz)
        self._add_series(idx, "var_z", var_z)
        self._add_series(idx, "purity", purity)

    def step_counting(self, i, ev, inn_xi_inc, inn_eta_inc, rho, moments, loglik):
        self.cum_inn_xi += inn_xi_inc
        self.cum_inn_eta += inn_eta_inc
        self.n_xi += ev == 1
        self.n_eta += ev == 2
        self._store(i + 1, moments)
        self._add_series(i + 1, "inn_xi", self.cum_inn_xi)
        self._add_series(i + 1, "inn_eta", self.cum_inn_eta)
        self._add_series(i + 1, "counts_xi", self.n_xi.astype(float))
        self._add_series(i + 1, "counts_eta", self.n_eta.astype(float))
        self._snapshot(i + 1, rho)
        self.loglik = loglik

    def step_diffusive(self, i, dy, inn_inc, rho, moments, loglik):
        self.cum_inn += inn_inc
        self.cum_y += dy
        self.qv += inn_inc**2
        self._store(i + 1, moments)
        self._add_series(i + 1, "inn", self.cum_inn)
        self._snapshot(i + 1, rho)
        self.loglik = loglik


def _moments_batch(rho, kern):
    p = np.einsum("bii->bi", rho).real
    fx = np.einsum("bij,ji->b", rho, kern.F_x).real
    fz = p @ kern.levels
    fz2 = p @ kern.levels**2
    purity = np.einsum("bij,bji->b", rho, rho).real
    return fx, fz, fz2, fz2 - fz**2, purity


def _simulate_block(scheme, params, base_seed, indices, rho0, collector):
    """Advance a batch of trajectories; one noise draw per trajectory per step."""
    kern = build_kernels(params)
    n = params.n_steps
    dt = params.dt
    batch = len(indices)
    rho = np.broadcast_to(rho0, (batch, kern.dim, kern.dim)).copy()

    if scheme == "polarimetry":
        noise = np.stack([trajectory_rng(base_seed, i).random(n) for i in indices])
    else:
        noise = np.stack([trajectory_rng(base_seed, i).standard_normal(n) for i in indices])

    loglik = np.zeros(batch)
    collector.start(rho, _moments_batch(rho, kern))

    sqdt = np.sqrt(dt)
    for i in range(n):
        t = i * dt
        if scheme == "polarimetry":
            a2 = params.drive_power(t)
            p = np.einsum("bii->bi", rho).real
            r_xi = 0.5 * a2 * (p @ kern.lxi2)
            r_eta = 0.5 * a2 * (p @ kern.leta2)
            if a2 * dt > 1.0:
                raise ValueError(f"total count probability alpha^2 dt = {a2 * dt} exceeds 1")
            u = noise[:, i]
            hit_xi = u < r_xi * dt
            hit_eta = (~hit_xi) & (u < (r_xi + r_eta) * dt)
            raw = pol_drift_raw(rho, kern, dt, a2)
            if hit_xi.any():
                raw[hit_xi] = pol_jump_raw(raw[hit_xi], kern, "xi")
            if hit_eta.any():
                raw[hit_eta] = pol_jump_raw(raw[hit_eta], kern, "eta")
            rho, tr = finish_step(raw)
            loglik = loglik + np.log(tr)
            ev = np.zeros(batch, dtype=np.int8)
            ev[hit_xi] = 1
            ev[hit_eta] = 2
            collector.step_counting(
                i,
                ev,
                hit_xi.astype(float) - r_xi * dt,
                hit_eta.astype(float) - r_eta * dt,
                rho,
                _moments_batch(rho, kern),
                loglik,
            )
        else:
            p = np.einsum("bii->bi", rho).real
            if scheme == "homodyne":
                a_t = params.alpha_of(t)
                pred = 2.0 * a_t * (p @ kern.s)
            else:
                pred = 2.0 * kern.sqrt_M * (p @ kern.levels)
            dy = pred * dt + sqdt * noise[:, i]
            if scheme == "homodyne":
                raw = homodyne_raw(rho, kern, dt, dy, a_t)
            else:
                raw = limit_raw(rho, kern, dt, dy)
            rho, tr = finish_step(raw)
            loglik = loglik + np.log(tr)
            collector.step_diffusive(
                i, dy, dy - pred * dt, rho, _moments_batch(rho, kern), loglik
            )
    return collector


def _records_from_collector(scheme, params, base_seed, indices, col: _FullCollector):
    n = params.n_steps
    t = params.time_grid()
    out = []
    for b, idx in enumerate(indices):
        common = dict(
            scheme=scheme,
            seed=base_seed,
            traj_index=idx,
            params=params,
            t=t,
            fx=col.fx[b].copy(),
            fz=col.fz[b].copy(),
            fz2=col.fz2[b].copy(),
            var_z=col.var_z[b].copy(),
            purity=col.purity[b].copy(),
            loglik=col.loglik[b].copy(),
            states=None if col.states is None else col.states[b].copy(),
        )
        if scheme == "polarimetry":
            ev = col.events[b]
            n_xi = np.concatenate([[0], np.cumsum(ev == 1)]).astype(np.int64)
            n_eta = np.concatenate([[0], np.cumsum(ev == 2)]).astype(np.int64)
            alpha = params.alpha
            rec = TrajectoryRecord(
                events=ev.copy(),
                counts_xi=n_xi,
                counts_eta=n_eta,
                y_plus=(n_xi + n_eta) / alpha**2 if alpha > 0 else (n_xi + n_eta).astype(float),
                y_minus=(n_xi - n_eta) / alpha if alpha > 0 else (n_xi - n_eta).astype(float),
                inn_xi=col.inn_xi[b].copy(),
                inn_eta=col.inn_eta[b].copy(),
                **common,
            )
        else:
            dy = col.dy[b]
            rec = TrajectoryRecord(
                dy=dy.copy(),
                y=np.concatenate([[0.0], np.cumsum(dy)]),
                inn=col.inn[b].copy(),
                **common,
            )
        out.append(rec)
    return out


def _simulate_full(scheme, params, seed, rho0=None, keep_states=False, traj_index=0):
    if scheme == "polarimetry":
        _check_jump_bound(params)
    rho0 = _resolve_rho0(params, rho0)
    col = _FullCollector(scheme, params.n_steps, 1, params.space.dim, keep_states)
    _simulate_block(scheme, params, seed, [traj_index], rho0, col)
    return _records_from_collector(scheme, params, seed, [traj_index], col)[0]


def simulate_polarimetry(params: ModelParams, seed: int, rho0=None, keep_states=False) -> TrajectoryRecord:
    """Co-simulate one balanced-polarimetry record with its normalized filter.

    Per step an event is drawn from {xi: r_xi dt, eta: r_eta dt, none} with
    the rates predicted by the current state; the filter is advanced with the
    sampled event. Identical seeds give bit-identical records.
    """
    return _simulate_full("polarimetry", params, seed, rho0, keep_states)


def simulate_homodyne(params: ModelParams, seed: int, rho0=None, keep_states=False) -> TrajectoryRecord:
    """Co-simulate one homodyne record: dy = 2 alpha pi(sin(kappa F_z)) dt + dW."""
    return _simulate_full("homodyne", params, seed, rho0, keep_states)


def simulate_limit(params: ModelParams, seed: int, rho0=None, keep_states=False) -> TrajectoryRecord:
    """Co-simulate one strong-driving-limit record: dy = 2 sqrt(M) pi(F_z) dt + dW."""
    return _simulate_full("limit", params, seed, rho0, keep_states)


def default_snapshot_indices(n_steps: int, count: int = 11) -> np.ndarray:
    count = min(count, n_steps + 1)
    return np.unique(np.linspace(0, n_steps, count).round().astype(int))


def run_ensemble(
    params: ModelParams,
    scheme: str,
    N: int,
    base_seed: int,
    rho0=None,
    threads: int = 1,
    snapshot_indices=None,
) -> EnsembleSummary:
    """Run N independent trajectories and reduce scheduling-invariant summaries.

    Trajectory i draws from the Philox stream keyed by (base_seed, i);
    reductions run over fixed blocks of BLOCK trajectories in index order, so
    the result is a pure function of (params, scheme, N, base_seed) for any
    thread count.
    """
    if scheme not in filters.SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    if N < 1:
        raise ValueError("N must be at least 1")
    if scheme == "polarimetry":
        _check_jump_bound(params)
    rho0 = _resolve_rho0(params, rho0)
    n = params.n_steps
    dim = params.space.dim
    if snapshot_indices is None:
        snapshot_indices = default_snapshot_indices(n)
    snapshot_indices = np.asarray(snapshot_indices, dtype=int)

    blocks = [list(range(b, min(b + BLOCK, N))) for b in range(0, N, BLOCK)]

    def run_block(indices):
        col = _ReducedCollector(scheme, n, len(indices), dim, snapshot_indices)
        _simulate_block(scheme, params, base_seed, indices, rho0, col)
        return col

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            cols = list(pool.map(run_block, blocks))
    else:
        cols = [run_block(indices) for indices in blocks]

    names = list(cols[0].sums)
    sums = {name: np.zeros(n + 1) for name in names}
    sumsq = {name: np.zeros(n + 1) for name in names}
    rho_sum = np.zeros((len(snapshot_indices), dim, dim), dtype=complex)
    rho_abs2 = np.zeros((len(snapshot_indices), dim, dim))
    terminals = {}
    term_parts = []
    for col in cols:
        for name in names:
            sums[name] += col.sums[name]
            sumsq[name] += col.sumsq[name]
        rho_sum += col.rho_sum
        rho_abs2 += col.rho_abs2_sum
        if scheme == "polarimetry":
            term_parts.append(
                dict(counts_xi=col.n_xi, counts_eta=col.n_eta, loglik=col.loglik,
                     inn_xi=col.cum_inn_xi, inn_eta=col.cum_inn_eta)
            )
        else:
            term_parts.append(
                dict(y=col.cum_y, qv=col.qv, loglik=col.loglik, inn=col.cum_inn)
            )
    for key in term_parts[0]:
        terminals[key] = np.concatenate([p[key] for p in term_parts])
    if scheme == "polarimetry":
        alpha = params.alpha
        total = terminals["counts_xi"] + terminals["counts_eta"]
        diff = terminals["counts_xi"] - terminals["counts_eta"]
        terminals["y_plus"] = total / alpha**2 if alpha > 0 else total.astype(float)
        terminals["y_minus"] = diff / alpha if alpha > 0 else diff.astype(float)

    series_mean = {name: sums[name] / N for name in names}
    series_sem = {}
    for name in names:
        var = np.maximum(sumsq[name] / N - series_mean[name] ** 2, 0.0)
        series_sem[name] = np.sqrt(var / N)

    mean_rho = rho_sum / N
    ent_var = np.maximum(rho_abs2 / N - np.abs(mean_rho) ** 2, 0.0)
    sem_rho_frob = np.sqrt(ent_var.sum(axis=(1, 2)) / N)

    return EnsembleSummary(
        scheme=scheme,
        N=N,
        base_seed=base_seed,
        params=params,
        t=params.time_grid(),
        snapshot_indices=snapshot_indices,
        mean_rho=mean_rho,
        sem_rho_frob=sem_rho_frob,
        series_mean=series_mean,
        series_sem=series_sem,
        terminals=terminals,
    )
