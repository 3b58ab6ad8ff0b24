"""Conditional state propagation for the three measurement schemes.

Schemes: jump-type balanced polarimetry (two counting channels), diffusive
homodyne detection of the y channel, and the strong-driving weak-coupling
limit filter. Each comes in a normalized and a linear (unnormalized) variant,
propagated in state form; duality trace(rho_t X) = pi_t(X) bridges to the
observable form.

Numerical scheme
----------------
All variants advance by the Euler increment of the linear filtering equation,
evaluated at the stored unit-trace state. The per-step trace factor is the
likelihood-ratio increment: the normalized filter divides it out, the linear
filter accumulates its log (so unnormalized values never underflow). Because
the normalized state is by construction the normalization of the linear one,
the Kallianpur-Striebel identity pi = sigma/sigma(I) holds pathwise to
rounding at any step size; the continuous-time limit of the update is the
usual normalized filter SDE with its innovations term. For the counting
scheme the drift of the constrained (no-count) evolution is already trace
preserving, since the channel operators satisfy L_xi^2 + L_eta^2 = 2, so both
variants literally share it.

Jump handling applies the drift over dt first, then at most one recorded
count; the one-jump error per step is O((alpha^2 dt)^2), and the engine
enforces alpha^2 dt <= 0.1. Diffusive steps are Euler-Maruyama with a
post-step projection onto the positive cone whenever an eigenvalue dips
below the floor. All step functions are pure: they return fresh states and
broadcast over leading batch axes.
"""

from dataclasses import dataclass, replace

import numpy as np

from .spin_algebra import DensityState, make_spin_ops, coherent_x_state, EPS_POS
from .generators import ModelParams

SCHEMES = ("polarimetry", "homodyne", "limit")
MODES = ("normalized", "linear")

JUMP_BOUND = 0.1

# A recorded count whose predicted probability is below this (relative to the
# pre-jump trace) is numerically impossible and flags an inconsistent record.
ZERO_COUNT_TOL = 1e-12


@dataclass(frozen=True)
class ObservationIncrement:
    """One observation step: a count label for polarimetry, dy for diffusive schemes."""

    dt: float
    event: str = None
    dy: float = None

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("observation increment needs dt > 0")
        if self.event not in (None, "xi", "eta"):
            raise ValueError(f"event must be None, 'xi' or 'eta', got {self.event!r}")
        if self.dy is not None and not np.isfinite(self.dy):
            raise ValueError("dy must be finite")

    @classmethod
    def none(cls, dt):
        return cls(dt=dt)

    @classmethod
    def count(cls, channel, dt):
        return cls(dt=dt, event=channel)

    @classmethod
    def diffusive(cls, dy, dt):
        return cls(dt=dt, dy=float(dy))


@dataclass
class FilterState:
    """Conditional state of one scheme/mode at filter time t.

    rho is stored with unit trace in both modes; in linear mode the actual
    unnormalized value is exp(loglik) * rho.
    """

    rho: np.ndarray
    scheme: str
    mode: str
    t: float = 0.0
    loglik: float = 0.0

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        self.rho = np.asarray(self.rho, dtype=complex)

    @classmethod
    def initial(cls, scheme, mode, params: ModelParams, rho0=None) -> "FilterState":
        if rho0 is None:
            rho0 = coherent_x_state(params.space)
        if isinstance(rho0, DensityState):
            rho0 = rho0.rho
        return cls(np.asarray(rho0, dtype=complex), scheme, mode, 0.0, 0.0)

    def normalized_rho(self) -> np.ndarray:
        return self.rho

    def expectation(self, op) -> float:
        return float(np.trace(self.rho @ op).real)


@dataclass(frozen=True)
class FilterKernels:
    """Precomputed F_z-basis arrays; everything but the B term is elementwise."""

    dim: int
    levels: np.ndarray        # F_z eigenvalues, descending
    c: np.ndarray             # cos(kappa m)
    s: np.ndarray             # sin(kappa m)
    lxi2: np.ndarray          # (c+s)^2 diagonal of L_xi^2
    leta2: np.ndarray         # (c-s)^2
    K_xi: np.ndarray          # outer(c+s, c+s): count-update mask
    K_eta: np.ndarray
    E_lind: np.ndarray        # c_i c_j + s_i s_j - 1: finite-drive dephasing mask
    E_limit: np.ndarray       # -(m_i - m_j)^2 / 2: limit dephasing mask
    S_plus: np.ndarray        # s_i + s_j: homodyne coupling mask
    Z_plus: np.ndarray        # m_i + m_j: limit coupling mask
    F_x: np.ndarray
    F_y: np.ndarray
    F_z: np.ndarray
    B: float
    M: float
    sqrt_M: float


def build_kernels(params: ModelParams) -> FilterKernels:
    space = params.space
    m = space.fz_levels()
    c = np.cos(params.kappa * m)
    s = np.sin(params.kappa * m)
    lxi = c + s
    leta = c - s
    f_x, f_y, f_z = make_spin_ops(space)
    return FilterKernels(
        dim=space.dim,
        levels=m,
        c=c,
        s=s,
        lxi2=lxi**2,
        leta2=leta**2,
        K_xi=np.outer(lxi, lxi).astype(complex),
        K_eta=np.outer(leta, leta).astype(complex),
        E_lind=(np.outer(c, c) + np.outer(s, s) - 1.0).astype(complex),
        E_limit=(-0.5 * np.subtract.outer(m, m) ** 2).astype(complex),
        S_plus=np.add.outer(s, s).astype(complex),
        Z_plus=np.add.outer(m, m).astype(complex),
        F_x=f_x,
        F_y=f_y,
        F_z=f_z,
        B=params.B,
        M=params.M,
        sqrt_M=np.sqrt(params.M),
    )


# ---------------------------------------------------------------------------
# array kernels; rho may carry leading batch axes
# ---------------------------------------------------------------------------

def _dagger(rho):
    return np.conj(np.swapaxes(rho, -1, -2))


def _btrace(rho):
    return np.einsum("...ii->...", rho).real


def lindblad_mask_apply(sigma, kern: FilterKernels, a2):
    """Finite-drive L*(sigma); a2 = |f(t)|^2 (scalar or batch-shaped)."""
    out = _scale(a2, kern.E_lind * sigma)
    if kern.B != 0.0:
        out = out - 1j * kern.B * (kern.F_y @ sigma - sigma @ kern.F_y)
    return out


def limit_mask_apply(sigma, kern: FilterKernels):
    out = kern.M * (kern.E_limit * sigma)
    if kern.B != 0.0:
        out = out - 1j * kern.B * (kern.F_y @ sigma - sigma @ kern.F_y)
    return out


def _scale(a, arr):
    a = np.asarray(a)
    if a.ndim == 0:
        return a * arr
    return a[..., None, None] * arr


def pol_drift_raw(sigma, kern: FilterKernels, dt, a2):
    """No-count Euler drift of the counting Zakai equation (linear in sigma).

    sigma + L*(sigma) dt - sum_a (L_a sigma L_a - sigma) |f|^2/2 dt. The
    gauge structure makes this trace preserving; with B = 0 it reduces to
    the identity, so between counts nothing happens.
    """
    both = (kern.K_xi + kern.K_eta) * sigma - 2.0 * sigma
    return sigma + dt * lindblad_mask_apply(sigma, kern, a2) - _scale(0.5 * np.asarray(a2) * dt, both)


def pol_jump_raw(sigma, kern: FilterKernels, channel: str):
    """Count update L_a sigma L_a, unnormalized."""
    mask = kern.K_xi if channel == "xi" else kern.K_eta
    return mask * sigma


def homodyne_raw(sigma, kern: FilterKernels, dt, dy, a_t):
    """Euler increment of the homodyne Zakai equation (linear in sigma)."""
    coupling = _scale(np.asarray(a_t) * np.asarray(dy), kern.S_plus * sigma)
    return sigma + dt * lindblad_mask_apply(sigma, kern, np.asarray(a_t) ** 2) + coupling


def limit_raw(sigma, kern: FilterKernels, dt, dy):
    """Euler increment of the limit Zakai equation (linear in sigma)."""
    coupling = _scale(kern.sqrt_M * np.asarray(dy), kern.Z_plus * sigma)
    return sigma + dt * limit_mask_apply(sigma, kern) + coupling


def min_eig_hermitian(rho):
    """Smallest eigenvalue; closed form for dim 2, LAPACK otherwise."""
    d = rho.shape[-1]
    if d == 2:
        a = rho[..., 0, 0].real
        c = rho[..., 1, 1].real
        h2 = np.abs(rho[..., 0, 1]) ** 2
        mid = 0.5 * (a + c)
        rad = np.sqrt(0.25 * (a - c) ** 2 + h2)
        return mid - rad
    return np.linalg.eigvalsh(rho)[..., 0]


def project_positive(rho, floor: float = EPS_POS):
    """Clip eigenvalues at zero and renormalize wherever the floor is breached."""
    w = min_eig_hermitian(rho)
    if rho.ndim == 2:
        if w >= -floor:
            return rho
        ww, vv = np.linalg.eigh(rho)
        ww = np.clip(ww, 0.0, None)
        out = (vv * ww) @ vv.conj().T
        return out / _btrace(out)
    bad = w < -floor
    if not np.any(bad):
        return rho
    rho = rho.copy()
    sub = rho[bad]
    ww, vv = np.linalg.eigh(sub)
    ww = np.clip(ww, 0.0, None)
    sub = (vv * ww[..., None, :]) @ _dagger(vv)
    sub /= _btrace(sub)[..., None, None]
    rho[bad] = sub
    return rho


def finish_step(raw, project: bool = True):
    """Hermitize, read the trace factor, renormalize, optionally project.

    Returns (state matrix with unit trace, trace factor).
    """
    raw = 0.5 * (raw + _dagger(raw))
    tr = _btrace(raw)
    if np.any(tr <= 0.0):
        raise ValueError("filter trace vanished; record is inconsistent with the model")
    out = raw / (tr[..., None, None] if raw.ndim > 2 else tr)
    if project:
        out = project_positive(out)
    return out, tr


# ---------------------------------------------------------------------------
# public step operations on FilterState
# ---------------------------------------------------------------------------

def polarimetry_rates(state: FilterState, params: ModelParams, t: float = None):
    """Predicted count rates (r_xi, r_eta) of the two polarimeter channels.

    r_a = |f(t)|^2 pi_t(L_a^2) / 2; the two always sum to the full photon
    flux |f(t)|^2 because L_xi^2 + L_eta^2 = 2.
    """
    if t is None:
        t = state.t
    kern = build_kernels(params)
    p = np.einsum("...ii->...i", state.rho).real
    a2 = params.drive_power(t)
    r_xi = 0.5 * a2 * p @ kern.lxi2
    r_eta = 0.5 * a2 * p @ kern.leta2
    return float(r_xi), float(r_eta)


def _check_obs(state, obs, params, diffusive):
    if abs(obs.dt - params.dt) > 1e-12 * max(1.0, params.dt):
        raise ValueError(f"observation dt {obs.dt} does not match params.dt {params.dt}")
    if diffusive and obs.dy is None:
        raise ValueError("diffusive step needs an observation with dy")
    if not diffusive and obs.dy is not None:
        raise ValueError("counting step takes an event, not dy")


def _check_jump_step(a2, dt):
    if a2 * dt > JUMP_BOUND:
        raise ValueError(
            f"alpha^2 dt = {a2 * dt:.4g} exceeds the one-jump bound {JUMP_BOUND}; reduce dt"
        )


def _pol_step(state: FilterState, obs: ObservationIncrement, params: ModelParams) -> FilterState:
    _check_obs(state, obs, params, diffusive=False)
    kern = build_kernels(params)
    a2 = params.drive_power(state.t)
    _check_jump_step(a2, obs.dt)
    raw = pol_drift_raw(state.rho, kern, obs.dt, a2)
    if obs.event is not None:
        before = float(_btrace(raw))
        raw = pol_jump_raw(raw, kern, obs.event)
        if _btrace(raw) <= ZERO_COUNT_TOL * before:
            raise ValueError(
                f"recorded {obs.event}-count has zero probability in the current state"
            )
    rho, tr = finish_step(raw)
    return replace(state, rho=rho, t=state.t + obs.dt, loglik=state.loglik + float(np.log(tr)))


def polarimetry_step(state: FilterState, obs: ObservationIncrement, params: ModelParams) -> FilterState:
    """Advance the normalized counting filter by one step.

    Drift first (which is trace preserving, hence identical to the
    renormalized no-count update), then apply at most one recorded count and
    renormalize. Diagonal states are exact fixed points for B = 0.
    """
    if state.mode != "normalized":
        raise ValueError("polarimetry_step requires a normalized-mode state")
    out = _pol_step(state, obs, params)
    return replace(out, loglik=0.0)


def polarimetry_zakai_step(state: FilterState, obs: ObservationIncrement, params: ModelParams) -> FilterState:
    """Advance the linear (unnormalized) counting filter by one step.

    The stored matrix keeps unit trace; the log of the running trace factor
    accumulates in loglik, so sigma_t = exp(loglik) * rho.
    """
    if state.mode != "linear":
        raise ValueError("polarimetry_zakai_step requires a linear-mode state")
    return _pol_step(state, obs, params)


def _diffusive_step(state, obs, params, scheme):
    _check_obs(state, obs, params, diffusive=True)
    kern = build_kernels(params)
    if scheme == "homodyne":
        raw = homodyne_raw(state.rho, kern, obs.dt, obs.dy, params.alpha_of(state.t))
    else:
        raw = limit_raw(state.rho, kern, obs.dt, obs.dy)
    rho, tr = finish_step(raw)
    return replace(state, rho=rho, t=state.t + obs.dt, loglik=state.loglik + float(np.log(tr)))


def homodyne_step(state: FilterState, obs: ObservationIncrement, params: ModelParams) -> FilterState:
    """Advance the normalized homodyne filter by one step.

    Implemented as the normalization of the linear Euler increment, which
    keeps the Kallianpur-Striebel identity exact per step; its continuous
    limit is the usual normalized filter driven by the innovations
    dy - 2 alpha pi(sin(kappa F_z)) dt.
    """
    if state.mode != "normalized":
        raise ValueError("homodyne_step requires a normalized-mode state")
    out = _diffusive_step(state, obs, params, "homodyne")
    return replace(out, loglik=0.0)


def homodyne_zakai_step(state: FilterState, obs: ObservationIncrement, params: ModelParams) -> FilterState:
    if state.mode != "linear":
        raise ValueError("homodyne_zakai_step requires a linear-mode state")
    return _diffusive_step(state, obs, params, "homodyne")


def limit_step(state: FilterState, obs: ObservationIncrement, params: ModelParams) -> FilterState:
    """Advance the normalized limit filter; innovations are dy - 2 sqrt(M) pi(F_z) dt."""
    if state.mode != "normalized":
        raise ValueError("limit_step requires a normalized-mode state")
    out = _diffusive_step(state, obs, params, "limit")
    return replace(out, loglik=0.0)


def limit_zakai_step(state: FilterState, obs: ObservationIncrement, params: ModelParams) -> FilterState:
    if state.mode != "linear":
        raise ValueError("limit_zakai_step requires a linear-mode state")
    return _diffusive_step(state, obs, params, "limit")


# ---------------------------------------------------------------------------
# record replay
# ---------------------------------------------------------------------------

@dataclass
class FilterRun:
    """Filtered summaries along one observation record."""

    t: np.ndarray
    fx: np.ndarray
    fz: np.ndarray
    fz2: np.ndarray
    var_z: np.ndarray
    purity: np.ndarray
    loglik: np.ndarray
    states: np.ndarray = None


def _moments(rho, kern):
    p = np.einsum("...ii->...i", rho).real
    fx = np.einsum("...ij,ji->...", rho, kern.F_x).real
    fz = p @ kern.levels
    fz2 = p @ kern.levels**2
    purity = np.einsum("...ij,...ji->...", rho, rho).real
    return fx, fz, fz2, fz2 - fz**2, purity


def run_filter(scheme, mode, params: ModelParams, observations, rho0=None, keep_states=False) -> FilterRun:
    """Replay a recorded observation sequence through one filter.

    observations: int array of events per step for polarimetry
    (0 none, 1 xi, 2 eta), or float array of dy increments for the
    diffusive schemes.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    kern = build_kernels(params)
    n = params.n_steps
    observations = np.asarray(observations)
    if observations.shape != (n,):
        raise ValueError(f"expected {n} observation increments, got shape {observations.shape}")
    if rho0 is None:
        rho0 = coherent_x_state(params.space)
    rho = rho0.rho if isinstance(rho0, DensityState) else np.asarray(rho0, dtype=complex)
    dt = params.dt

    shape = (n + 1,)
    fx = np.empty(shape)
    fz = np.empty(shape)
    fz2 = np.empty(shape)
    var_z = np.empty(shape)
    purity = np.empty(shape)
    loglik = np.zeros(shape)
    states = np.empty((n + 1, kern.dim, kern.dim), dtype=complex) if keep_states else None

    fx[0], fz[0], fz2[0], var_z[0], purity[0] = _moments(rho, kern)
    if keep_states:
        states[0] = rho
    ll = 0.0
    for i in range(n):
        t = i * dt
        if scheme == "polarimetry":
            ev = int(observations[i])
            a2 = params.drive_power(t)
            _check_jump_step(a2, dt)
            raw = pol_drift_raw(rho, kern, dt, a2)
            if ev:
                before = float(_btrace(raw))
                raw = pol_jump_raw(raw, kern, "xi" if ev == 1 else "eta")
                if _btrace(raw) <= ZERO_COUNT_TOL * before:
                    raise ValueError(
                        f"recorded count at step {i} has zero probability; "
                        "record is inconsistent with the model"
                    )
        elif scheme == "homodyne":
            raw = homodyne_raw(rho, kern, dt, float(observations[i]), params.alpha_of(t))
        else:
            raw = limit_raw(rho, kern, dt, float(observations[i]))
        rho, tr = finish_step(raw)
        ll += float(np.log(tr))
        fx[i + 1], fz[i + 1], fz2[i + 1], var_z[i + 1], purity[i + 1] = _moments(rho, kern)
        loglik[i + 1] = ll if mode == "linear" else 0.0
        if keep_states:
            states[i + 1] = rho
    return FilterRun(params.time_grid(), fx, fz, fz2, var_z, purity, loglik, states)
