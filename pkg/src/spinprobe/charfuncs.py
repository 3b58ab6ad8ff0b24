"""Characteristic functionals of the output processes, analytic and empirical.

Because F_z is conserved, each functional decouples over the F_z levels:
conditioned on level m the counting record is a pair of independent Poisson
streams and the diffusive records are Brownian with constant drift, so the
coupled moment hierarchies reduce to one scalar exponent per level. The
analytic value is the p-weighted mixture over levels, with p the diagonal of
the initial state in the F_z basis. Test functions are piecewise constant on
the step grid, so every time integral is a finite sum and the pairing with a
record has no quadrature error.
"""

from dataclasses import dataclass

import numpy as np

PROCESSES = ("plus", "minus", "homodyne", "limit")


@dataclass(frozen=True)
class TestFunction:
    """Piecewise-constant real function on [0, T], aligned with the step grid."""

    __test__ = False  # keep pytest from collecting this as a test case

    values: np.ndarray
    dt: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1 or v.size == 0 or not np.all(np.isfinite(v)):
            raise ValueError("test function needs a 1-d array of finite values")
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, k, n_steps, dt):
        return cls(np.full(n_steps, float(k)), dt)

    @property
    def horizon(self) -> float:
        return self.values.size * self.dt


@dataclass
class CharFunc:
    """Characteristic-functional values on a sweep of constant test values."""

    k: np.ndarray
    t: float
    values: np.ndarray
    stderr: np.ndarray = None

    def __post_init__(self):
        self.k = np.atleast_1d(np.asarray(self.k, dtype=float))
        self.values = np.atleast_1d(np.asarray(self.values, dtype=complex))


def _diag_probs(p_or_rho) -> np.ndarray:
    p = np.asarray(p_or_rho)
    if p.ndim == 2:
        p = np.diagonal(p).real
    p = p.real.astype(float)
    if np.any(p < -1e-12) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("level probabilities must be nonnegative and sum to 1")
    return np.clip(p, 0.0, None)


def _level_rate(process, k, params=None, M=None, levels=None):
    """Exponent rate per F_z level for a constant test value k.

    plus      alpha^2 (exp(-i k / alpha^2) - 1), level independent
    minus     alpha^2 (cos(k/alpha) - 1) - i alpha^2 sin(k/alpha) sin(2 kappa m)
    homodyne  -k^2/2 - 2 i k alpha sin(kappa m)
    limit     -k^2/2 - 2 i k sqrt(M) m
    """
    k = np.asarray(k, dtype=float)
    if process == "plus":
        a2 = params.alpha**2
        rate = a2 * (np.exp(-1j * k / a2) - 1.0)
        return rate[..., None] * np.ones(len(levels))
    if process == "minus":
        a = params.alpha
        s2 = np.sin(2.0 * params.kappa * levels)
        return (
            a**2 * (np.cos(k / a) - 1.0)[..., None]
            - 1j * a**2 * np.sin(k / a)[..., None] * s2
        )
    if process == "homodyne":
        a = params.alpha
        drift = a * np.sin(params.kappa * levels)
        return (-0.5 * k**2)[..., None] - 2j * k[..., None] * drift
    if process == "limit":
        drift = np.sqrt(M) * levels
        return (-0.5 * k**2)[..., None] - 2j * k[..., None] * drift
    raise ValueError(f"unknown process {process!r}; expected one of {PROCESSES}")


def _mixture(rate_exponents, p):
    return np.exp(rate_exponents) @ p


def charfunc_analytic(process, k, params=None, p=None, M=None, t=None) -> CharFunc:
    """Analytic characteristic functional on a sweep of constant test values.

    p is required for the level-dependent processes (minus, homodyne, limit);
    M is required for the limit process and defaults to params.M when params
    is given.
    """
    if process not in PROCESSES:
        raise ValueError(f"unknown process {process!r}; expected one of {PROCESSES}")
    if t is None:
        t = params.T
    if process == "limit":
        if M is None:
            M = params.M
        levels = _limit_levels(p)
        p_vec = _diag_probs(p)
    elif process == "plus":
        levels = np.zeros(1)
        p_vec = np.ones(1)
    else:
        levels = params.space.fz_levels()
        p_vec = _diag_probs(p)
        if p_vec.size != levels.size:
            raise ValueError("probability vector length does not match the spin dimension")
    k_arr = np.atleast_1d(np.asarray(k, dtype=float))
    rates = _level_rate(process, k_arr, params=params, M=M, levels=levels)
    return CharFunc(k_arr, float(t), _mixture(t * rates, p_vec))


def _limit_levels(p):
    p = np.asarray(p)
    dim = p.shape[0]
    j = (dim - 1) / 2.0
    return j - np.arange(dim)


def charfunc_analytic_path(process, kfun: TestFunction, params=None, p=None, M=None) -> complex:
    """Analytic functional for one piecewise-constant test function."""
    if process == "limit":
        if M is None:
            M = params.M
        levels = _limit_levels(p)
        p_vec = _diag_probs(p)
    elif process == "plus":
        levels = np.zeros(1)
        p_vec = np.ones(1)
    else:
        levels = params.space.fz_levels()
        p_vec = _diag_probs(p)
    rates = _level_rate(process, kfun.values, params=params, M=M, levels=levels)
    exponents = kfun.dt * rates.sum(axis=0)
    return complex(np.exp(exponents) @ p_vec)


def charfunc_plus_analytic(k, params, t=None) -> CharFunc:
    """Scaled total-count process: Phi+(k,t) = exp(t alpha^2 (e^{-ik/alpha^2}-1))."""
    return charfunc_analytic("plus", k, params=params, t=t)


def charfunc_minus_analytic(k, params, p, t=None) -> CharFunc:
    """Scaled count-difference process, mixture over F_z levels."""
    return charfunc_analytic("minus", k, params=params, p=p, t=t)


def charfunc_homodyne_analytic(k, params, p, t=None) -> CharFunc:
    """Homodyne record: Gaussian mixture with drifts 2 alpha sin(kappa m)."""
    return charfunc_analytic("homodyne", k, params=params, p=p, t=t)


def charfunc_limit_analytic(k, M, p, t) -> CharFunc:
    """Limit record: Gaussian mixture with drifts 2 sqrt(M) m."""
    return charfunc_analytic("limit", k, M=M, p=p, t=t)


def pair_integral(record, process, kfun: TestFunction) -> float:
    """Pathwise pairing integral(k dY) of a record's output process.

    Counting records pair against the jump increments, diffusive records
    against the photocurrent increments; both are exact finite sums for
    piecewise-constant k.
    """
    if process in ("plus", "minus"):
        series = record.y_plus if process == "plus" else record.y_minus
        if series is None:
            raise ValueError(f"record of scheme {record.scheme!r} has no {process} series")
    elif process == "homodyne":
        series = record.y
    elif process == "limit":
        series = record.y
    else:
        raise ValueError(f"unknown process {process!r}")
    dY = np.diff(series)
    if dY.size != kfun.values.size:
        raise ValueError("test function grid does not match the record grid")
    return float(kfun.values @ dY)


def _terminal_values(source, process):
    from .trajectory import EnsembleSummary  # local import to avoid a cycle

    if isinstance(source, EnsembleSummary):
        terms = source.terminals
        key = {"plus": "y_plus", "minus": "y_minus", "homodyne": "y", "limit": "y"}[process]
        if key not in terms:
            raise ValueError(f"ensemble of scheme {source.scheme!r} has no {process} terminals")
        return np.asarray(terms[key], dtype=float)
    values = []
    for rec in source:
        if process == "plus":
            values.append(rec.y_plus[-1])
        elif process == "minus":
            values.append(rec.y_minus[-1])
        else:
            values.append(rec.y[-1])
    return np.asarray(values, dtype=float)


def empirical_charfunc(source, process, k) -> CharFunc:
    """Empirical functional (1/N) sum exp(-i k Y_T) over an ensemble.

    source is an EnsembleSummary or a sequence of TrajectoryRecords; k is a
    sweep of constant test values. The standard error per k follows from
    |exp(i theta)| = 1: se = sqrt((1 - |Phi|^2) / N).
    """
    y = _terminal_values(source, process)
    n = y.size
    if n == 0:
        raise ValueError("empty ensemble")
    k_arr = np.atleast_1d(np.asarray(k, dtype=float))
    z = np.exp(-1j * np.outer(k_arr, y))
    phi = z.mean(axis=1)
    se = np.sqrt(np.maximum(1.0 - np.abs(phi) ** 2, 0.0) / n)
    t = None
    from .trajectory import EnsembleSummary

    if isinstance(source, EnsembleSummary):
        t = float(source.t[-1])
    else:
        t = float(source[0].t[-1])
    return CharFunc(k_arr, t, phi, se)


def empirical_charfunc_path(records, process, kfun: TestFunction) -> complex:
    """Empirical functional of one piecewise-constant test function."""
    vals = [np.exp(-1j * pair_integral(rec, process, kfun)) for rec in records]
    if not vals:
        raise ValueError("empty ensemble")
    return complex(np.mean(vals))


@dataclass
class ConvergenceStudy:
    """Sup-norm distances to the limit functional along an alpha sweep."""

    alphas: np.ndarray
    kappas: np.ndarray
    d_polarimetry: np.ndarray
    d_homodyne: np.ndarray
    rate_polarimetry: float
    rate_homodyne: float


def convergence_study(M, alphas, k, T, p, j=None) -> ConvergenceStudy:
    """Distance of the finite-drive functionals from the limit as alpha grows.

    Each alpha uses kappa = sqrt(M)/alpha so the measurement strength stays
    fixed; d(alpha) = sup_k |Phi_alpha(k,T) - Phi_limit(k,T)| is evaluated
    from the analytic forms on the sweep k. The fitted rate is the slope of
    -log d against log alpha (2.0 means d ~ alpha^-2). No Monte Carlo enters.
    """
    from .generators import ModelParams

    alphas = np.asarray(alphas, dtype=float)
    if alphas.size == 0 or np.any(np.diff(alphas) <= 0):
        raise ValueError("alphas must be a nonempty increasing sequence")
    p = np.asarray(p, dtype=float)
    if j is None:
        j = (p.shape[0] - 1) / 2.0
    k_arr = np.atleast_1d(np.asarray(k, dtype=float))
    limit_vals = charfunc_limit_analytic(k_arr, M, p, T).values
    d_pol = np.empty(alphas.size)
    d_hom = np.empty(alphas.size)
    kappas = np.sqrt(M) / alphas
    for i, alpha in enumerate(alphas):
        params = ModelParams.build(j=j, alpha=float(alpha), M=M, T=T, dt=T)
        d_pol[i] = np.max(np.abs(charfunc_minus_analytic(k_arr, params, p, T).values - limit_vals))
        d_hom[i] = np.max(np.abs(charfunc_homodyne_analytic(k_arr, params, p, T).values - limit_vals))

    def fit_rate(d):
        if alphas.size < 2 or np.any(d <= 0):
            return float("nan")
        slope = np.polyfit(np.log(alphas), np.log(d), 1)[0]
        return float(-slope)

    return ConvergenceStudy(alphas, kappas, d_pol, d_hom, fit_rate(d_pol), fit_rate(d_hom))
