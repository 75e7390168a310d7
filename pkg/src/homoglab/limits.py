"""Limit covariance, fluctuation assembly, rate fits and limit-variance oracles.

``Lambda`` is the long-run covariance of the centred bracket process::

    Lambda = int_0^inf E[Xi(s) (x) Xi(0) + Xi(0) (x) Xi(s)] ds
           = int Q' q Q' rho dy,            L Q = <a>^0.

Both routes give the variance rate of ``int_0^t Xi``; for an OU driver with
``Xi = y`` the value is 2.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.integrate import cumulative_simpson, simpson, trapezoid
from scipy.interpolate import CubicSpline

from . import _backend
from .cells import CorrectorSet, FluctuationSeries
from .media import DiffusionSpec, DriverPath, InvariantDensity, simulate_driver_batch
from .solvers import SpaceTimeField, second_difference
from .torus import GridField, interpolate

Array = np.ndarray


@dataclass(frozen=True)
class LimitCovariance:
    Lambda: Array
    method: str
    stderr: Array | None = None
    meta: dict = field(default_factory=dict)

    def scalar(self) -> float:
        return float(self.Lambda.reshape(-1)[0])


def _check_psd(L: Array, tol: float = 1e-10) -> None:
    if np.max(np.abs(L - L.T), initial=0.0) > tol * max(1.0, np.max(np.abs(L), initial=0.0)):
        raise ValueError("Lambda is not symmetric")


def sqrt_psd(L, tol: float = 1e-10) -> Array:
    """Symmetric PSD square root; eigenvalues in ``[-tol, 0)`` are clamped to zero."""
    L = np.atleast_2d(np.asarray(L, dtype=float))
    _check_psd(L, tol)
    w, V = np.linalg.eigh(0.5 * (L + L.T))
    if w.size and w.min() < -tol:
        raise ValueError(f"matrix is not PSD (eigenvalue {w.min():.3e})")
    w = np.clip(w, 0.0, None)
    return (V * np.sqrt(w)) @ V.T


def _flatten_series(values) -> Array:
    v = np.asarray(values, dtype=float)
    if v.ndim == 1:
        return v[:, None]
    return v.reshape(v.shape[0], -1)


# ---------------------------------------------------------------------------
# Poisson route


def lambda_from_poisson_1d(spec: DiffusionSpec, bracket, density: InvariantDensity,
                           solvability_tol: float = 1e-6) -> LimitCovariance:
    """Solve ``L Q = <a>^0`` component-wise by quadrature and return ``int Q' q Q' rho``.

    ``Q'(y) = 2 F(y) / (q rho)`` with ``F(y) = int_{-Y}^y <a>^0 rho``. ``F`` is
    accumulated from the left up to the mode of ``rho`` and from the right
    beyond it, which keeps the tail quotient ``F / rho`` accurate.
    """
    vals = bracket.values if isinstance(bracket, FluctuationSeries) else bracket
    f = _flatten_series(vals)
    y, rho = density.y, density.rho
    if f.shape[0] != y.size:
        raise ValueError("bracket and density live on different y-grids")
    total = trapezoid(f * rho[:, None], y, axis=0)
    if np.any(np.abs(total) > solvability_tol):
        raise ValueError(f"solvability violated: int <a>^0 rho = {total}")
    fr = f * rho[:, None]
    left = cumulative_simpson(fr, x=y, axis=0, initial=0.0)
    right = -cumulative_simpson(fr[::-1], x=-y[::-1], axis=0, initial=0.0)[::-1]
    mode = int(np.argmax(rho))
    F = np.where((np.arange(y.size) <= mode)[:, None], left, right)
    q = spec.q(y)
    qr = q * rho
    safe = qr > 0
    Qp = np.where(safe[:, None], 2.0 * F / np.where(safe, qr, 1.0)[:, None], 0.0)
    integrand = np.einsum("ya,yb->yab", Qp, Qp) * qr[:, None, None]
    Lam = simpson(integrand, x=y, axis=0)
    Lam = 0.5 * (Lam + Lam.T)
    _check_psd(Lam)
    return LimitCovariance(Lam, "poisson", None,
                           {"ny": int(y.size), "Y": float(y[-1]), "solvability": total.tolist()})


# ---------------------------------------------------------------------------
# correlation (Green-Kubo) route


def _cross_cov(X: Array, nlag: int) -> Array:
    """``C[tau, a, b] = mean_t X_a(t + tau) X_b(t)`` for ``tau < nlag`` (no demeaning)."""
    N, k = X.shape
    nfft = 1 << int(np.ceil(np.log2(2 * N)))
    F = np.fft.rfft(X, n=nfft, axis=0)
    prod = F[:, :, None] * np.conj(F[:, None, :])
    full = np.fft.irfft(prod, n=nfft, axis=0)[:nlag]
    return full / (N - np.arange(nlag))[:, None, None]


def relaxation_time(X: Array, dt: float) -> float:
    """Exponential decay time of the normalised trace autocovariance."""
    X = _flatten_series(X)
    nlag = max(8, min(X.shape[0] // 10, 4096))
    C = _cross_cov(X, nlag)
    r = np.einsum("taa->t", C)
    if r[0] <= 0:
        return 0.0
    r = r / r[0]
    below = np.flatnonzero(r < np.exp(-2.0))
    stop = int(below[0]) if below.size else nlag
    stop = max(stop, 3)
    t = dt * np.arange(stop)
    good = r[:stop] > 0
    slope = np.polyfit(t[good], np.log(r[:stop][good]), 1)[0]
    return float(-1.0 / slope) if slope < 0 else float(stop * dt)


def _gk(X: Array, dt: float, nlag: int) -> Array:
    C = _cross_cov(X, nlag)
    sym = C + np.swapaxes(C, 1, 2)
    return trapezoid(sym, dx=dt, axis=0)


def lambda_from_correlation(series, max_lag: float | None = None, dt: float | None = None,
                            n_batches: int = 20, relax_multiple: float = 5.0) -> LimitCovariance:
    """Green-Kubo estimate from one long stationary series of centred fluctuations.

    ``series`` is a ``FluctuationSeries`` of kind ``"time"`` or an array with
    sample spacing ``dt``. The known zero mean is used (no demeaning).
    ``max_lag`` defaults to ``relax_multiple`` fitted relaxation times. The
    standard error comes from batch means over ``n_batches`` blocks.
    """
    if isinstance(series, FluctuationSeries):
        if series.kind != "time":
            raise ValueError("correlation route needs a time series")
        dt = float(series.index[1] - series.index[0])
        X = _flatten_series(series.values)
    else:
        if dt is None:
            raise ValueError("dt is required for raw arrays")
        X = _flatten_series(series)
    N = X.shape[0]
    horizon = N * dt
    tau = None
    if max_lag is None:
        tau = relaxation_time(X, dt)
        max_lag = max(relax_multiple * tau, 2 * dt)
    if horizon < 10 * max_lag:
        raise ValueError(f"horizon {horizon:g} shorter than 10 x max_lag = {10 * max_lag:g}")
    nlag = int(round(max_lag / dt)) + 1
    Lam = _gk(X, dt, nlag)
    Lam = 0.5 * (Lam + Lam.T)
    bsize = N // n_batches
    se = None
    if n_batches >= 2 and bsize >= 2 * nlag:
        est = np.stack([_gk(X[b * bsize:(b + 1) * bsize], dt, nlag) for b in range(n_batches)])
        se = est.std(axis=0, ddof=1) / np.sqrt(n_batches)
    return LimitCovariance(Lam, "correlation", se,
                           {"max_lag": float(max_lag), "relaxation_time": tau,
                            "horizon": float(horizon), "n_batches": n_batches})


# ---------------------------------------------------------------------------
# fluctuation assembly


def assemble_U(u_eps: SpaceTimeField, u0: SpaceTimeField, cascade: list[SpaceTimeField],
               eps: float, alpha: float) -> SpaceTimeField:
    """``U = eps^{-alpha/2} (u_eps - u0 - sum_j eps^{j delta} u^j)`` with ``delta = 2 - alpha``."""
    delta = 2.0 - alpha
    s = eps ** (-alpha / 2)
    coeffs = [s, -s] + [-s * eps ** (j * delta) for j in range(1, len(cascade) + 1)]
    return u_eps.combine(coeffs, [u_eps, u0, *cascade], meta={"kind": "U", "eps": eps, "alpha": alpha})


class CorrectorEvaluator:
    """``chi^j(x/eps, y)`` on box nodes, interpolated spectrally in ``z`` and by splines in ``y``."""

    def __init__(self, cs: CorrectorSet, nodes: Array, eps: float):
        if cs.setting != "C" or cs.grid.dim != 1:
            raise ValueError("needs a one-dimensional diffusive corrector set")
        z = np.mod(nodes / eps, 1.0)
        zq = np.round(z * cs.grid.n * 1e6) / (cs.grid.n * 1e6)
        self.uz, self.inv = np.unique(zq, return_inverse=True)
        self.splines = []
        for chi in cs.chi:
            table = np.stack([interpolate(GridField(cs.grid, c[:, 0]), self.uz) for c in chi])
            self.splines.append(CubicSpline(cs.index, table, axis=0))

    def __call__(self, j: int, y: float) -> Array:
        return self.splines[j](y)[self.inv]


def corrector_layer(fields: list[SpaceTimeField], cs: CorrectorSet, driver: DriverPath,
                    eps: float, alpha: float, j: int, k: int,
                    evaluator: CorrectorEvaluator | None = None) -> SpaceTimeField:
    """``chi^j(x/eps, xi_{t/eps^alpha}) d_x u^k`` on the stored rows."""
    ref = fields[k]
    ev = evaluator or CorrectorEvaluator(cs, ref.domain.nodes, eps)
    ys = driver.value_at(ref.times / eps**alpha)
    grad = ref.gradient()
    vals = np.stack([ev(j, y) for y in ys]) * grad
    return SpaceTimeField(ref.domain, ref.dt, vals, ref.t0, {"layer": [j, k]}, ref.boundary_ok)


def assemble_V(u_eps: SpaceTimeField, fields: list[SpaceTimeField], cs: CorrectorSet,
               driver: DriverPath, eps: float, alpha: float) -> SpaceTimeField:
    """Full ansatz: subtract ``eps^{k delta}(u^k + sum_j eps^{j delta + 1} chi^j grad u^k)``."""
    delta = 2.0 - alpha
    J = len(fields) - 1
    if cs.order < J:
        raise ValueError("corrector set is shorter than the cascade")
    ev = CorrectorEvaluator(cs, u_eps.domain.nodes, eps)
    s = eps ** (-alpha / 2)
    coeffs = [s]
    others = [u_eps]
    for k in range(J + 1):
        coeffs.append(-s * eps ** (k * delta))
        others.append(fields[k])
        for j in range(J - k + 1):
            coeffs.append(-s * eps ** (k * delta + j * delta + 1))
            others.append(corrector_layer(fields, cs, driver, eps, alpha, j, k, ev))
    return u_eps.combine(coeffs, others, meta={"kind": "V", "eps": eps, "alpha": alpha})


# ---------------------------------------------------------------------------
# rate fits


@dataclass(frozen=True)
class RateFit:
    eps: Array
    norms: Array
    slope: float
    intercept: float
    residual: float
    stderr: float = float("nan")


def fit_rate(eps_list, norms) -> RateFit:
    """Least-squares slope of ``log(norm)`` against ``log(eps)``."""
    eps = np.asarray(eps_list, dtype=float)
    nv = np.asarray(norms, dtype=float)
    if eps.size < 3 or eps.size != nv.size:
        raise ValueError("need at least three (eps, norm) pairs")
    if np.any(nv <= 0) or np.any(eps <= 0):
        raise ValueError("norms and eps must be positive")
    x, y = np.log(eps), np.log(nv)
    A = np.column_stack([x, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    res = y - A @ coef
    dof = max(x.size - 2, 1)
    s2 = float(res @ res) / dof
    se = np.sqrt(s2 / np.sum((x - x.mean()) ** 2))
    return RateFit(eps, nv, float(coef[0]), float(coef[1]), float(np.sqrt(np.mean(res**2))), float(se))


# ---------------------------------------------------------------------------
# limit-variance oracle


def functional_variance_spde(psi, Lambda_sqrt, u0: SpaceTimeField, a_eff,
                             n_quad: int = 41, backend: str | None = None) -> float:
    """``Var <v0, psi>`` for the limit SPDE by the Ito isometry.

    ``Var = int_0^T g(s)^2 ds`` with ``g(s) = int_s^T <S(t-s) f(s), psi(t)> dt``
    and ``f = Lambda^{1/2} u0_xx``. Each ``g(s_q)`` is one deterministic
    Crank-Nicolson solve with ``a_eff`` started at ``s_q`` on the rows of ``u0``.
    """
    kern = _backend.get(backend)
    lam = float(np.asarray(Lambda_sqrt, dtype=float).reshape(-1)[0])
    if np.asarray(Lambda_sqrt).size != 1:
        raise ValueError("only d = 1 is supported")
    dom = u0.domain
    R = u0.values.shape[0]
    psi_v = np.asarray(psi(dom.nodes[None, :], u0.times[:, None]) if callable(psi) else psi,
                       dtype=float)
    if lam == 0.0:
        return 0.0
    f = lam * second_difference(u0.values, dom.dx)
    a = float(np.asarray(a_eff).reshape(-1)[0])
    af = np.full(dom.m, a)
    qs = np.unique(np.round(np.linspace(0, R - 1, n_quad)).astype(int))
    g = np.empty(qs.size)
    for i, q in enumerate(qs):
        v = np.ascontiguousarray(f[q, 1:-1]).copy()
        pairs = [np.dot(v, psi_v[q, 1:-1]) * dom.dx]
        for k in range(q, R - 1):
            kern.theta_step(v, af, dom.dx, u0.dt, 0.5, None)
            pairs.append(np.dot(v, psi_v[k + 1, 1:-1]) * dom.dx)
        g[i] = trapezoid(pairs, dx=u0.dt) if len(pairs) > 1 else 0.0
    s = u0.times[qs]
    return float(simpson(g**2, x=s))


# ---------------------------------------------------------------------------
# invariance principle probe


@dataclass(frozen=True)
class InvarianceRow:
    eps: float
    T: float
    var: float
    stderr: float
    target: float
    replicates: int
    windows: int


def zeta_windows(bracket_values: Array, h: float, a_eff: float, window_steps: int,
                 scale: float) -> Array:
    """``scale * int [bracket - a_eff] dr`` over consecutive non-overlapping windows."""
    b = np.asarray(bracket_values, dtype=float)[:-1] - a_eff
    nw = b.size // window_steps
    return scale * h * b[: nw * window_steps].reshape(nw, window_steps).sum(axis=1)


def invariance_probe(bracket_fn, spec: DiffusionSpec, eps_list, alpha: float, T: float,
                     replicates: int, base_seed: int, h: float = 0.01, windows: int = 64,
                     a_eff: float = 0.0, Lambda: float | None = None,
                     backend: str | None = None) -> list[InvarianceRow]:
    """``Var(eps^{alpha/2} zeta(T / eps^alpha))`` per ``eps`` with replicate standard errors.

    ``bracket_fn(y)`` returns the uncentred slice flux ``<a>^0`` at driver
    values; ``a_eff`` is subtracted (pass 0 for an already centred bracket).
    Replicate ``i`` uses one stationary path with seed ``base_seed + i``,
    split into ``windows`` independent-ish windows of length ``T / eps^alpha``.
    """
    if replicates < 16:
        raise ValueError(f"invariance probe needs at least 16 replicates, got {replicates}")
    rows = []
    for eps in eps_list:
        steps = int(round(T / eps**alpha / h))
        horizon = steps * windows * h
        per = []
        for i in range(replicates):
            p = simulate_driver_batch(spec, horizon, h, [base_seed + i], backend=backend)[0]
            z = zeta_windows(bracket_fn(p.values), h, a_eff, steps, eps ** (alpha / 2))
            per.append(np.mean(z**2))
        per = np.asarray(per)
        rows.append(InvarianceRow(float(eps), float(T), float(per.mean()),
                                  float(per.std(ddof=1) / np.sqrt(replicates)),
                                  float("nan") if Lambda is None else float(Lambda) * T,
                                  replicates, windows))
    return rows


# ---------------------------------------------------------------------------
# comparison tables


COMPARISON_COLUMNS = ("quantity", "method", "value", "stderr", "tolerance", "pass")


def write_comparison_csv(rows, path) -> None:
    """Rows are mappings with the ``COMPARISON_COLUMNS`` keys; floats get 17 significant digits."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(COMPARISON_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in COMPARISON_COLUMNS])


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    return v
