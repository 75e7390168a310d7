"""Time randomness: the driving diffusion, coefficient models built on it,
Malliavin derivative paths, the invariant density and the 1D Condition (S) check.

Generator convention used throughout the package::

    L = 1/2 q(y) d^2/dy^2 + b(y) d/dy,      q = sigma^2.

Only scalar drivers (n = 1) are supported.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import cumulative_simpson, trapezoid

from . import _backend
from .torus import GridField, TorusGrid

Array = np.ndarray


class ModelError(ValueError):
    """Raised for ill-posed coefficient or driver configurations."""


# ---------------------------------------------------------------------------
# driver diffusion


@dataclass(frozen=True)
class DiffusionSpec:
    """Scalar diffusion ``d xi = b(xi) dt + sigma(xi) dB``.

    ``drift``/``sigma`` must accept numpy arrays. Derivatives are optional;
    central differences are used when they are missing. ``ou`` holds
    ``(theta, sigma, mean)`` when the process is Ornstein-Uhlenbeck, which
    switches path simulation to the exact Gaussian transition.
    """

    drift: Callable[[Array], Array]
    sigma: Callable[[Array], Array]
    ddrift: Callable[[Array], Array] | None = None
    dsigma: Callable[[Array], Array] | None = None
    y_range: float = 8.0
    ou: tuple[float, float, float] | None = None
    name: str = "custom"
    n: int = 1

    @classmethod
    def ornstein_uhlenbeck(cls, theta: float = 1.0, sigma: float = np.sqrt(2.0),
                           mean: float = 0.0, y_range: float = 8.0) -> DiffusionSpec:
        return cls(
            drift=lambda y: -theta * (np.asarray(y, dtype=float) - mean),
            sigma=lambda y: np.full(np.shape(y), float(sigma)),
            ddrift=lambda y: np.full(np.shape(y), -float(theta)),
            dsigma=lambda y: np.zeros(np.shape(y)),
            y_range=y_range,
            ou=(float(theta), float(sigma), float(mean)),
            name=f"ou(theta={theta:g},sigma={sigma:g},mean={mean:g})",
        )

    def q(self, y) -> Array:
        s = np.asarray(self.sigma(y), dtype=float)
        return s * s

    def drift_derivative(self, y) -> Array:
        if self.ddrift is not None:
            return np.asarray(self.ddrift(y), dtype=float)
        return _central(self.drift, y)

    def sigma_derivative(self, y) -> Array:
        if self.dsigma is not None:
            return np.asarray(self.dsigma(y), dtype=float)
        return _central(self.sigma, y)

    def working_grid(self, n: int = 1025) -> Array:
        return np.linspace(-self.y_range, self.y_range, n)

    def is_degenerate(self) -> bool:
        return bool(np.all(np.asarray(self.sigma(self.working_grid())) == 0.0))

    def check_elliptic(self) -> None:
        s = np.abs(np.asarray(self.sigma(self.working_grid()), dtype=float))
        if np.all(s == 0.0):
            return
        if np.min(s) <= 0.0:
            raise ModelError("dispersion sigma vanishes on the working range (not elliptic)")


def _central(fn, y, step: float = 1e-5) -> Array:
    y = np.asarray(y, dtype=float)
    return (np.asarray(fn(y + step)) - np.asarray(fn(y - step))) / (2 * step)


@dataclass(frozen=True)
class DriverPath:
    """Driver sampled at ``t_k = k h``; ``noise`` are the standard normals behind each step."""

    h: float
    values: Array
    seed: int
    noise: Array

    @property
    def horizon(self) -> float:
        return (self.values.size - 1) * self.h

    @property
    def times(self) -> Array:
        return np.arange(self.values.size) * self.h

    def value_at(self, s) -> Array:
        """Piecewise-constant read-out on ``[k h, (k+1) h)``."""
        idx = np.floor(np.asarray(s, dtype=float) / self.h + 1e-9).astype(int)
        return self.values[np.clip(idx, 0, self.values.size - 1)]


def _n_steps(horizon: float, h: float) -> int:
    return int(np.ceil(horizon / h - 1e-9))


def _check_step(horizon: float, h: float) -> None:
    if not h > 0:
        raise ValueError(f"driver step must be positive, got {h}")
    if h >= 1.0:
        raise ValueError(f"driver step h={h} is too coarse (desk-scale guard requires h < 1)")
    if horizon < h:
        raise ValueError(f"horizon {horizon} shorter than one step {h}")


def _initial_value(spec: DiffusionSpec, rng: np.random.Generator) -> float:
    if spec.ou is not None:
        theta, sig, mu = spec.ou
        return mu + sig / np.sqrt(2 * theta) * rng.standard_normal()
    dens = invariant_density_1d(spec, spec.working_grid(4097))
    return float(dens.sample(rng.random()))


def simulate_driver_batch(spec: DiffusionSpec, horizon: float, h: float, seeds,
                          x0=None, backend: str | None = None) -> list[DriverPath]:
    """Simulate one path per seed; row ``i`` depends only on ``seeds[i]``.

    Exact Gaussian transitions for Ornstein-Uhlenbeck drivers, Euler-Maruyama
    otherwise (vectorised across paths).
    """
    _check_step(horizon, h)
    spec.check_elliptic()
    nsteps = _n_steps(horizon, h)
    seeds = [int(s) for s in seeds]
    if x0 is None and spec.is_degenerate():
        raise ModelError("degenerate driver (sigma = 0) has no invariant law; pass x0")
    starts, noises = [], []
    for s in seeds:
        rng = np.random.default_rng(s)
        starts.append(float(x0) if x0 is not None else _initial_value(spec, rng))
        noises.append(rng.standard_normal(nsteps))

    paths = []
    if spec.ou is not None:
        theta, sig, mu = spec.ou
        kern = _backend.get(backend)
        if theta > 0:
            decay = np.exp(-theta * h)
            sd = sig * np.sqrt(-np.expm1(-2 * theta * h) / (2 * theta))
        else:
            decay, sd = 1.0, sig * np.sqrt(h)
        for s, x, z in zip(seeds, starts, noises):
            vals = kern.ou_recursion(x - mu, decay, sd * z) + mu
            paths.append(DriverPath(h, np.asarray(vals), s, z))
        return paths

    x = np.array(starts)
    z = np.stack(noises) if noises else np.empty((0, nsteps))
    out = np.empty((len(seeds), nsteps + 1))
    out[:, 0] = x
    sqh = np.sqrt(h)
    for k in range(nsteps):
        x = x + spec.drift(x) * h + spec.sigma(x) * sqh * z[:, k]
        out[:, k + 1] = x
    return [DriverPath(h, out[i], s, z[i]) for i, s in enumerate(seeds)]


def simulate_driver(spec: DiffusionSpec, horizon: float, h: float, seed: int,
                    x0=None, backend: str | None = None) -> DriverPath:
    return simulate_driver_batch(spec, horizon, h, [seed], x0=x0, backend=backend)[0]


# ---------------------------------------------------------------------------
# Malliavin derivative of the driver


@dataclass(frozen=True)
class MalliavinPath:
    """``Z_t = D_r xi_t`` on the driver grid for ``t >= r`` (zero before ``r``)."""

    r: float
    h: float
    values: Array
    path: DriverPath = field(repr=False)

    @property
    def times(self) -> Array:
        return self.r + np.arange(self.values.size) * self.h

    def value_at(self, t) -> Array:
        t = np.asarray(t, dtype=float)
        idx = np.floor((t - self.r) / self.h + 1e-9).astype(int)
        vals = self.values[np.clip(idx, 0, self.values.size - 1)]
        return np.where(t < self.r, 0.0, vals)


def simulate_malliavin(spec: DiffusionSpec, path: DriverPath, r: float) -> MalliavinPath:
    """Integrate the linear SDE for ``D_r xi`` along ``path``.

    Uses the driver's own Brownian increments and the exponential
    (log-Euler) step ``Z <- Z exp((b' - s'^2/2) h + s' dB)``, which is exact
    when ``b'`` and ``s'`` are frozen over the step.
    """
    h = path.h
    kr = r / h
    k0 = int(round(kr))
    if r < 0 or r > path.horizon + 1e-12:
        raise ValueError(f"r={r} outside the path support [0, {path.horizon}]")
    if abs(kr - k0) > 1e-8:
        raise ValueError(f"r={r} is not on the driver grid (h={h})")
    xi = path.values[k0:-1]
    db = spec.drift_derivative(xi)
    ds = spec.sigma_derivative(xi)
    dB = np.sqrt(h) * path.noise[k0:]
    loginc = (db - 0.5 * ds**2) * h + ds * dB
    z0 = float(spec.sigma(np.asarray(path.values[k0])))
    vals = z0 * np.exp(np.concatenate(([0.0], np.cumsum(loginc))))
    return MalliavinPath(k0 * h, h, vals, path)


def psi_sup(m: MalliavinPath, horizon: float) -> float:
    """``sup_{r <= t <= horizon} |Z_t|`` over grid times."""
    if horizon > m.times[-1] + 1e-9:
        raise ValueError(f"horizon {horizon} beyond the Malliavin path ({m.times[-1]})")
    k = int(np.floor((horizon - m.r) / m.h + 1e-9))
    return float(np.max(np.abs(m.values[: max(k, 0) + 1])))


# ---------------------------------------------------------------------------
# Condition (S) in one dimension


@dataclass(frozen=True)
class ConditionS:
    holds: bool
    margin: float
    sup: float
    p: float


def check_condition_S_1d(spec: DiffusionSpec, p: float, y_grid=None) -> ConditionS:
    """Evaluate ``sup_y [b'(y) + (p-1)/2 sigma'(y)^2]``; (S) holds when it is negative."""
    if spec.n != 1:
        raise ValueError("the scalar criterion needs a one-dimensional driver")
    if p < 2:
        raise ValueError(f"p must be >= 2, got {p}")
    y = spec.working_grid(4001) if y_grid is None else np.asarray(y_grid, dtype=float)
    lhs = spec.drift_derivative(y) + 0.5 * (p - 1) * spec.sigma_derivative(y) ** 2
    sup = float(np.max(lhs))
    return ConditionS(holds=sup < 0.0, margin=-sup, sup=sup, p=float(p))


# ---------------------------------------------------------------------------
# invariant density


@dataclass(frozen=True)
class InvariantDensity:
    y: Array
    rho: Array

    def expect(self, values) -> Array:
        """``int f rho dy`` for samples ``values[i, ...]`` on the y-grid."""
        values = np.asarray(values, dtype=float)
        w = self.rho.reshape((-1,) + (1,) * (values.ndim - 1))
        return trapezoid(values * w, self.y, axis=0)

    def cdf(self) -> Array:
        c = np.concatenate(([0.0], np.cumsum(0.5 * (self.rho[1:] + self.rho[:-1]) * np.diff(self.y))))
        return c / c[-1]

    def sample(self, u) -> Array:
        return np.interp(u, self.cdf(), self.y)

    def weights(self) -> Array:
        """Trapezoid quadrature weights so that ``sum(w * f) = int f rho dy``."""
        dy = np.diff(self.y)
        w = np.zeros_like(self.y)
        w[:-1] += 0.5 * dy
        w[1:] += 0.5 * dy
        return w * self.rho


def invariant_density_1d(spec: DiffusionSpec, y_grid) -> InvariantDensity:
    """Normalised ``rho = C q^{-1} exp(int_0^y 2 b / q)`` on ``y_grid``."""
    if spec.n != 1:
        raise ValueError("only one-dimensional drivers are supported")
    y = np.asarray(y_grid, dtype=float)
    q = spec.q(y)
    if np.any(q <= 0):
        raise ModelError("q must be positive on the y-grid")
    phi = cumulative_simpson(2.0 * np.asarray(spec.drift(y), dtype=float) / q, x=y, initial=0.0)
    i0 = int(np.argmin(np.abs(y)))
    logr = phi - phi[i0] - np.log(q)
    logr -= logr.max()
    rho = np.exp(logr)
    mass = trapezoid(rho, y)
    rho = rho / mass
    edge = max(rho[0], rho[-1]) / rho.max()
    if not np.isfinite(mass) or edge > 1e-8:
        raise ModelError(
            f"invariant density does not decay on [{y[0]:g}, {y[-1]:g}] "
            f"(edge/peak = {edge:.2e}); drift is not confining"
        )
    return InvariantDensity(y, rho)


# ---------------------------------------------------------------------------
# coefficient models


_LINKS: dict[str, Callable[[Array], Array]] = {
    "tanh": np.tanh,
    "sin": np.sin,
    "cos": np.cos,
    "one_plus_half_tanh": lambda y: 1.0 + 0.5 * np.tanh(y),
}


@dataclass(frozen=True)
class CoefficientModel:
    """``a(z, y)``: periodic in ``z`` (unit torus), driven by ``y = xi_s``.

    ``kind`` is one of ``constant``, ``space-only``, ``separable-additive``
    (``c0(z) + c1(z) g(y)``), ``multiplicative`` (``g(y) c0(z)``) or
    ``general`` (``fn(z, y)``). Profiles take the ``dim`` coordinate arrays
    and return the scalar multiplier of the identity; ``general`` returns
    the scalar as well (isotropic models only).
    """

    kind: str
    dim: int
    c0: Callable[..., Array]
    c1: Callable[..., Array] | None = None
    link: Callable[[Array], Array] | None = None
    fn: Callable[..., Array] | None = None
    lam: float = 0.1
    model_id: str = "custom"
    params: dict = field(default_factory=dict)
    y_range: float = 8.0

    def __post_init__(self):
        if self.kind not in ("constant", "space-only", "separable-additive",
                             "multiplicative", "general"):
            raise ModelError(f"unknown model kind {self.kind!r}")
        self._check_ellipticity()

    def scalar(self, z, y) -> Array:
        """Isotropic multiplier at periodic points (``z`` is a tuple of coordinate arrays for d = 2)."""
        zz = z if isinstance(z, tuple) else (np.asarray(z, dtype=float),)
        y = np.asarray(y, dtype=float)
        if self.kind in ("constant", "space-only"):
            return np.asarray(self.c0(*zz), dtype=float) + 0.0 * y
        if self.kind == "separable-additive":
            return self.c0(*zz) + self.c1(*zz) * self.link(y)
        if self.kind == "multiplicative":
            return self.link(y) * self.c0(*zz)
        return np.asarray(self.fn(*zz, y), dtype=float)

    def face_split(self, z) -> tuple[Array, Array] | None:
        """``(c0, c1)`` with ``a = c0 + c1 g(y)`` when such a split exists."""
        z = np.asarray(z, dtype=float)
        if self.kind in ("constant", "space-only"):
            return np.asarray(self.c0(z), dtype=float) * np.ones_like(z), np.zeros_like(z)
        if self.kind == "separable-additive":
            return self.c0(z) * np.ones_like(z), self.c1(z) * np.ones_like(z)
        if self.kind == "multiplicative":
            return np.zeros_like(z), self.c0(z) * np.ones_like(z)
        return None

    def g(self, y) -> Array:
        if self.link is None:
            return np.zeros(np.shape(y))
        return self.link(np.asarray(y, dtype=float))

    def slice(self, grid: TorusGrid, y: float) -> GridField:
        """Matrix field ``a(., y)`` on the torus grid."""
        s = self.scalar(grid.mesh(), y)
        eye = np.eye(grid.dim)
        return GridField(grid, s[..., None, None] * eye)

    def is_time_independent(self) -> bool:
        return self.kind in ("constant", "space-only")

    def _check_ellipticity(self) -> None:
        zs = np.arange(64) / 64
        mesh = np.meshgrid(*([zs] * self.dim), indexing="ij")
        for y in np.linspace(-self.y_range, self.y_range, 65):
            vals = self.scalar(tuple(mesh), y)
            lo, hi = float(np.min(vals)), float(np.max(vals))
            if lo < self.lam or hi > 1.0 / self.lam:
                raise ModelError(
                    f"model {self.model_id!r} violates ellipticity with lambda={self.lam} "
                    f"at y={y:g}: range [{lo:.4g}, {hi:.4g}]"
                )

    def lipschitz(self, n: int = 256, ny: int = 257) -> float:
        """Numerical ``K_a = sup |d_z a| + |d_y a| + |d_zy a|`` (d = 1)."""
        z = np.arange(n) / n
        y = np.linspace(-self.y_range, self.y_range, ny)
        Z, Y = np.meshgrid(z, y, indexing="ij")
        A = self.scalar(Z, Y)
        az = (np.roll(A, -1, 0) - np.roll(A, 1, 0)) * n / 2
        ay = np.gradient(A, y, axis=1)
        azy = np.gradient(az, y, axis=1)
        return float(np.max(np.abs(az) + np.abs(ay) + np.abs(azy)))


def coefficient_at(model: CoefficientModel, z, y: float) -> Array:
    """``a(z, y)`` as a symmetric ``d x d`` matrix; raises on ellipticity violation."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if z.size != model.dim:
        raise ValueError(f"point has {z.size} coordinates, model is {model.dim}-dimensional")
    s = float(model.scalar(tuple(z) if model.dim > 1 else z[0], y))
    if not (model.lam <= s <= 1.0 / model.lam):
        raise ModelError(f"a({z}, {y}) = {s} outside the ellipticity band [{model.lam}, {1 / model.lam}]")
    return s * np.eye(model.dim)


def _cosprod(*z):
    out = 1.0
    for zi in z:
        out = out * np.cos(2 * np.pi * zi)
    return out


def make_model(model_id: str, dim: int = 1, **params) -> CoefficientModel:
    """Named coefficient families used by the experiments.

    ``constant``        a = value
    ``cosine``          a = mean + amp cos(2 pi z)           (time independent)
    ``additive``        a = mean + amp cos(2 pi z) g(y)      (g = link, default tanh)
    ``multiplicative``  a = g(y) (mean + amp cos(2 pi z))    (g default 1 + tanh/2)
    ``travelling``      a = mean + amp cos(2 pi (z + shift tanh y))  (non-separable)
    In 2D the cosine is replaced by the product of cosines in each coordinate.
    """
    lam = float(params.pop("lam", 0.1))
    y_range = float(params.pop("y_range", 8.0))
    mean_ = float(params.get("mean", 2.0))
    amp = float(params.get("amp", 1.0))
    common = dict(dim=dim, lam=lam, model_id=model_id, y_range=y_range)
    if model_id == "constant":
        value = float(params.get("value", 1.0))
        return CoefficientModel("constant", c0=lambda *z: value + 0.0 * z[0],
                                params={"value": value}, **common)
    if model_id == "cosine":
        return CoefficientModel("space-only", c0=lambda *z: mean_ + amp * _cosprod(*z),
                                params={"mean": mean_, "amp": amp}, **common)
    if model_id == "additive":
        amp = float(params.get("amp", 0.5))
        link = params.get("link", "tanh")
        return CoefficientModel(
            "separable-additive",
            c0=lambda *z: mean_ + 0.0 * z[0],
            c1=lambda *z: amp * _cosprod(*z),
            link=_LINKS[link],
            params={"mean": mean_, "amp": amp, "link": link},
            **common,
        )
    if model_id == "multiplicative":
        link = params.get("link", "one_plus_half_tanh")
        return CoefficientModel(
            "multiplicative",
            c0=lambda *z: mean_ + amp * _cosprod(*z),
            link=_LINKS[link],
            params={"mean": mean_, "amp": amp, "link": link},
            **common,
        )
    if model_id == "travelling":
        amp = float(params.get("amp", 0.5))
        shift = float(params.get("shift", 0.25))
        if dim != 1:
            raise ModelError("the travelling model is one-dimensional")

        def fn(z, y):
            return mean_ + amp * np.cos(2 * np.pi * (z + shift * np.tanh(y)))

        return CoefficientModel("general", c0=lambda z: mean_ + 0.0 * z, fn=fn,
                                params={"mean": mean_, "amp": amp, "shift": shift}, **common)
    raise ModelError(f"unknown model id {model_id!r}")


def make_driver(kind: str = "ou", **params) -> DiffusionSpec:
    """Named driver families.

    ``ou``          b = -theta (y - mean), sigma constant
    ``cubic``       b = -y^3, sigma constant
    ``modulated``   b = -theta y, sigma(y) = sigma0 (1 + mod sin y)
    """
    y_range = float(params.get("y_range", 8.0))
    if kind == "ou":
        return DiffusionSpec.ornstein_uhlenbeck(
            float(params.get("theta", 1.0)), float(params.get("sigma", np.sqrt(2.0))),
            float(params.get("mean", 0.0)), y_range=y_range)
    if kind == "cubic":
        sig = float(params.get("sigma", np.sqrt(2.0)))
        return DiffusionSpec(
            drift=lambda y: -np.asarray(y, dtype=float) ** 3,
            sigma=lambda y: np.full(np.shape(y), sig),
            ddrift=lambda y: -3.0 * np.asarray(y, dtype=float) ** 2,
            dsigma=lambda y: np.zeros(np.shape(y)),
            y_range=y_range, name=f"cubic(sigma={sig:g})",
        )
    if kind == "modulated":
        theta = float(params.get("theta", 1.0))
        s0 = float(params.get("sigma", np.sqrt(2.0)))
        mod = float(params.get("mod", 0.9))
        return DiffusionSpec(
            drift=lambda y: -theta * np.asarray(y, dtype=float),
            sigma=lambda y: s0 * (1.0 + mod * np.sin(y)),
            ddrift=lambda y: np.full(np.shape(y), -theta),
            dsigma=lambda y: s0 * mod * np.cos(y),
            y_range=float(params.get("y_range", 20.0)),
            name=f"modulated(theta={theta:g},sigma={s0:g},mod={mod:g})",
        )
    raise ModelError(f"unknown driver kind {kind!r}")
