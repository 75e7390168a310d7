"""Finite-difference time stepping on a truncated box ``[-L, L]`` (d = 1).

All solvers share one scheme: conservative three-point fluxes with face
coefficients, Crank-Nicolson in time with the coefficient frozen at the
step midpoint, optional Rannacher start (the first steps replaced by pairs
of backward-Euler half steps) and homogeneous Dirichlet walls.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.optimize import linprog

from . import _backend
from .media import CoefficientModel, DriverPath

Array = np.ndarray
_HEADER = struct.Struct("<qqddd")
BOUNDARY_TOL = 1e-10


class ResolutionError(ValueError):
    """Grid or time step too coarse for the requested ``eps``/``alpha``."""


@dataclass(frozen=True)
class BoxDomain:
    """Uniform grid ``x_i = -L + i dx``, ``i = 0..m``; the two end nodes are walls."""

    L: float
    m: int

    def __post_init__(self):
        if self.L <= 0 or self.m < 4:
            raise ValueError(f"invalid box L={self.L}, m={self.m}")

    @property
    def dx(self) -> float:
        return 2.0 * self.L / self.m

    @property
    def nodes(self) -> Array:
        return -self.L + self.dx * np.arange(self.m + 1)

    @property
    def faces(self) -> Array:
        """Midpoints between consecutive nodes (``m`` of them)."""
        return -self.L + self.dx * (np.arange(self.m) + 0.5)

    @classmethod
    def for_eps(cls, L: float, eps: float, cells_per_eps: int = 16) -> BoxDomain:
        """Box whose spacing resolves each eps-period with ``cells_per_eps`` cells."""
        return cls(L, int(np.ceil(2.0 * L * cells_per_eps / eps - 1e-9)))


@dataclass(frozen=True)
class SpaceTimeField:
    """Stored rows ``values[k] = u(., t0 + k dt)`` including the wall nodes."""

    domain: BoxDomain
    dt: float
    values: Array
    t0: float = 0.0
    meta: dict = field(default_factory=dict)
    boundary_ok: bool = True

    @property
    def times(self) -> Array:
        return self.t0 + self.dt * np.arange(self.values.shape[0])

    @property
    def T(self) -> float:
        return float(self.times[-1])

    def _check_grid(self, other: SpaceTimeField) -> None:
        if (other.domain != self.domain or other.values.shape != self.values.shape
                or abs(other.dt - self.dt) > 1e-12 * max(1.0, self.dt)
                or abs(other.t0 - self.t0) > 1e-12):
            raise ValueError("space-time grids do not match")

    def combine(self, coeffs, others, meta=None) -> SpaceTimeField:
        """``sum_i coeffs[i] * others[i]`` where ``others[0]`` may be ``self``."""
        out = np.zeros_like(self.values)
        for c, f in zip(coeffs, others):
            self._check_grid(f)
            out += c * f.values
        return replace(self, values=out, meta=dict(meta or {}),
                       boundary_ok=all(f.boundary_ok for f in others))

    def time_weights(self) -> Array:
        w = np.full(self.values.shape[0], self.dt)
        w[0] = w[-1] = 0.5 * self.dt
        return w

    def l2_spacetime(self) -> float:
        """``||u||_{L2(box x (t0, T))}`` by trapezoid rules."""
        per = np.sum(self.values**2, axis=1) * self.domain.dx
        return float(np.sqrt(np.sum(per * self.time_weights())))

    def l2_space(self) -> Array:
        return np.sqrt(np.sum(self.values**2, axis=1) * self.domain.dx)

    def pair(self, psi: Array) -> float:
        """Space-time inner product with ``psi`` sampled on the same rows."""
        psi = np.asarray(psi, dtype=float)
        per = np.sum(self.values * psi, axis=1) * self.domain.dx
        return float(np.sum(per * self.time_weights()))

    def gradient(self) -> Array:
        return np.gradient(self.values, self.domain.dx, axis=1)

    def save(self, path) -> None:
        """Flat little-endian binary (header ``m, rows, dt, dx, L``) plus a JSON sidecar."""
        path = Path(path)
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(self.domain.m, self.values.shape[0], self.dt,
                                  self.domain.dx, self.domain.L))
            fh.write(np.ascontiguousarray(self.values, dtype="<f8").tobytes())
        side = {"t0": self.t0, "boundary_ok": self.boundary_ok, **self.meta}
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(side, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> SpaceTimeField:
        path = Path(path)
        raw = path.read_bytes()
        m, rows, dt, dx, L = _HEADER.unpack_from(raw)
        vals = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(rows, m + 1).copy()
        side_path = path.with_suffix(path.suffix + ".json")
        side = json.loads(side_path.read_text()) if side_path.exists() else {}
        t0 = float(side.pop("t0", 0.0))
        ok = bool(side.pop("boundary_ok", True))
        return cls(BoxDomain(L, m), dt, vals, t0, side, ok)


# ---------------------------------------------------------------------------
# helpers


def harmonic_faces(nodal: Array) -> Array:
    """Harmonic averages of consecutive nodal coefficient values."""
    nodal = np.asarray(nodal, dtype=float)
    return 2.0 * nodal[:-1] * nodal[1:] / (nodal[:-1] + nodal[1:])


def second_difference(values: Array, dx: float) -> Array:
    """Centred ``d_xx`` along the last axis; zero at the walls."""
    out = np.zeros_like(values)
    out[..., 1:-1] = (values[..., 2:] - 2 * values[..., 1:-1] + values[..., :-2]) / dx**2
    return out


def step_rule(eps: float, alpha: float, T: float, h_driver: float,
              c1: float = 0.125, c2: float = 4.0) -> tuple[float, int, float]:
    """``(dt, nsteps, h)``: ``dt = min(c1 eps^2, c2 eps^alpha h_driver)`` rounded so that
    ``nsteps dt = T``; ``h = dt / (c2 eps^alpha)`` is the driver step actually used."""
    dt0 = min(c1 * eps**2, c2 * eps**alpha * h_driver)
    nsteps = int(np.ceil(T / dt0 - 1e-9))
    dt = T / nsteps
    return dt, nsteps, dt / (c2 * eps**alpha)


def _save_mask(nsteps: int, save_every: int) -> np.ndarray:
    if save_every < 1 or nsteps % save_every:
        raise ValueError(f"save_every={save_every} must divide nsteps={nsteps}")
    mask = np.zeros(nsteps + 1, dtype=np.int8)
    mask[::save_every] = 1
    return mask


def _finish(domain, dt_row, rows_interior, t0, meta) -> SpaceTimeField:
    vals = np.zeros((rows_interior.shape[0], domain.m + 1))
    vals[:, 1:-1] = rows_interior
    if not np.all(np.isfinite(vals)):
        raise FloatingPointError("non-finite values in solution")
    edge = float(np.max(np.abs(vals[:, [1, -2]])))
    # post-hoc wall check: the flag marks a box that is too small for the data
    return SpaceTimeField(domain, dt_row, vals, t0, dict(meta), edge < BOUNDARY_TOL)


def march(domain: BoxDomain, u0: Array, dt: float, nsteps: int, c0f: Array,
          c1f: Array | None = None, gvals: Array | None = None,
          faces_fn: Callable[[int], Array] | None = None,
          source_fn: Callable[[float], Array] | None = None,
          n_startup: int = 0, save_every: int = 1, t0: float = 0.0,
          meta: dict | None = None, backend: str | None = None) -> SpaceTimeField:
    """Generic driver of the scheme.

    Face coefficients at step ``k`` are ``c0f + c1f * gvals[k]`` or, when
    ``faces_fn`` is given, ``faces_fn(k)``. ``source_fn(t)`` returns a
    forcing on all nodes; it is averaged between ``t_k`` and ``t_{k+1}``.
    """
    kern = _backend.get(backend)
    mask = _save_mask(nsteps, save_every)
    u = np.ascontiguousarray(np.asarray(u0, dtype=float)[1:-1]).copy()
    out = np.empty((int(mask.sum()), domain.m - 1))
    dx = domain.dx
    if faces_fn is None and source_fn is None:
        c0f = np.ascontiguousarray(c0f, dtype=float)
        c1f = np.zeros_like(c0f) if c1f is None else np.ascontiguousarray(c1f, dtype=float)
        g = np.zeros(nsteps) if gvals is None else np.ascontiguousarray(gvals, dtype=float)
        kern.march_separable(u, c0f, c1f, g, dx, dt, n_startup, mask, out)
    else:
        row = 0
        out[row] = u
        row += 1
        s_prev = None if source_fn is None else np.asarray(source_fn(t0))[1:-1]
        for k in range(nsteps):
            if faces_fn is not None:
                af = np.ascontiguousarray(faces_fn(k), dtype=float)
            else:
                af = np.ascontiguousarray(c0f + (0 if c1f is None else c1f * gvals[k]), dtype=float)
            src = None
            if source_fn is not None:
                s_next = np.asarray(source_fn(t0 + (k + 1) * dt))[1:-1]
                src = 0.5 * (s_prev + s_next)
                s_prev = s_next
            if k < n_startup:
                for _ in range(2):
                    kern.theta_step(u, af, dx, 0.5 * dt, 1.0, src)
            else:
                kern.theta_step(u, af, dx, dt, 0.5, src)
            if mask[k + 1]:
                out[row] = u
                row += 1
    return _finish(domain, dt * save_every, out, t0, meta or {})


# ---------------------------------------------------------------------------
# physical solvers


def solve_fine(model: CoefficientModel, driver: DriverPath | None, eps: float, alpha: float,
               phi, domain: BoxDomain, dt: float, T: float, save_every: int = 1,
               t0: float = 0.0, c1: float = 0.125, c2: float = 4.0, n_startup: int = 2,
               cells_per_eps: int = 16, backend: str | None = None,
               meta: dict | None = None) -> SpaceTimeField:
    """``d_t u = d_x(a(x/eps, xi_{t/eps^alpha}) d_x u)`` with ``u(., t0) = phi``.

    The coefficient is evaluated pointwise at faces and frozen per step at
    the midpoint time. Constant models skip the eps-resolution checks.
    """
    if model.dim != 1:
        raise ValueError("the fine solver is one-dimensional")
    nsteps = int(round(T / dt))
    if abs(nsteps * dt - T) > 1e-9 * max(T, 1.0):
        raise ValueError(f"T={T} is not a multiple of dt={dt}")
    if model.kind != "constant":
        if domain.dx > eps / cells_per_eps * (1 + 1e-9):
            raise ResolutionError(
                f"dx={domain.dx:.3g} resolves eps={eps} with fewer than {cells_per_eps} cells")
        if dt > c1 * eps**2 * (1 + 1e-9):
            raise ResolutionError(f"dt={dt:.3g} exceeds {c1} eps^2 = {c1 * eps**2:.3g}")
    needs_driver = not model.is_time_independent()
    if needs_driver:
        if driver is None:
            raise ValueError("time-dependent model needs a driver path")
        if dt > c2 * eps**alpha * driver.h * (1 + 1e-9):
            raise ResolutionError(
                f"dt={dt:.3g} exceeds c2 eps^alpha h = {c2 * eps**alpha * driver.h:.3g}")
        if (t0 + T) / eps**alpha > driver.horizon + driver.h:
            raise ValueError("driver path is shorter than the rescaled horizon")
    phi_vals = np.asarray(phi(domain.nodes) if callable(phi) else phi, dtype=float)
    zf = domain.faces / eps
    ymid = None
    if needs_driver:
        tmid = t0 + (np.arange(nsteps) + 0.5) * dt
        ymid = driver.value_at(tmid / eps**alpha)
    info = {"eps": eps, "alpha": alpha, "model": model.model_id, "dt_step": dt,
            "save_every": save_every, **(meta or {})}
    if driver is not None:
        info["seed"] = driver.seed
    split = model.face_split(zf)
    if split is not None:
        c0f, c1f = split
        g = model.g(ymid) if ymid is not None else np.zeros(nsteps)
        return march(domain, phi_vals, dt, nsteps, c0f, c1f, g, n_startup=n_startup,
                     save_every=save_every, t0=t0, meta=info, backend=backend)

    def faces_fn(k):
        return model.scalar(zf, ymid[k])

    return march(domain, phi_vals, dt, nsteps, None, faces_fn=faces_fn, n_startup=n_startup,
                 save_every=save_every, t0=t0, meta=info, backend=backend)


def solve_homogenized(a_eff, phi, domain: BoxDomain, dt: float, T: float, save_every: int = 1,
                      n_startup: int = 2, backend: str | None = None) -> SpaceTimeField:
    a = float(np.asarray(a_eff).reshape(-1)[0])
    nsteps = int(round(T / dt))
    phi_vals = np.asarray(phi(domain.nodes) if callable(phi) else phi, dtype=float)
    return march(domain, phi_vals, dt, nsteps, np.full(domain.m, a), n_startup=n_startup,
                 save_every=save_every, meta={"a_eff": a, "dt_step": dt, "save_every": save_every},
                 backend=backend)


def solve_cascade_pde(j: int, a_eff, a_k_eff, lower: list[SpaceTimeField],
                      backend: str | None = None) -> SpaceTimeField:
    """``d_t u^j = a_eff u^j_xx + sum_{k=1}^j a^{k,eff} u^{j-k}_xx``, ``u^j(., 0) = 0``.

    ``lower[i]`` is ``u^i`` stored at every solver step; the source uses
    centred second differences of those fields.
    """
    if len(lower) < j:
        raise ValueError(f"u^{j} needs {j} lower fields, got {len(lower)}")
    ref = lower[0]
    for f in lower[1:]:
        ref._check_grid(f)
    a = float(np.asarray(a_eff).reshape(-1)[0])
    ak = [float(np.asarray(m).reshape(-1)[0]) for m in a_k_eff]
    dom = ref.domain
    src_rows = np.zeros_like(ref.values)
    for k in range(1, j + 1):
        if ak[k - 1] != 0.0:
            src_rows += ak[k - 1] * second_difference(lower[j - k].values, dom.dx)
    nsteps = ref.values.shape[0] - 1
    if not np.any(src_rows):
        return replace(ref, values=np.zeros_like(ref.values), meta={"order": j})

    def source(t):
        return src_rows[int(round((t - ref.t0) / ref.dt))]

    return march(dom, np.zeros(dom.m + 1), ref.dt, nsteps, np.full(dom.m, a),
                 source_fn=source, t0=ref.t0, meta={"order": j}, backend=backend)


def solve_cascade_comarch(a_eff, a_k_eff, phi, domain: BoxDomain, dt: float, T: float,
                          J: int, save_every: int = 1, n_startup: int = 2,
                          backend: str | None = None) -> list[SpaceTimeField]:
    """March ``u^0 .. u^J`` together and store every ``save_every``-th row.

    Equivalent to ``solve_homogenized`` followed by ``solve_cascade_pde``
    but without keeping every step of the lower fields in memory.
    """
    kern = _backend.get(backend)
    a = float(np.asarray(a_eff).reshape(-1)[0])
    ak = [float(np.asarray(m).reshape(-1)[0]) for m in a_k_eff]
    nsteps = int(round(T / dt))
    mask = _save_mask(nsteps, save_every)
    af = np.full(domain.m, a)
    dx = domain.dx
    phi_vals = np.asarray(phi(domain.nodes) if callable(phi) else phi, dtype=float)
    us = [np.ascontiguousarray(phi_vals[1:-1]).copy()] + [np.zeros(domain.m - 1) for _ in range(J)]
    outs = [np.empty((int(mask.sum()), domain.m - 1)) for _ in range(J + 1)]
    for o, u in zip(outs, us):
        o[0] = u

    def d2(v):
        full = np.zeros(domain.m + 1)
        full[1:-1] = v
        return second_difference(full, dx)[1:-1]

    src_old = [None] * (J + 1)
    for j in range(1, J + 1):
        src_old[j] = sum(ak[k - 1] * d2(us[j - k]) for k in range(1, j + 1))
    row = 1
    for k in range(nsteps):
        if k < n_startup:
            for _ in range(2):
                kern.theta_step(us[0], af, dx, 0.5 * dt, 1.0, None)
        else:
            kern.theta_step(us[0], af, dx, dt, 0.5, None)
        for j in range(1, J + 1):
            new = sum(ak[i - 1] * d2(us[j - i]) for i in range(1, j + 1))
            kern.theta_step(us[j], af, dx, dt, 0.5, 0.5 * (src_old[j] + new))
            # lower orders are already advanced, so ``new`` is the end-of-step source
            src_old[j] = new
        if mask[k + 1]:
            for o, u in zip(outs, us):
                o[row] = u
            row += 1
    return [_finish(domain, dt * save_every, o, 0.0,
                    {"order": j, "a_eff": a, "dt_step": dt, "save_every": save_every})
            for j, o in enumerate(outs)]


def solve_limit_spde(a_eff, Lambda_sqrt, u0: SpaceTimeField, dW: Array,
                     backend: str | None = None) -> SpaceTimeField:
    """Semi-implicit Euler-Maruyama for ``dv = a_eff v_xx dt + Lambda^{1/2} u0_xx dW``.

    ``dW`` has one row per step of ``u0`` (``d^2 = 1`` column in one dimension).
    The noise increment ``Lambda^{1/2}[(ij),(kl)] d_ij u0 dW^{kl}`` is added
    explicitly and then propagated through the implicit half of the step.
    """
    kern = _backend.get(backend)
    lam = np.atleast_2d(np.asarray(Lambda_sqrt, dtype=float))
    if lam.shape != (1, 1):
        raise ValueError("only d = 1 (Lambda is 1 x 1) is supported here")
    ev = np.linalg.eigvalsh(0.5 * (lam + lam.T))
    if np.max(np.abs(lam - lam.T)) > 1e-10 or ev.min() < -1e-10:
        raise ValueError("Lambda_sqrt must be a symmetric PSD factor")
    dW = np.asarray(dW, dtype=float).reshape(-1)
    nsteps = u0.values.shape[0] - 1
    if dW.size != nsteps:
        raise ValueError(f"need {nsteps} increments, got {dW.size}")
    dom = u0.domain
    dt = u0.dt
    a = float(np.asarray(a_eff).reshape(-1)[0])
    af = np.full(dom.m, a)
    f = lam[0, 0] * second_difference(u0.values, dom.dx)[:, 1:-1]
    v = np.zeros(dom.m - 1)
    out = np.empty((nsteps + 1, dom.m - 1))
    out[0] = v
    for k in range(nsteps):
        kern.theta_step(v, af, dom.dx, dt, 0.5, f[k] * (dW[k] / dt))
        out[k + 1] = v
    return _finish(dom, dt, out, u0.t0, {"kind": "limit_spde"})


# ---------------------------------------------------------------------------
# fundamental solution probes and Gaussian bounds


def delta_approx(domain: BoxDomain, y0: float, width_cells: float = 2.0) -> Array:
    """Gaussian of width ``width_cells * dx`` centred at ``y0`` with unit discrete mass."""
    x = domain.nodes
    w = width_cells * domain.dx
    g = np.exp(-0.5 * ((x - y0) / w) ** 2)
    g[0] = g[-1] = 0.0
    return g / (g.sum() * domain.dx)


def fundamental_probe(model: CoefficientModel, driver: DriverPath | None, eps: float,
                      alpha: float, y0: float, s0: float, domain: BoxDomain, dt: float,
                      T: float, save_every: int = 1, backend: str | None = None,
                      **kw) -> SpaceTimeField:
    """Approximate ``Gamma(., t; y0, s0)`` for ``t in [s0, s0 + T]``."""
    phi = delta_approx(domain, y0)
    f = solve_fine(model, driver, eps, alpha, phi, domain, dt, T, save_every=save_every,
                   t0=s0, backend=backend, meta={"y0": y0, "s0": s0, "probe": True}, **kw)
    return f


@dataclass(frozen=True)
class GaussianBoundFit:
    """``|D^k Gamma| <= c tau^{-(d+k)/2} exp(-C |x-y|^2 / tau)`` for ``k = 0`` or ``1``."""

    which: str
    c: float
    C: float
    violation_rate: float
    max_violation: float
    n_samples: int
    residual: float


def _upper_hull(u: Array, v: Array) -> tuple[Array, Array]:
    """Vertices of the upper concave hull (Andrew's monotone chain)."""
    order = np.lexsort((v, u))
    hull: list[tuple[float, float]] = []
    for px, py in zip(u[order], v[order]):
        while len(hull) >= 2:
            (ox, oy), (ax, ay) = hull[-2], hull[-1]
            if (ax - ox) * (py - oy) - (ay - oy) * (px - ox) >= 0:
                hull.pop()
            else:
                break
        hull.append((px, py))
    h = np.array(hull)
    return h[:, 0], h[:, 1]


def _bound_samples(f: SpaceTimeField, which: str, floor: float, exclude_steps: int):
    y0 = float(f.meta.get("y0", 0.0))
    s0 = float(f.meta.get("s0", f.t0))
    dt_step = float(f.meta.get("dt_step", f.dt))
    tau = f.times - s0
    keep = tau >= exclude_steps * dt_step - 1e-12
    x = f.domain.nodes
    if which == "value":
        vals, power = f.values, 0.5
    elif which == "gradient":
        vals, power = np.abs(f.gradient()), 1.0
    else:
        raise ValueError("which must be 'value' or 'gradient'")
    us, vs = [], []
    for k in np.flatnonzero(keep):
        row = vals[k]
        peak = np.max(np.abs(f.values[k])) if which == "value" else np.max(row)
        sel = row > floor * peak
        if not np.any(sel):
            continue
        us.append((x[sel] - y0) ** 2 / tau[k])
        vs.append(np.log(row[sel]) + power * np.log(tau[k]))
    if not us:
        return np.empty(0), np.empty(0)
    return np.concatenate(us), np.concatenate(vs)


def fit_gaussian_bound(probes: list[SpaceTimeField], which: str = "value",
                       floor: float = 1e-8, exclude_steps: int = 20) -> GaussianBoundFit:
    """Tightest Gaussian majorant fitted by linear programming in ``(log c, C)``.

    Samples below ``floor`` times the slice peak and the initial layer
    ``t - s < exclude_steps * dt`` are dropped. The objective minimises the
    mean log-gap ``log c - C u - v`` over all samples, subject to the bound
    holding at every sample.
    """
    us, vs = [], []
    for f in probes:
        u, v = _bound_samples(f, which, floor, exclude_steps)
        us.append(u)
        vs.append(v)
    u = np.concatenate(us)
    v = np.concatenate(vs)
    if u.size == 0:
        raise ValueError("no samples above the floor")
    hu, hv = _upper_hull(u, v)
    res = linprog(c=[1.0, -float(np.mean(u))],
                  A_ub=np.column_stack([-np.ones_like(hu), hu]), b_ub=-hv,
                  bounds=[(None, None), (None, None)], method="highs")
    if not res.success:
        raise RuntimeError(f"bound LP failed: {res.message}")
    lc, C = res.x
    gap = lc - C * u - v
    tol = 1e-9 * max(1.0, np.max(np.abs(v)))
    return GaussianBoundFit(which, float(np.exp(lc)), float(C),
                            float(np.mean(gap < -tol)), float(max(0.0, -np.min(gap))),
                            int(u.size), float(np.mean(gap)))
