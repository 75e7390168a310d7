"""Periodic cell problems, corrector cascades and effective tensors.

Two settings are supported:

``"C"`` (diffusive)
    correctors are functions of the driver value ``y`` on a y-grid and the
    cascade reads ``div(a grad chi^j) = -L_y chi^{j-1}`` with
    ``L_y = 1/2 q d_yy + b d_y``.
``"H"`` (time slices)
    correctors are materialised on a uniform slice grid in ``s`` and the
    cascade reads ``div(a grad chi^j) = d_s chi^{j-1}``.

Both right sides are implemented exactly as stated. By Ito's formula
``d_s`` acting on ``chi(z, xi_s)`` corresponds to ``+L_y``, so the two
settings carry opposite signs for ``j >= 1``; each pipeline is only checked
for internal consistency.

Gradient convention: ``grad chi[..., i, j] = d_i chi^j`` and the effective
matrix is ``a_eff = E mean_z(a + a grad chi^0)``.
"""
from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field

import numpy as np

from .media import CoefficientModel, DiffusionSpec, InvariantDensity, invariant_density_1d
from .torus import GridField, TorusGrid, _deriv_axis, make_grid

CONVENTION = "L=1/2 q d2 + b d; a_eff=E<a+a grad chi0>; grad[i,j]=d_i chi_j"


class CellSolveError(RuntimeError):
    """Cell problem did not converge; ``residual`` holds the final relative residual."""

    def __init__(self, msg: str, residual: float):
        super().__init__(f"{msg} (relative residual {residual:.3e})")
        self.residual = residual


class CompatibilityError(ValueError):
    """Right side of a cell problem has non-zero torus mean."""


# ---------------------------------------------------------------------------
# batched spectral operator and PCG


def _spatial_axes(dim: int) -> tuple[int, ...]:
    return tuple(range(1, dim + 1))


def _grad_batch(x: np.ndarray, dim: int, n: int) -> np.ndarray:
    """``x`` has shape ``(B, n..)``; returns ``(B, n.., dim)``."""
    return np.stack([_deriv_axis(x, 1 + i, n) for i in range(dim)], axis=-1)


def _div_batch(v: np.ndarray, dim: int, n: int) -> np.ndarray:
    return sum(_deriv_axis(v[..., i], 1 + i, n) for i in range(dim))


def _apply_flux_div(a: np.ndarray, x: np.ndarray, dim: int, n: int) -> np.ndarray:
    """``div(a grad x)`` for scalar batches ``x`` and matrix batches ``a``."""
    g = _grad_batch(x, dim, n)
    return _div_batch(np.einsum("...ik,...k->...i", a, g), dim, n)


def _symbol(dim: int, n: int) -> np.ndarray:
    """``|2 pi k|^2`` of the Nyquist-free spectral Laplacian on the rfftn layout."""
    k = np.fft.fftfreq(n, d=1.0 / n)
    k[n // 2] = 0.0
    kr = np.fft.rfftfreq(n, d=1.0 / n)
    kr[-1] = 0.0
    axes = [k] * (dim - 1) + [kr]
    mesh = np.meshgrid(*axes, indexing="ij")
    return sum((2 * np.pi * m) ** 2 for m in mesh)


def _dot(u: np.ndarray, v: np.ndarray, dim: int) -> np.ndarray:
    return np.sum(u * v, axis=_spatial_axes(dim))


def _bcast(c: np.ndarray, dim: int) -> np.ndarray:
    return c.reshape(c.shape + (1,) * dim)


def solve_cell_batch(a: np.ndarray, rhs: np.ndarray, dim: int, tol: float = 1e-10,
                     max_iter: int | None = None, compat_tol: float = 1e-8) -> np.ndarray:
    """Solve ``div(a grad x_b) = rhs_b`` for zero-mean periodic ``x_b``.

    ``a`` has shape ``(B, n.., d, d)`` and ``rhs`` ``(B, n..)``. Preconditioned
    conjugate gradients on ``-div(a grad .)`` restricted to zero-mean fields,
    preconditioned by the inverse Laplacian scaled by ``mean(a)``.
    """
    n = rhs.shape[1]
    B = rhs.shape[0]
    ax = _spatial_axes(dim)
    means = rhs.mean(axis=ax)
    if np.any(np.abs(means) > compat_tol):
        raise CompatibilityError(
            f"cell right side has torus mean {np.max(np.abs(means)):.3e} > {compat_tol:g}"
        )
    sym = _symbol(dim, n)
    # project onto the range of the operator: drop the mean and Nyquist null modes
    b = -np.fft.irfftn(np.fft.rfftn(rhs, axes=ax) * (sym > 0), s=(n,) * dim, axes=ax)
    abar = np.einsum("...ii->...", a).mean(axis=ax) / dim
    inv = np.where(sym > 0, 1.0 / np.where(sym > 0, sym, 1.0), 0.0)

    def precond(r):
        spec = np.fft.rfftn(r, axes=ax) * inv / _bcast(abar, dim)
        return np.fft.irfftn(spec, s=(n,) * dim, axes=ax)

    def op(x):
        return -_apply_flux_div(a, x, dim, n)

    max_iter = max_iter or 10 * n
    bnorm = np.sqrt(_dot(b, b, dim))
    thresh = tol * bnorm
    x = np.zeros_like(b)
    r = b.copy()
    active = bnorm > 0
    if not np.any(active):
        return x
    z = precond(r)
    p = z.copy()
    rz = _dot(r, z, dim)
    for _ in range(max_iter):
        Ap = op(p)
        pAp = _dot(p, Ap, dim)
        ok = active & (pAp > 0)
        alpha = np.where(ok, rz / np.where(ok, pAp, 1.0), 0.0)
        x += _bcast(alpha, dim) * p
        r -= _bcast(alpha, dim) * Ap
        rn = np.sqrt(_dot(r, r, dim))
        active = active & (rn > thresh)
        if not np.any(active):
            break
        z = precond(r)
        rz_new = _dot(r, z, dim)
        beta = np.where(active, rz_new / np.where(rz != 0, rz, 1.0), 0.0)
        p = z + _bcast(beta, dim) * p
        rz = rz_new
    true_res = np.sqrt(_dot(b - op(x), b - op(x), dim)) / np.where(bnorm > 0, bnorm, 1.0)
    worst = float(np.max(true_res))
    if worst > 10 * tol:
        raise CellSolveError(f"PCG did not converge in {max_iter} iterations for {B} cells", worst)
    return x - _bcast(x.mean(axis=ax), dim)


def _batch_corrector0(a: np.ndarray, dim: int, tol: float = 1e-10) -> np.ndarray:
    """``chi^0`` for a batch of matrix fields; returns ``(B, n.., d)``."""
    B = a.shape[0]
    n = a.shape[1]
    # rhs^j = -div(a e_j) = -sum_i d_i a_ij
    rhs = np.stack([-_div_batch(a[..., :, j], dim, n) for j in range(dim)], axis=1)
    rhs = rhs.reshape((B * dim,) + (n,) * dim)
    aa = np.repeat(a, dim, axis=0)
    chi = solve_cell_batch(aa, rhs, dim, tol=tol)
    chi = chi.reshape((B, dim) + (n,) * dim)
    return np.moveaxis(chi, 1, -1)


def solve_corrector0(a_slice: GridField, tol: float = 1e-10) -> GridField:
    """Zero-mean periodic ``chi^0`` with ``div(a grad chi^0) = -div a``."""
    g = a_slice.grid
    a = a_slice.values
    if a.shape[g.dim:] != (g.dim, g.dim):
        raise ValueError(f"expected a matrix field, component shape {a.shape[g.dim:]}")
    if np.max(np.abs(a - np.swapaxes(a, -1, -2))) > 1e-12:
        raise ValueError("coefficient field is not symmetric")
    chi = _batch_corrector0(a[None], g.dim, tol)[0]
    return GridField(g, chi)


def cell_residual(a: np.ndarray, chi: np.ndarray, rhs: np.ndarray, dim: int) -> np.ndarray:
    """``||div(a grad chi^j) - rhs^j||_2`` per slice for ``chi`` of shape ``(B, n.., d)``."""
    n = chi.shape[1]
    out = np.zeros(chi.shape[0])
    for j in range(dim):
        lhs = _apply_flux_div(a, chi[..., j], dim, n)
        out += np.mean((lhs - rhs[..., j]) ** 2, axis=_spatial_axes(dim))
    return np.sqrt(out)


def corrector0_rhs(a: np.ndarray, dim: int) -> np.ndarray:
    """``-div a`` per component, shape ``(B, n.., d)``."""
    n = a.shape[1]
    return np.stack([-_div_batch(a[..., :, j], dim, n) for j in range(dim)], axis=-1)


# ---------------------------------------------------------------------------
# slice cache


class CorrectorCache:
    """Thread-safe ``chi^0`` cache keyed by (model, n, y quantised to ``quantum``).

    Computation happens outside the lock; concurrent writers store identical
    values, so last-writer-wins is harmless.
    """

    def __init__(self, quantum: float = 1e-6):
        self.quantum = quantum
        self._store: dict[tuple, np.ndarray] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def _key(self, model: CoefficientModel, n: int, y: float) -> tuple:
        tag = (model.model_id, model.dim, json.dumps(model.params, sort_keys=True))
        return tag + (n, int(round(y / self.quantum)))

    def get_many(self, model: CoefficientModel, grid: TorusGrid, ys) -> np.ndarray:
        ys = np.asarray(ys, dtype=float)
        keys = [self._key(model, grid.n, y) for y in ys]
        with self._lock:
            found = [self._store.get(k) for k in keys]
        missing = sorted({i for i, f in enumerate(found) if f is None},
                         key=lambda i: keys[i])
        uniq: dict[tuple, int] = {}
        for i in missing:
            uniq.setdefault(keys[i], i)
        if uniq:
            idx = list(uniq.values())
            qy = np.array([keys[i][-1] * self.quantum for i in idx])
            chi = _batch_corrector0(model_slices(model, grid, qy), grid.dim)
            with self._lock:
                for k, c in zip(uniq, chi):
                    self._store[k] = c
                self.misses += len(idx)
        with self._lock:
            self.hits += len(ys) - len(uniq)
            return np.stack([self._store[k] for k in keys])

    def __len__(self) -> int:
        with self._lock:
            return len(self._store)


# ---------------------------------------------------------------------------
# cascade


def model_slices(model: CoefficientModel, grid: TorusGrid, ys) -> np.ndarray:
    """``a(., y_b)`` for each driver value, shape ``(B, n.., d, d)``."""
    mesh = grid.mesh()
    eye = np.eye(grid.dim)
    vals = np.stack([model.scalar(mesh, float(y)) for y in np.asarray(ys, dtype=float)])
    return vals[..., None, None] * eye


def j0_order(alpha: float) -> int:
    """Number of cascade terms ``floor(alpha / (2 (2 - alpha))) + 1``."""
    if not 0.0 < alpha < 2.0:
        raise ValueError(f"alpha must lie in (0,2), got {alpha}")
    return int(np.floor(alpha / (2.0 * (2.0 - alpha)))) + 1


def diff4(f: np.ndarray, h: float, order: int = 1, axis: int = 0) -> np.ndarray:
    """Fourth-order central differences along ``axis``; second order at the two end nodes."""
    f = np.moveaxis(np.asarray(f, dtype=float), axis, 0)
    m = f.shape[0]
    if m < 5:
        raise ValueError("need at least five samples for fourth-order differences")
    out = np.empty_like(f)
    if order == 1:
        out[2:-2] = (f[:-4] - 8 * f[1:-3] + 8 * f[3:-1] - f[4:]) / (12 * h)
        out[1] = (f[2] - f[0]) / (2 * h)
        out[-2] = (f[-1] - f[-3]) / (2 * h)
        out[0] = (-3 * f[0] + 4 * f[1] - f[2]) / (2 * h)
        out[-1] = (3 * f[-1] - 4 * f[-2] + f[-3]) / (2 * h)
    elif order == 2:
        out[2:-2] = (-f[:-4] + 16 * f[1:-3] - 30 * f[2:-2] + 16 * f[3:-1] - f[4:]) / (12 * h * h)
        out[1] = (f[2] - 2 * f[1] + f[0]) / h**2
        out[-2] = (f[-1] - 2 * f[-2] + f[-3]) / h**2
        out[0] = (2 * f[0] - 5 * f[1] + 4 * f[2] - f[3]) / h**2
        out[-1] = (2 * f[-1] - 5 * f[-2] + 4 * f[-3] - f[-4]) / h**2
    else:
        raise ValueError("order must be 1 or 2")
    return np.moveaxis(out, 0, axis)


@dataclass
class CorrectorSet:
    """``chi[j]`` has shape ``(S, n.., d)``: slice index first, component last."""

    setting: str
    order: int
    index: np.ndarray
    grid: TorusGrid
    chi: list[np.ndarray]
    a: np.ndarray = field(repr=False)
    rhs: list[np.ndarray] = field(repr=False, default_factory=list)
    weights: np.ndarray | None = field(repr=False, default=None)

    def residuals(self) -> list[np.ndarray]:
        return [cell_residual(self.a, c, r, self.grid.dim) for c, r in zip(self.chi, self.rhs)]

    def field(self, j: int, s: int) -> GridField:
        return GridField(self.grid, self.chi[j][s])

    def to_json(self) -> dict:
        return {
            "schema": 1,
            "convention": CONVENTION,
            "setting": self.setting,
            "order": self.order,
            "grid": {"dim": self.grid.dim, "n": self.grid.n},
            "index": self.index.tolist(),
            "chi": [c.tolist() for c in self.chi],
        }


def corrector_cascade(model: CoefficientModel, index, J: int, setting: str = "C",
                      spec: DiffusionSpec | None = None, n: int = 256,
                      cache: CorrectorCache | None = None) -> CorrectorSet:
    """Build ``chi^0 .. chi^J`` on a y-grid (``"C"``) or an s-grid (``"H"``).

    For ``"H"`` pass ``index`` as ``(s_values, y_values)`` with ``y_values``
    the driver at the slice times (``s_values`` uniform). For ``"C"`` pass the
    uniform y-grid and the driver ``spec``.
    """
    grid = make_grid(model.dim, n)
    dim = grid.dim
    if setting == "C":
        if spec is None:
            raise ValueError("the diffusive setting needs the driver spec")
        ys = np.asarray(index, dtype=float)
        svals = ys
    elif setting == "H":
        svals, ys = (np.asarray(v, dtype=float) for v in index)
        if svals.shape != ys.shape:
            raise ValueError("slice times and driver values must have equal length")
    else:
        raise ValueError(f"setting must be 'H' or 'C', got {setting!r}")
    steps = np.diff(svals)
    if svals.size >= 2 and np.max(np.abs(steps - steps[0])) > 1e-9 * max(1.0, abs(steps[0])):
        raise ValueError("slice/y grid must be uniform")
    a = model_slices(model, grid, ys)
    chi0 = cache.get_many(model, grid, ys) if cache is not None else _batch_corrector0(a, dim)
    chis = [chi0]
    rhss = [corrector0_rhs(a, dim)]
    if J >= 1 and svals.size < 5:
        raise ValueError("higher correctors need at least five slices")
    h = float(steps[0]) if svals.size >= 2 else 1.0
    if setting == "C":
        q = _bcast(spec.q(ys), dim + 1)
        bb = _bcast(np.asarray(spec.drift(ys), dtype=float), dim + 1)
    for j in range(1, J + 1):
        prev = chis[-1]
        if setting == "H":
            rhs = diff4(prev, h, 1, axis=0)
        else:
            rhs = -(0.5 * q * diff4(prev, h, 2, axis=0) + bb * diff4(prev, h, 1, axis=0))
        S = rhs.shape[0]
        flat = np.moveaxis(rhs, -1, 1).reshape((S * dim,) + grid.shape)
        sol = solve_cell_batch(np.repeat(a, dim, axis=0), flat, dim)
        chis.append(np.moveaxis(sol.reshape((S, dim) + grid.shape), 1, -1))
        rhss.append(rhs)
    if setting == "C":
        weights = invariant_density_1d(spec, ys).weights()
    else:
        weights = np.full(ys.size, 1.0 / ys.size)
    return CorrectorSet(setting, J, svals, grid, chis, a, rhss, weights)


# ---------------------------------------------------------------------------
# effective tensors and fluctuations


def _flux_mean(a: np.ndarray, chi: np.ndarray, dim: int, with_a: bool) -> np.ndarray:
    """``mean_z(a + a grad chi)`` (or without the ``a`` term) per slice, shape ``(S, d, d)``."""
    n = chi.shape[1]
    g = np.stack([_grad_batch(chi[..., j], dim, n) for j in range(dim)], axis=-1)
    flux = np.einsum("...ik,...kj->...ij", a, g)
    if with_a:
        flux = flux + a
    return flux.mean(axis=_spatial_axes(dim))


def effective_matrix(cs: CorrectorSet, weights=None) -> np.ndarray:
    """``a_eff = E mean_z(a + a grad chi^0)`` with ``E`` a weighted slice sum."""
    w = cs.weights if weights is None else np.asarray(weights, dtype=float)
    w = w / w.sum()
    per = _flux_mean(cs.a, cs.chi[0], cs.grid.dim, True)
    eff = np.einsum("s,sij->ij", w, per)
    if np.max(np.abs(eff - eff.T)) > 1e-8:
        raise ValueError(f"effective matrix not symmetric: {eff}")
    return 0.5 * (eff + eff.T)


def higher_effective(k: int, cs: CorrectorSet, weights=None, tol: float = 1e-8) -> np.ndarray:
    """``a^{k,eff} = E mean_z(a grad chi^k)``; cross-checked against the form with ``grad(a chi^k)``."""
    if not 1 <= k <= cs.order:
        raise ValueError(f"order {k} not available (cascade built to {cs.order})")
    dim = cs.grid.dim
    n = cs.grid.n
    w = cs.weights if weights is None else np.asarray(weights, dtype=float)
    w = w / w.sum()
    chi = cs.chi[k]
    first = np.einsum("s,sij->ij", w, _flux_mean(cs.a, chi, dim, False))
    achi = np.einsum("...jm,...m->...j", cs.a, chi)
    extra = np.stack([_grad_batch(achi[..., j], dim, n) for j in range(dim)], axis=-1)
    second = first + np.einsum("s,sij->ij", w, extra.mean(axis=_spatial_axes(dim)))
    if np.max(np.abs(first - second)) > tol:
        raise ValueError(f"the two forms of a^{k},eff disagree: {first} vs {second}")
    return first


@dataclass(frozen=True)
class FluctuationSeries:
    """``values[s]`` is the centred corrected flux ``mean_z(...) - a^{k,eff}`` on ``index``."""

    kind: str  # "time" or "y"
    index: np.ndarray
    values: np.ndarray
    centre: np.ndarray
    order: int = 0

    def scalar(self) -> np.ndarray:
        return self.values.reshape(self.values.shape[0], -1)


def fluctuation_series(cs: CorrectorSet, centre: np.ndarray, order: int = 0) -> FluctuationSeries:
    """``Xi(s)`` (H) or ``<a>^k(y)`` (C), the slice flux minus its effective value."""
    dim = cs.grid.dim
    per = _flux_mean(cs.a, cs.chi[order], dim, order == 0)
    kind = "time" if cs.setting == "H" else "y"
    centre = np.asarray(centre, dtype=float)
    return FluctuationSeries(kind, cs.index, per - centre, centre, order)


def bracket_on_path(model: CoefficientModel, values, n: int = 256,
                    cache: CorrectorCache | None = None) -> np.ndarray:
    """Uncentred slice flux ``mean_z(a + a grad chi^0)`` at the driver values ``values``."""
    grid = make_grid(model.dim, n)
    vals = np.asarray(values, dtype=float)
    if model.is_time_independent():
        vals = np.zeros(1)
    if cache is None:
        uniq, inv = np.unique(np.round(vals, 6), return_inverse=True)
        a = model_slices(model, grid, uniq)
        per = _flux_mean(a, _batch_corrector0(a, grid.dim), grid.dim, True)[inv]
    else:
        a = model_slices(model, grid, vals)
        per = _flux_mean(a, cache.get_many(model, grid, vals), grid.dim, True)
    if model.is_time_independent():
        per = np.repeat(per, np.size(values), axis=0)
    return per


@dataclass
class EffectiveTensors:
    a_eff: np.ndarray
    a_k_eff: list[np.ndarray]
    Lambda: np.ndarray | None = None
    Lambda_sqrt: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        def flat(m):
            return None if m is None else np.asarray(m, dtype=float).ravel().tolist()

        return {
            "schema": 1,
            "convention": CONVENTION,
            "d": int(self.a_eff.shape[0]),
            "a_eff": flat(self.a_eff),
            "a_k_eff": [flat(m) for m in self.a_k_eff],
            "Lambda": flat(self.Lambda),
            "Lambda_sqrt": flat(self.Lambda_sqrt),
            "meta": self.meta,
        }

    @classmethod
    def from_json(cls, doc: dict) -> EffectiveTensors:
        d = int(doc["d"])

        def mat(v, k):
            return None if v is None else np.asarray(v, dtype=float).reshape(k, k)

        return cls(
            a_eff=mat(doc["a_eff"], d),
            a_k_eff=[mat(v, d) for v in doc["a_k_eff"]],
            Lambda=mat(doc["Lambda"], d * d),
            Lambda_sqrt=mat(doc["Lambda_sqrt"], d * d),
            meta=dict(doc.get("meta", {})),
        )


def effective_tensors(model: CoefficientModel, spec: DiffusionSpec, alpha: float,
                      n: int = 256, ny: int = 401, with_lambda: bool = True) -> tuple[EffectiveTensors, CorrectorSet]:
    """Diffusive-setting tensors: ``a_eff``, ``a^{k,eff}`` for ``k <= J0`` and Poisson-route Lambda."""
    from .limits import lambda_from_poisson_1d, sqrt_psd

    J = j0_order(alpha)
    ys = spec.working_grid(ny)
    cs = corrector_cascade(model, ys, J, "C", spec=spec, n=n)
    a_eff = effective_matrix(cs)
    a_k = [higher_effective(k, cs) for k in range(1, J + 1)]
    lam = lam_sqrt = None
    if with_lambda:
        fs = fluctuation_series(cs, a_eff)
        dens = invariant_density_1d(spec, ys)
        lc = lambda_from_poisson_1d(spec, fs, dens)
        lam = lc.Lambda
        lam_sqrt = sqrt_psd(lam)
    meta = {"model": model.model_id, "params": model.params, "driver": spec.name,
            "alpha": alpha, "J0": J, "n_cell": n, "ny": ny, "setting": "C"}
    return EffectiveTensors(a_eff, a_k, lam, lam_sqrt, meta), cs


def density_for(spec: DiffusionSpec, ny: int = 401) -> InvariantDensity:
    return invariant_density_1d(spec, spec.working_grid(ny))
