"""Uniform periodic grids on the unit torus and spectral calculus on them.

Fields are stored node-major: ``values.shape == grid.shape + component_shape``.
For a vector field ``chi`` the gradient has ``grad[..., i, j] = d_i chi_j``;
divergence contracts the *first* component index, so ``div(M)[..., j] =
sum_i d_i M[..., i, j]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TorusGrid:
    dim: int
    n: int

    @property
    def spacing(self) -> float:
        return 1.0 / self.n

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.dim

    @property
    def size(self) -> int:
        return self.n**self.dim

    def nodes(self) -> np.ndarray:
        """1D node coordinates ``i / n``."""
        return np.arange(self.n) / self.n

    def mesh(self) -> tuple[np.ndarray, ...]:
        z = self.nodes()
        return tuple(np.meshgrid(*([z] * self.dim), indexing="ij"))

    def wavenumbers(self) -> np.ndarray:
        """Integer wavenumbers in numpy FFT order; the Nyquist mode is kept as -n/2."""
        return np.fft.fftfreq(self.n, d=1.0 / self.n)


@dataclass(frozen=True)
class GridField:
    grid: TorusGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape[: self.grid.dim] != self.grid.shape:
            raise ValueError(
                f"field shape {v.shape} inconsistent with grid shape {self.grid.shape}"
            )
        object.__setattr__(self, "values", v)

    @property
    def component_shape(self) -> tuple[int, ...]:
        return self.values.shape[self.grid.dim :]

    def __add__(self, other: GridField) -> GridField:
        return GridField(self.grid, self.values + other.values)

    def __sub__(self, other: GridField) -> GridField:
        return GridField(self.grid, self.values - other.values)

    def __mul__(self, c: float) -> GridField:
        return GridField(self.grid, self.values * c)

    __rmul__ = __mul__


def make_grid(dim: int, n: int) -> TorusGrid:
    if dim not in (1, 2):
        raise ValueError(f"dim must be 1 or 2, got {dim}")
    if n < 8 or n & (n - 1):
        raise ValueError(f"n must be a power of two >= 8, got {n}")
    return TorusGrid(dim, n)


def field(grid: TorusGrid, fn) -> GridField:
    """Sample ``fn(*coords)`` on the grid nodes."""
    return GridField(grid, np.asarray(fn(*grid.mesh()), dtype=float))


def mean(f: GridField) -> np.ndarray | float:
    """Torus average; the periodic trapezoid rule, exact for band-limited fields."""
    m = f.values.mean(axis=tuple(range(f.grid.dim)))
    return float(m) if np.ndim(m) == 0 else m


def _deriv_axis(values: np.ndarray, axis: int, n: int) -> np.ndarray:
    k = np.fft.rfftfreq(n, d=1.0 / n)
    mult = 2j * np.pi * k
    if n % 2 == 0:
        mult[-1] = 0.0  # Nyquist mode has no antisymmetric partner
    shape = [1] * values.ndim
    shape[axis] = k.size
    spec = np.fft.rfft(values, axis=axis) * mult.reshape(shape)
    return np.fft.irfft(spec, n=n, axis=axis)


def gradient(f: GridField) -> GridField:
    """Spectral gradient; a new axis of length ``dim`` is inserted before the components."""
    d = f.grid.dim
    parts = [_deriv_axis(f.values, i, f.grid.n) for i in range(d)]
    return GridField(f.grid, np.stack(parts, axis=d))


def divergence(v: GridField) -> GridField:
    d = v.grid.dim
    comp = v.component_shape
    if not comp or comp[0] != d:
        raise ValueError(f"divergence needs a leading component axis of length {d}, got {comp}")
    out = sum(_deriv_axis(v.values[(slice(None),) * d + (i,)], i, v.grid.n) for i in range(d))
    return GridField(v.grid, out)


def laplacian(f: GridField) -> GridField:
    return divergence(gradient(f))


def inner(f: GridField, g: GridField) -> float:
    """L2(torus) inner product, summed over components."""
    return float(np.sum(f.values * g.values) / f.grid.size)


def norm(f: GridField) -> float:
    return float(np.sqrt(inner(f, f)))


def interpolate(f: GridField, z) -> np.ndarray:
    """Trigonometric interpolation of a 1D field at arbitrary points ``z`` (taken mod 1)."""
    if f.grid.dim != 1:
        raise NotImplementedError("interpolation is implemented for d = 1")
    n = f.grid.n
    z = np.asarray(z, dtype=float) % 1.0
    uz, inv = np.unique(z.ravel(), return_inverse=True)
    coef = np.fft.rfft(f.values, axis=0) / n
    k = np.arange(coef.shape[0])
    weight = np.full(k.size, 2.0)
    weight[0] = 1.0
    if n % 2 == 0:
        weight[-1] = 1.0
    phase = np.exp(2j * np.pi * np.outer(uz, k)) * weight
    vals = np.real(np.tensordot(phase, coef, axes=(1, 0)))
    return vals[inv].reshape(z.shape + f.component_shape)
