"""Pure-Python (numpy/LAPACK) twin of the compiled ``_kernels`` module."""
import numpy as np
from scipy.linalg import lapack
from scipy.signal import lfilter


def _theta_solve(u, af, r, theta, src, dt):
    left = af[:-1]
    right = af[1:]
    flux = np.empty(u.size + 1)
    flux[1:-1] = np.diff(u)
    flux[0] = u[0]
    flux[-1] = -u[-1]
    flux *= af
    rhs = u + (1.0 - theta) * r * np.diff(flux)
    if src is not None:
        rhs += dt * src
    im = theta * r
    diag = 1.0 + im * (left + right)
    off = -im * af[1:-1]
    _, _, _, x, info = lapack.dgtsv(off, diag, off, rhs)
    if info != 0:
        raise np.linalg.LinAlgError(f"dgtsv failed with info={info}")
    u[:] = x


def theta_step(u, af, dx, dt, theta=0.5, src=None):
    _theta_solve(u, np.asarray(af, dtype=float), dt / dx**2, theta, src, dt)


def march_separable(u, c0f, c1f, gvals, dx, dt, n_startup, save_mask, out):
    r = dt / dx**2
    row = 0
    if save_mask[0]:
        out[row] = u
        row += 1
    for k, g in enumerate(gvals):
        af = c0f + c1f * g
        if k < n_startup:
            _theta_solve(u, af, 0.5 * r, 1.0, None, 0.5 * dt)
            _theta_solve(u, af, 0.5 * r, 1.0, None, 0.5 * dt)
        else:
            _theta_solve(u, af, r, 0.5, None, dt)
        if save_mask[k + 1]:
            out[row] = u
            row += 1
    return row


def ou_recursion(x0, decay, innov):
    innov = np.asarray(innov, dtype=float)
    y, _ = lfilter([1.0], [1.0, -decay], innov, zi=[decay * x0])
    return np.concatenate(([x0], y))
