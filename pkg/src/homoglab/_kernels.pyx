# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: theta-scheme time stepping and OU recursion.

The pure-Python twin lives in ``_kernels_py``; both expose the same
functions with the same argument conventions.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef void _theta_solve(double[::1] u, const double[::1] af, double r,
                       double theta, const double[::1] src, double dt,
                       double[::1] cp, double[::1] dp) noexcept nogil:
    # One theta step for u_t = (a u_x)_x on interior nodes, Dirichlet zeros
    # at both walls. af has len(u) + 1 face values. Thomas algorithm.
    cdef Py_ssize_t n = u.shape[0]
    cdef Py_ssize_t i
    cdef double ex = (1.0 - theta) * r
    cdef double im = theta * r
    cdef double left, right, rhs, lo, di, up, denom, um, up_

    for i in range(n):
        left = af[i]
        right = af[i + 1]
        um = u[i - 1] if i > 0 else 0.0
        up_ = u[i + 1] if i < n - 1 else 0.0
        rhs = u[i] + ex * (right * (up_ - u[i]) - left * (u[i] - um))
        if src.shape[0] > 0:
            rhs += dt * src[i]
        lo = -im * left
        di = 1.0 + im * (left + right)
        up = -im * right
        if i == 0:
            denom = di
            cp[i] = up / denom
            dp[i] = rhs / denom
        else:
            denom = di - lo * cp[i - 1]
            cp[i] = up / denom
            dp[i] = (rhs - lo * dp[i - 1]) / denom
    u[n - 1] = dp[n - 1]
    for i in range(n - 2, -1, -1):
        u[i] = dp[i] - cp[i] * u[i + 1]


def theta_step(double[::1] u, const double[::1] af, double dx, double dt,
               double theta=0.5, src=None):
    """Advance interior values ``u`` in place by one theta step."""
    cdef Py_ssize_t n = u.shape[0]
    cdef double[::1] cp = np.empty(n)
    cdef double[::1] dp = np.empty(n)
    cdef double[::1] s
    if src is None:
        s = np.empty(0)
    else:
        s = np.ascontiguousarray(src, dtype=np.float64)
    with nogil:
        _theta_solve(u, af, dt / (dx * dx), theta, s, dt, cp, dp)


def march_separable(double[::1] u, const double[::1] c0f, const double[::1] c1f,
                    const double[::1] gvals, double dx, double dt,
                    Py_ssize_t n_startup, const signed char[::1] save_mask,
                    double[:, ::1] out):
    """Time-march with face coefficients ``c0f + c1f * gvals[k]`` at step k.

    The first ``n_startup`` steps are each replaced by two backward-Euler
    half steps (Rannacher start); the rest are Crank-Nicolson.  Snapshots
    are written to ``out`` after every step whose ``save_mask`` entry is
    set (index 0 is the initial state).  ``u`` is overwritten with the
    final state.
    """
    cdef Py_ssize_t n = u.shape[0]
    cdef Py_ssize_t nsteps = gvals.shape[0]
    cdef Py_ssize_t k, i, row = 0
    cdef double[::1] af = np.empty(n + 1)
    cdef double[::1] cp = np.empty(n)
    cdef double[::1] dp = np.empty(n)
    cdef double[::1] nosrc = np.empty(0)
    cdef double r = dt / (dx * dx)
    cdef double g

    with nogil:
        if save_mask[0]:
            for i in range(n):
                out[row, i] = u[i]
            row += 1
        for k in range(nsteps):
            g = gvals[k]
            for i in range(n + 1):
                af[i] = c0f[i] + c1f[i] * g
            if k < n_startup:
                _theta_solve(u, af, 0.5 * r, 1.0, nosrc, 0.5 * dt, cp, dp)
                _theta_solve(u, af, 0.5 * r, 1.0, nosrc, 0.5 * dt, cp, dp)
            else:
                _theta_solve(u, af, r, 0.5, nosrc, dt, cp, dp)
            if save_mask[k + 1]:
                for i in range(n):
                    out[row, i] = u[i]
                row += 1
    return row


def ou_recursion(double x0, double decay, const double[::1] innov):
    """x[0] = x0, x[k+1] = decay * x[k] + innov[k]."""
    cdef Py_ssize_t n = innov.shape[0]
    cdef Py_ssize_t k
    out_arr = np.empty(n + 1)
    cdef double[::1] out = out_arr
    out[0] = x0
    with nogil:
        for k in range(n):
            out[k + 1] = decay * out[k] + innov[k]
    return out_arr
