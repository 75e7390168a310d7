import struct

import numpy as np
import pytest

from homoglab import limits, media, solvers
from homoglab.solvers import (BoxDomain, ResolutionError, SpaceTimeField, fit_gaussian_bound,
                              fundamental_probe, march, solve_cascade_comarch, solve_cascade_pde,
                              solve_fine, solve_homogenized, solve_limit_spde, step_rule)


def gauss(w):
    return lambda x: np.exp(-x**2 / (2 * w * w))


def heat_exact(x, t, w, a):
    v = w * w + 2 * a * t
    return w / np.sqrt(v) * np.exp(-x**2 / (2 * v))


def test_box_geometry():
    d = BoxDomain(6.0, 12)
    assert d.dx == 1.0
    assert d.nodes[0] == -6 and d.nodes[-1] == 6 and d.nodes.size == 13
    assert d.faces.size == 12
    assert BoxDomain.for_eps(6.0, 0.05).m == 3840
    with pytest.raises(ValueError):
        BoxDomain(0.0, 10)


def test_step_rule():
    dt, n, h = step_rule(0.1, 1.0, 0.5, 0.01)
    assert dt <= min(0.125 * 0.01, 4 * 0.1 * 0.01) and n * dt == pytest.approx(0.5)
    assert dt == pytest.approx(4 * 0.1 * h)


def test_constant_coefficient_heat_kernel():
    sigma0 = 1.5
    dom = BoxDomain(8.0, 1024)
    u = solve_fine(media.make_model("constant", value=sigma0), None, 1.0, 1.0, gauss(1.0), dom,
                   1e-4, 0.5, save_every=100)
    err = max(np.abs(u.values[k] - heat_exact(dom.nodes, t, 1.0, sigma0)).max()
              for k, t in enumerate(u.times))
    assert err < 1e-5


def test_homogenized_unit_gaussian_width():
    dom = BoxDomain(8.0, 4096)
    u = solve_homogenized(1.0, gauss(1.0), dom, 2.5e-5, 0.5, save_every=400)
    err = max(np.abs(u.values[k] - heat_exact(dom.nodes, t, 1.0, 1.0)).max()
              for k, t in enumerate(u.times))
    assert err < 1e-6


def test_homogenized_linearity_and_mass():
    dom = BoxDomain(12.0, 1024)
    p1, p2 = gauss(0.5), lambda x: 0.3 * np.exp(-(x - 1) ** 2)
    u1 = solve_homogenized(1.3, p1, dom, 1e-3, 0.5, save_every=50)
    u2 = solve_homogenized(1.3, p2, dom, 1e-3, 0.5, save_every=50)
    u12 = solve_homogenized(1.3, lambda x: p1(x) + p2(x), dom, 1e-3, 0.5, save_every=50)
    assert np.max(np.abs(u12.values - u1.values - u2.values)) < 1e-12
    mass = u12.values.sum(axis=1) * dom.dx
    assert np.max(np.abs(mass - mass[0])) < 1e-8
    assert np.max(np.abs(u12.values[:, [0, -1]])) < 1e-10


def _mms_error(m, dt, L=6.0, T=0.5):
    dom = BoxDomain(L, m)
    k = np.pi / L
    a = lambda x: 2 + np.sin(x)  # noqa: E731
    da = np.cos
    x = dom.nodes

    def exact(t):
        return np.exp(-t) * np.sin(k * x)

    def source(t):
        # f = u_t - (a u_x)_x
        e = np.exp(-t)
        return -e * np.sin(k * x) - (da(x) * e * k * np.cos(k * x) - a(x) * e * k * k * np.sin(k * x))

    nsteps = int(round(T / dt))
    u = march(dom, exact(0.0), dt, nsteps, a(dom.faces), source_fn=source, n_startup=2,
              save_every=nsteps)
    return np.sqrt(np.sum((u.values[-1] - exact(T)) ** 2) * dom.dx)


def test_manufactured_solution_second_order():
    e1 = _mms_error(64, 0.02)
    e2 = _mms_error(128, 0.01)
    assert 3.0 <= e1 / e2 <= 5.0


def test_periodic_homogenization_rate():
    model = media.make_model("cosine")
    dom_ref = None
    errs = []
    eps_list = [0.2, 0.1, 0.05]
    for eps in eps_list:
        dom = BoxDomain.for_eps(6.0, eps)
        dt = 0.125 * eps**2
        n = int(np.ceil(0.5 / dt))
        dt = 0.5 / n
        ue = solve_fine(model, None, eps, 1.0, gauss(0.5), dom, dt, 0.5, save_every=n // 10 or 1)
        u0 = solve_homogenized(np.sqrt(3.0), gauss(0.5), dom, dt, 0.5, save_every=n // 10 or 1)
        errs.append(np.sqrt(np.sum((ue.values[-1] - u0.values[-1]) ** 2) * dom.dx))
        dom_ref = dom
    assert dom_ref is not None
    assert errs[0] > errs[1] > errs[2]
    fit = limits.fit_rate(eps_list, errs)
    assert abs(fit.slope - 1.0) < 0.2


def test_resolution_preconditions():
    model = media.make_model("cosine")
    with pytest.raises(ResolutionError):
        solve_fine(model, None, 0.1, 1.0, gauss(0.5), BoxDomain(6.0, 512), 1e-4, 0.1)
    with pytest.raises(ResolutionError):
        solve_fine(model, None, 0.1, 1.0, gauss(0.5), BoxDomain.for_eps(6.0, 0.1), 0.01, 0.1)
    add = media.make_model("additive")
    with pytest.raises(ValueError):
        solve_fine(add, None, 0.1, 1.0, gauss(0.5), BoxDomain.for_eps(6.0, 0.1), 1e-3, 0.1)
    path = media.simulate_driver(media.make_driver("ou"), 1.0, 0.01, seed=0)
    with pytest.raises(ValueError):
        solve_fine(add, path, 0.1, 1.0, gauss(0.5), BoxDomain.for_eps(6.0, 0.1), 1e-3, 0.5)


def test_boundary_flag():
    u = solve_homogenized(1.0, gauss(2.0), BoxDomain(3.0, 128), 1e-2, 0.5)
    assert not u.boundary_ok


@pytest.fixture(scope="module")
def additive_run():
    model = media.make_model("additive")
    eps = 0.1
    dt, n, h = step_rule(eps, 1.0, 0.5, 0.01)
    path = media.simulate_driver(media.make_driver("ou"), 0.5 / eps + 2 * h, h, seed=3)
    dom = BoxDomain.for_eps(12.0, eps)
    u = solve_fine(model, path, eps, 1.0, gauss(0.5), dom, dt, 0.5, save_every=n // 50)
    return u


def test_comparison_principle_and_energy(additive_run):
    u = additive_run
    assert u.values.min() >= -1e-10
    assert np.all(np.diff(u.l2_space()) <= 1e-10)
    mass = u.values.sum(axis=1) * u.domain.dx
    assert np.max(np.abs(mass - mass[0])) < 1e-8
    assert u.boundary_ok


def test_save_load_roundtrip(additive_run, tmp_path):
    u = additive_run
    p = tmp_path / "u.bin"
    u.save(p)
    raw = p.read_bytes()
    m, rows, dt, dx, L = struct.unpack_from("<qqddd", raw)
    assert (m, rows, L) == (u.domain.m, u.values.shape[0], u.domain.L)
    assert dt == u.dt and dx == u.domain.dx
    back = SpaceTimeField.load(p)
    assert np.array_equal(back.values, u.values)
    assert back.meta["seed"] == 3 and back.meta["eps"] == 0.1


def test_cascade_zero_source():
    dom = BoxDomain(6.0, 256)
    u0 = solve_homogenized(1.0, gauss(0.5), dom, 1e-3, 0.2)
    u1 = solve_cascade_pde(1, 1.0, [0.0], [u0])
    assert np.all(u1.values == 0.0)


def test_cascade_duhamel_oracle_and_linearity():
    # Gaussian u0: S(t-s) d_xx u0(s) = d_xx u0(t), so u1(t) = a1 t d_xx u0(t) exactly
    a, a1, w = 1.0, 0.1, 0.7
    dom = BoxDomain(8.0, 2048)
    u0 = solve_homogenized(a, gauss(w), dom, 5e-4, 0.5)
    u1 = solve_cascade_pde(1, a, [a1], [u0])
    x = dom.nodes
    err = 0.0
    for k, t in enumerate(u1.times):
        v = w * w + 2 * a * t
        g = w / np.sqrt(v) * np.exp(-x**2 / (2 * v))
        err = max(err, np.abs(u1.values[k] - a1 * t * g * (x**2 / v**2 - 1 / v)).max())
    assert err < 1e-4
    u1b = solve_cascade_pde(1, a, [2 * a1], [u0])
    assert np.max(np.abs(u1b.values - 2 * u1.values)) < 1e-14
    both = solve_cascade_comarch(a, [a1], gauss(w), dom, 5e-4, 0.5, 1, save_every=100)
    assert np.max(np.abs(both[1].values - u1.values[::100])) < 1e-6


def test_cascade_grid_mismatch():
    u0 = solve_homogenized(1.0, gauss(0.5), BoxDomain(6.0, 256), 1e-3, 0.1)
    other = solve_homogenized(1.0, gauss(0.5), BoxDomain(6.0, 128), 1e-3, 0.1)
    with pytest.raises(ValueError):
        solve_cascade_pde(2, 1.0, [0.1, 0.1], [u0, other])


@pytest.fixture(scope="module")
def spde_setup():
    dom = BoxDomain(6.0, 256)
    dt = 0.01
    u0 = solve_homogenized(1.0, gauss(0.5), dom, dt, 0.5)
    psi = lambda x, t: t * np.exp(-x**2)  # noqa: E731
    return dom, dt, u0, psi


def test_limit_spde_zero_lambda(spde_setup):
    _, _, u0, _ = spde_setup
    v = solve_limit_spde(1.0, 0.0, u0, np.random.default_rng(0).standard_normal(50) * 0.1)
    assert np.all(v.values == 0.0)


def test_limit_spde_mean_zero(spde_setup):
    _, dt, u0, psi = spde_setup
    pv = psi(u0.domain.nodes[None, :], u0.times[:, None])
    vals = []
    for i in range(64):
        dW = np.sqrt(dt) * np.random.default_rng(100 + i).standard_normal(50)
        vals.append(solve_limit_spde(1.0, 0.5, u0, dW).pair(pv))
    vals = np.array(vals)
    assert abs(vals.mean()) < 3 * vals.std(ddof=1) / np.sqrt(vals.size)


def test_limit_spde_variance_matches_isometry(spde_setup):
    _, dt, u0, psi = spde_setup
    lam_sqrt = 0.5
    oracle = limits.functional_variance_spde(psi, lam_sqrt, u0, 1.0, n_quad=51)
    pv = psi(u0.domain.nodes[None, :], u0.times[:, None])
    # <v, psi> is linear in the increments: its exact variance is dt * sum c_k^2
    c = np.array([solve_limit_spde(1.0, lam_sqrt, u0, np.eye(50)[k]).pair(pv) for k in range(50)])
    exact_discrete = dt * np.sum(c**2)
    assert abs(exact_discrete - oracle) / oracle < 0.05
    # Monte Carlo with 256 replicates, judged against its own standard error
    mc = np.array([solve_limit_spde(1.0, lam_sqrt, u0,
                                    np.sqrt(dt) * np.random.default_rng(7000 + i).standard_normal(50)).pair(pv)
                   for i in range(256)])
    var = mc.var(ddof=1)
    assert abs(var - oracle) < 3 * var * np.sqrt(2 / 255) + 0.05 * oracle
    # quadratic in Lambda^{1/2}
    assert limits.functional_variance_spde(psi, 2 * lam_sqrt, u0, 1.0, n_quad=51) == pytest.approx(4 * oracle)


def test_limit_spde_rejects_bad_factor(spde_setup):
    _, _, u0, _ = spde_setup
    with pytest.raises(ValueError):
        solve_limit_spde(1.0, -1.0, u0, np.zeros(50))
    with pytest.raises(ValueError):
        solve_limit_spde(1.0, 1.0, u0, np.zeros(3))


@pytest.fixture(scope="module")
def heat_probe():
    one = media.make_model("constant", value=1.0)
    dom = BoxDomain(8.0, 4096)
    return dom, fundamental_probe(one, None, 1.0, 1.0, 0.0, 0.0, dom, 1e-5, 0.25, save_every=500)


def test_probe_recovers_heat_kernel_constants(heat_probe):
    _, P = heat_probe
    fv = fit_gaussian_bound([P], "value")
    assert fv.C == pytest.approx(0.25, rel=0.05)
    assert fv.c == pytest.approx((4 * np.pi) ** -0.5, rel=0.05)
    assert fv.violation_rate == 0.0
    fg = fit_gaussian_bound([P], "gradient")
    assert fg.C == pytest.approx(0.25, rel=0.10)


def test_probe_mass_and_positivity(heat_probe):
    dom, P = heat_probe
    assert np.max(np.abs(P.values.sum(axis=1) * dom.dx - 1.0)) < 1e-6
    assert P.values.min() >= -1e-10


def test_probe_symmetry():
    one = media.make_model("constant", value=1.0)
    dom = BoxDomain(8.0, 1024)
    p1 = fundamental_probe(one, None, 1.0, 1.0, -1.0, 0.0, dom, 1e-4, 0.25, save_every=50)
    p2 = fundamental_probe(one, None, 1.0, 1.0, 0.5, 0.0, dom, 1e-4, 0.25, save_every=50)
    i1 = int(np.argmin(np.abs(dom.nodes + 1.0)))
    i2 = int(np.argmin(np.abs(dom.nodes - 0.5)))
    assert np.max(np.abs(p1.values[:, i2] - p2.values[:, i1])) < 1e-8


def test_fit_requires_samples(heat_probe):
    _, P = heat_probe
    with pytest.raises(ValueError):
        fit_gaussian_bound([P], "value", exclude_steps=10**9)
    with pytest.raises(ValueError):
        fit_gaussian_bound([P], "hessian")


def test_upper_hull_contains_all_points(rng):
    u = rng.random(200)
    v = rng.standard_normal(200)
    hu, hv = solvers._upper_hull(u, v)
    assert np.all(np.interp(u, hu, hv) >= v - 1e-12)


def test_harmonic_faces():
    np.testing.assert_allclose(solvers.harmonic_faces([1.0, 3.0, 3.0]), [1.5, 3.0])
