import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from homoglab.torus import (GridField, divergence, field, gradient, inner, interpolate, laplacian,
                            make_grid, mean, norm)

TWO_PI = 2 * np.pi


def test_make_grid_nodes():
    g = make_grid(1, 8)
    np.testing.assert_array_equal(g.nodes(), np.arange(8) / 8)
    assert make_grid(2, 16).size == 256


@pytest.mark.parametrize("dim,n", [(1, 7), (1, 4), (3, 8), (2, 12)])
def test_make_grid_rejects(dim, n):
    with pytest.raises(ValueError):
        make_grid(dim, n)


def test_field_shape_checked():
    with pytest.raises(ValueError):
        GridField(make_grid(1, 8), np.zeros(9))


def test_mean_examples():
    g = make_grid(1, 64)
    assert abs(mean(field(g, lambda z: np.cos(TWO_PI * z)))) < 1e-14
    assert mean(field(g, lambda z: 3.0 + 0 * z)) == pytest.approx(3.0, abs=1e-15)
    assert mean(field(g, lambda z: 2 + np.cos(TWO_PI * z))) == pytest.approx(2.0, abs=1e-14)


@pytest.mark.parametrize("k", [1, 2, 5])
def test_gradient_single_mode(k):
    g = make_grid(1, 64)
    z = g.nodes()
    d = gradient(field(g, lambda z: np.sin(TWO_PI * k * z))).values[:, 0]
    assert np.max(np.abs(d - TWO_PI * k * np.cos(TWO_PI * k * z))) < 1e-12


def test_gradient_of_constant_vanishes():
    g = make_grid(2, 16)
    assert np.max(np.abs(gradient(field(g, lambda x, y: 4.0 + 0 * x)).values)) < 1e-14


def test_divergence_examples():
    g = make_grid(1, 64)
    z = g.nodes()
    v = GridField(g, np.cos(TWO_PI * z)[:, None])
    assert np.max(np.abs(divergence(v).values + TWO_PI * np.sin(TWO_PI * z))) < 1e-12
    assert np.max(np.abs(divergence(GridField(g, np.ones((64, 1)))).values)) < 1e-14
    lap = laplacian(field(g, lambda z: np.sin(TWO_PI * z))).values
    assert np.max(np.abs(lap + TWO_PI**2 * np.sin(TWO_PI * z))) < 1e-10


def test_divergence_shape_error():
    g = make_grid(2, 8)
    with pytest.raises(ValueError):
        divergence(GridField(g, np.zeros((8, 8, 3))))


def test_gradient_2d_mixed_mode():
    g = make_grid(2, 32)
    x, y = g.mesh()
    f = field(g, lambda x, y: np.sin(TWO_PI * x) * np.cos(2 * TWO_PI * y))
    gr = gradient(f).values
    assert np.max(np.abs(gr[..., 0] - TWO_PI * np.cos(TWO_PI * x) * np.cos(2 * TWO_PI * y))) < 1e-11
    assert np.max(np.abs(gr[..., 1] + 2 * TWO_PI * np.sin(TWO_PI * x) * np.sin(2 * TWO_PI * y))) < 1e-11


def _bandlimited(coefs, n):
    z = np.arange(n) / n
    out = np.zeros(n)
    for k, (a, b) in enumerate(coefs, start=1):
        out += a * np.cos(TWO_PI * k * z) + b * np.sin(TWO_PI * k * z)
    return out


coef_lists = st.lists(st.tuples(st.floats(-2, 2), st.floats(-2, 2)), min_size=1, max_size=6)


@settings(max_examples=40, deadline=None)
@given(coef_lists, coef_lists, st.floats(-3, 3), st.floats(-3, 3))
def test_integration_by_parts_and_linearity(cf, cg, alpha, beta):
    n = 32
    g = make_grid(1, n)
    f = GridField(g, _bandlimited(cf, n))
    v = GridField(g, _bandlimited(cg, n)[:, None])
    assert abs(inner(gradient(f), v) + inner(f, divergence(v))) < 1e-10
    assert abs(mean(gradient(f))[0]) < 1e-12
    h = GridField(g, _bandlimited(cg, n))
    lhs = gradient(f * alpha + h * beta).values
    rhs = alpha * gradient(f).values + beta * gradient(h).values
    assert np.max(np.abs(lhs - rhs)) < 1e-10


def test_interpolation_exact_for_modes():
    g = make_grid(1, 16)
    f = field(g, lambda z: 1 + np.cos(TWO_PI * 3 * z) - 0.5 * np.sin(TWO_PI * z))
    zq = np.linspace(-0.3, 1.7, 23)
    exact = 1 + np.cos(TWO_PI * 3 * zq) - 0.5 * np.sin(TWO_PI * zq)
    assert np.max(np.abs(interpolate(f, zq) - exact)) < 1e-13
    assert norm(f) > 0
