import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from calderonet.hilbert import (
    BoundaryFunction,
    BoundaryFunctional,
    circle_basis,
    domain_basis,
    dual_circle_basis,
    extend,
    frequencies,
    h_half_inner,
    h_half_norm,
    h_minus_half_norm,
    mode_labels,
    multiplier_weights,
    pairing,
    project,
    projection_tail_error,
    riesz_inverse,
    riesz_map,
    truncation_of,
)

K = 5
N = 2 * K + 1
finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
vectors = arrays(np.float64, N, elements=finite)


def test_ordering_and_labels():
    assert mode_labels(2) == ["const", "1c", "1s", "2c", "2s"]
    assert list(frequencies(2)) == [0, 1, 1, 2, 2]
    assert truncation_of(7) == 3
    with pytest.raises(ValueError):
        truncation_of(4)


def test_boundary_function_evaluates_trig_series():
    f = BoundaryFunction([1.0, 2.0, 0.0, 0.0, -1.0])
    t = np.linspace(0, 2 * np.pi, 7)
    assert np.allclose(f(t), 1 + 2 * np.cos(t) - np.sin(2 * t))


def test_half_norm_examples():
    assert h_half_norm(BoundaryFunction.zeros(K)) == 0.0
    f = BoundaryFunction.mode(K, 1)
    assert np.isclose(h_half_norm(f), np.sqrt(np.pi * np.sqrt(2.0)))
    g = BoundaryFunction(np.arange(N, dtype=float))
    assert np.isclose(h_half_norm(g * -3.0), 3 * h_half_norm(g))


def test_half_norm_matches_quadrature_definition():
    # sum (1+k^2)^{1/2} |fhat_k|^2 with fhat in the L2-orthonormal trig basis
    rng = np.random.default_rng(0)
    c = rng.standard_normal(N)
    t = np.linspace(0, 2 * np.pi, 512, endpoint=False)
    vals = BoundaryFunction(c)(t)
    dt = 2 * np.pi / t.size
    total = (np.sum(vals) * dt / np.sqrt(2 * np.pi)) ** 2
    for k in range(1, K + 1):
        for fn in (np.cos, np.sin):
            fhat = np.sum(vals * fn(k * t)) * dt / np.sqrt(np.pi)
            total += np.sqrt(1 + k**2) * fhat**2
    assert np.isclose(h_half_norm(BoundaryFunction(c)), np.sqrt(total), rtol=1e-12)


def test_minus_half_norm_examples():
    assert h_minus_half_norm(BoundaryFunctional(np.zeros(N))) == 0.0
    w = multiplier_weights(K)
    for slot in (1, 5):
        F = BoundaryFunctional(np.eye(N)[slot])
        assert np.isclose(h_minus_half_norm(F), w[slot] ** -0.5)


def test_riesz_examples():
    assert np.all(riesz_map(BoundaryFunctional(np.zeros(N))).coeffs == 0)
    w = multiplier_weights(K)
    F = BoundaryFunctional(w[1] * np.eye(N)[1])
    assert np.allclose(riesz_map(F).coeffs, np.eye(N)[1])
    G = BoundaryFunctional(np.linspace(-2, 3, N))
    assert np.allclose(riesz_inverse(riesz_map(G)).coeffs, G.coeffs, rtol=0, atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(vectors)
def test_riesz_isometry_and_duality(c):
    F = BoundaryFunctional(c)
    f = riesz_map(F)
    assert abs(h_half_norm(f) - h_minus_half_norm(F)) <= 1e-12 * max(1.0, h_minus_half_norm(F))
    assert np.isclose(pairing(F, f), h_minus_half_norm(F) ** 2, rtol=1e-10, atol=1e-10)
    assert np.isclose(h_minus_half_norm(riesz_inverse(f)), h_half_norm(f), rtol=1e-12, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(vectors, vectors)
def test_riesz_represents_pairing(c, g):
    F, gf = BoundaryFunctional(c), BoundaryFunction(g)
    lhs, rhs = pairing(F, gf), h_half_inner(riesz_map(F), gf)
    assert np.isclose(lhs, rhs, rtol=1e-10, atol=1e-8)


@settings(max_examples=60, deadline=None)
@given(vectors, vectors)
def test_cauchy_schwarz_duality(c, g):
    F, f = BoundaryFunctional(c), BoundaryFunction(g)
    assert abs(pairing(F, f)) <= h_minus_half_norm(F) * h_half_norm(f) * (1 + 1e-12) + 1e-12


@settings(max_examples=60, deadline=None)
@given(vectors, vectors, finite, finite)
def test_project_extend_linearity(x, y, s, t):
    b = circle_basis(K)
    lhs = project(s * x + t * y, b, N)
    rhs = s * project(x, b, N) + t * project(y, b, N)
    scale = 1 + np.abs(lhs).max() + np.abs(s * project(x, b, N)).max() + np.abs(t * project(y, b, N)).max()
    assert np.allclose(lhs, rhs, rtol=0, atol=1e-12 * scale)
    lhs = extend(s * x + t * y, b, N)
    rhs = s * extend(x, b, N) + t * extend(y, b, N)
    scale = 1 + np.abs(s * extend(x, b, N)).max() + np.abs(t * extend(y, b, N)).max()
    assert np.allclose(lhs, rhs, rtol=0, atol=1e-12 * scale)


@settings(max_examples=60, deadline=None)
@given(vectors)
def test_parseval_round_trip(x):
    for b in (circle_basis(K), dual_circle_basis(K)):
        back = extend(project(x, b, N), b, N)
        assert np.allclose(back, x, rtol=1e-12, atol=1e-12 * (1 + np.abs(x).max()))
        a = x[:7]
        assert np.allclose(project(extend(a, b, 7), b, 7), a, rtol=1e-12, atol=1e-12)


def test_circle_basis_is_orthonormal():
    b = circle_basis(K)
    G = np.array([[b.inner(b.member(i), b.member(j)) for j in range(N)] for i in range(N)])
    assert np.abs(G - np.eye(N)).max() < 1e-10
    for i in range(N):
        f = BoundaryFunction(b.member(i))
        assert np.isclose(h_half_norm(f), 1.0)


def test_project_examples():
    b = circle_basis(K)
    x = extend(np.array([1.0, 2.0, 3.0] + [0.0] * (N - 3)), b, N)
    assert np.allclose(project(x, b, 2), [1, 2])
    e3 = extend(np.eye(N)[2], b, N)
    assert np.allclose(project(e3, b, 5), [0, 0, 1, 0, 0])
    with pytest.raises(ValueError):
        project(x, b, N + 1)
    with pytest.raises(ValueError):
        extend(np.ones(3), b, 2)


def test_extend_examples():
    b = circle_basis(K)
    assert np.all(extend(np.zeros(4), b, 4) == 0)
    assert np.allclose(extend(np.eye(4)[1], b, 4), b.member(1))
    a = np.array([0.3, -1.2, 2.0, 0.5])
    assert np.isclose(float(b.norm(extend(a, b, 4))), np.linalg.norm(a))


def test_projection_tail_error():
    b = circle_basis(K)
    g = [extend(np.eye(N)[i], b, N) for i in range(N)]
    assert projection_tail_error(g[0], b, 1) < 1e-14
    assert np.isclose(projection_tail_error(g[0] + g[4], b, 4), 1.0)
    rng = np.random.default_rng(3)
    for _ in range(100):
        x = rng.standard_normal(N)
        errs = [projection_tail_error(x, b, d) for d in range(N + 1)]
        assert np.all(np.diff(errs) <= 1e-12)
        assert errs[-1] < 1e-12


def test_domain_basis_orthonormal_under_mass(mesh10):
    from calderonet.fem import mass_matrix

    b = domain_basis(mesh10, 20)
    M = mass_matrix(mesh10)
    G = b.members @ (M @ b.members.T)
    assert np.abs(G - np.eye(20)).max() < 1e-10
    assert b.kind == "l2_domain_kl"
    # first member is the normalized constant: 1 / sqrt(area)
    area = np.ones(mesh10.n_vertices) @ (M @ np.ones(mesh10.n_vertices))
    assert np.allclose(np.abs(b.members[0]), 1 / np.sqrt(area))
    assert np.all(b.normalization > 0)
