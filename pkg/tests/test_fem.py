import json

import numpy as np
import pytest

from calderonet.fem import (
    AssemblyError,
    ConductivityField,
    DtNMatrix,
    DtNOperator,
    Mesh,
    SolverError,
    annulus_dtn_eigenvalue,
    boundary_count,
    dtn_apply,
    dtn_matrix,
    dtn_pairing,
    generate_mesh,
    mass_matrix,
    solve_dirichlet,
    stiffness_matrix,
)
from calderonet.hilbert import BoundaryFunction, frequencies


def two_layer(mesh, inner=4.0, radius=0.5):
    return ConductivityField.from_function(mesh, lambda x, y: np.where(np.hypot(x, y) < radius, inner, 1.0))


def layered_oracle(k, inner, radius):
    # transmission-coefficient form of the per-mode interface problem, outer value 1
    beta = (inner - 1.0) / (inner + 1.0)
    q = beta * radius ** (2 * k)
    return k * (1 + q) / (1 - q)


def test_mesh_invariants():
    m = generate_mesh(0.5)
    assert m.n_boundary >= 12
    assert np.all(m.signed_areas() > 0)
    r = np.hypot(*m.vertices[m.boundary].T)
    assert np.abs(r - 1).max() < 1e-12
    assert np.all(np.diff(m.angles) > 0) and m.angles[0] >= 0 and m.angles[-1] < 2 * np.pi
    th = np.arctan2(m.vertices[m.boundary, 1], m.vertices[m.boundary, 0]) % (2 * np.pi)
    assert np.allclose(th, m.angles)


def test_mesh_area_and_refinement(mesh05, mesh025):
    assert abs(mesh05.signed_areas().sum() - np.pi) <= 0.01
    assert mesh05.n_boundary >= 2 * np.pi / 0.05
    assert mesh025.n_boundary >= 2 * mesh05.n_boundary
    assert boundary_count(0.05) * 2 == boundary_count(0.025)


def test_mesh_deterministic_and_serializable(tmp_path):
    a, b = generate_mesh(0.2), generate_mesh(0.2)
    assert np.array_equal(a.vertices, b.vertices) and np.array_equal(a.triangles, b.triangles)
    obj = json.loads(json.dumps(a.to_json()))
    assert set(obj) >= {"vertices", "triangles", "boundary"}
    c = Mesh.from_json(obj)
    assert np.array_equal(c.triangles, a.triangles)


def test_mesh_size_errors():
    with pytest.raises(ValueError):
        generate_mesh(1.5)
    with pytest.raises(MemoryError):
        generate_mesh(1e-3)


def test_assembly_identities(mesh10):
    K = stiffness_matrix(mesh10, np.ones(mesh10.triangles.shape[0]))
    assert np.abs(K @ np.ones(mesh10.n_vertices)).max() < 1e-12
    assert abs(K - K.T).max() < 1e-12
    M = mass_matrix(mesh10)
    assert np.isclose(M.sum(), mesh10.signed_areas().sum())
    # Dirichlet energy of x is the area
    x = mesh10.vertices[:, 0]
    assert np.isclose(x @ K @ x, mesh10.signed_areas().sum())


def test_conductivity_bounds():
    with pytest.raises(ValueError):
        ConductivityField(np.array([1.0, 5.0]), (0.5, 2.0))
    with pytest.raises(ValueError):
        ConductivityField(np.ones(3), (0.0, 2.0))


def test_assembly_errors(mesh10):
    wrong = ConductivityField(np.ones(mesh10.n_vertices), (1.0, 1.0), element_values=np.ones(3))
    with pytest.raises(AssemblyError):
        DtNOperator(mesh10, wrong)
    # a degenerate field that slips past validation is still refused by the assembler
    bad = ConductivityField(np.ones(mesh10.n_vertices), (1.0, 1.0))
    object.__setattr__(bad, "element_values", np.zeros(mesh10.triangles.shape[0]))
    with pytest.raises(AssemblyError):
        DtNOperator(mesh10, bad)


def test_solve_dirichlet_harmonic_extensions(mesh05):
    a = ConductivityField.constant(mesh05, 1.0)
    x, y = mesh05.vertices.T
    r, t = np.hypot(x, y), np.arctan2(y, x)
    u1 = solve_dirichlet(mesh05, a, BoundaryFunction.mode(3, 1))
    assert np.abs(u1 - r * np.cos(t)).max() <= 0.01
    u3 = solve_dirichlet(mesh05, a, BoundaryFunction.mode(3, 5))
    assert np.abs(u3 - r**3 * np.cos(3 * t)).max() <= 0.01
    rng = np.random.default_rng(1)
    b = ConductivityField(np.exp(0.5 * rng.standard_normal(mesh05.n_vertices)), (0.01, 100))
    u0 = solve_dirichlet(mesh05, b, BoundaryFunction.mode(3, 0, 2.5))
    assert np.abs(u0 - 2.5).max() < 1e-10


def test_solve_residual(mesh05):
    op = DtNOperator(mesh05, two_layer(mesh05))
    u = op.solve(BoundaryFunction(np.arange(7.0)))
    I = mesh05.interior
    r = (op.K_full @ u)[I]
    assert np.linalg.norm(r) <= 1e-10 * np.linalg.norm(op.K_full[I][:, mesh05.boundary] @ u[mesh05.boundary])


def test_cg_fallback_agrees(mesh10):
    a = two_layer(mesh10)
    d = DtNOperator(mesh10, a).matrix(3).entries
    c = DtNOperator(mesh10, a, method="cg").matrix(3).entries
    assert np.allclose(d, c, atol=1e-8)


def test_solver_error_carries_residual(mesh10, monkeypatch):
    op = DtNOperator(mesh10, ConductivityField.constant(mesh10, 1.0))
    class Broken:
        def solve(self, rhs):
            return np.zeros_like(rhs)

    monkeypatch.setattr(op, "_lu", Broken())
    with pytest.raises(SolverError) as exc:
        op.solve(BoundaryFunction.mode(2, 1))
    assert exc.value.residual > 1e-10


def test_pairing_examples(mesh05):
    a = ConductivityField.constant(mesh05, 1.0)
    rng = np.random.default_rng(2)
    f = BoundaryFunction(rng.standard_normal(9))
    assert abs(dtn_pairing(mesh05, a, f, BoundaryFunction.mode(4, 0, 3.0))) < 1e-9
    cos1 = BoundaryFunction.mode(4, 1)
    assert np.isclose(dtn_pairing(mesh05, a, cos1, cos1), np.pi, rtol=0.01)
    op = DtNOperator(mesh05, two_layer(mesh05))
    for _ in range(10):
        f, g = BoundaryFunction(rng.standard_normal(9)), BoundaryFunction(rng.standard_normal(9))
        assert abs(op.pairing(f, g) - op.pairing(g, f)) < 1e-9


def test_pairing_independent_of_lifting(mesh05):
    op = DtNOperator(mesh05, two_layer(mesh05))
    f, g = BoundaryFunction.mode(3, 2), BoundaryFunction.mode(3, 5)
    u = op.solve(f)
    v = np.zeros(mesh05.n_vertices)
    v[mesh05.boundary] = op.boundary_values(g)
    base = v @ op.K_full @ u
    v2 = v.copy()
    v2[mesh05.interior] = np.random.default_rng(0).standard_normal(mesh05.interior.size)
    assert np.isclose(v2 @ op.K_full @ u, base, atol=1e-9)
    assert np.isclose(op.pairing(f, g), base, atol=1e-12)


def test_apply_examples(mesh05):
    a1 = ConductivityField.constant(mesh05, 1.0)
    a2 = ConductivityField.constant(mesh05, 2.5)
    for k in (1, 2, 3):
        F = dtn_apply(mesh05, a1, BoundaryFunction.mode(4, 2 * k - 1))
        assert np.isclose(F.coeffs[2 * k - 1], np.pi * k, rtol=0.01)
        others = np.delete(F.coeffs, 2 * k - 1)
        assert np.abs(others).max() <= 0.01 * np.pi * k
    f = BoundaryFunction(np.random.default_rng(4).standard_normal(9))
    assert np.allclose(dtn_apply(mesh05, a2, f).coeffs, 2.5 * dtn_apply(mesh05, a1, f).coeffs, atol=1e-9)
    assert np.abs(dtn_apply(mesh05, a1, BoundaryFunction.mode(4, 0)).coeffs).max() < 1e-9


def test_dtn_matrix_unit_disk_spectrum(mesh05):
    D = dtn_matrix(mesh05, ConductivityField.constant(mesh05, 1.0), 3)
    expected = np.pi * np.array([0, 1, 1, 2, 2, 3, 3])
    diag = np.diag(D.entries)
    assert np.all(np.abs(diag[1:] - expected[1:]) <= 0.01 * expected[1:])
    off = D.entries - np.diag(diag)
    scale = np.maximum.outer(expected, expected)
    assert np.all(np.abs(off)[1:, 1:] <= 0.01 * scale[1:, 1:])


def test_dtn_matrix_scaling(mesh05):
    D1 = dtn_matrix(mesh05, ConductivityField.constant(mesh05, 1.0), 4).entries
    D2 = dtn_matrix(mesh05, ConductivityField.constant(mesh05, 2.0), 4).entries
    assert np.allclose(D2, 2 * D1, atol=1e-10)


def test_annulus_oracle_agrees_with_transmission_formula():
    for k in range(1, 8):
        for inner in (0.5, 2.0, 4.0):
            assert np.isclose(annulus_dtn_eigenvalue(k, inner, 1.0, 0.5), layered_oracle(k, inner, 0.5), rtol=1e-12)


def test_two_layer_matches_oracle():
    mesh = generate_mesh(0.03)
    D = dtn_matrix(mesh, two_layer(mesh), 4)
    diag = np.diag(D.entries)
    for slot in range(1, 9):
        k = frequencies(4)[slot]
        exact = np.pi * layered_oracle(k, 4.0, 0.5)
        assert abs(diag[slot] - exact) <= 0.02 * exact


def test_matrix_invariants_random_conductivities(mesh10):
    rng = np.random.default_rng(5)
    for _ in range(5):
        a = ConductivityField(np.exp(rng.uniform(-1, 1, mesh10.n_vertices)), (np.exp(-1), np.exp(1)))
        D = dtn_matrix(mesh10, a, 5)
        assert D.symmetry_error() <= 1e-8
        scale = np.abs(D.entries).max()
        assert np.abs(D.entries[0]).max() <= 1e-8 * scale and np.abs(D.entries[:, 0]).max() <= 1e-8 * scale
        assert np.linalg.eigvalsh(0.5 * (D.entries + D.entries.T)).min() >= -1e-9 * scale
        for _ in range(10):
            c = rng.standard_normal(11)
            assert c @ D.entries @ c >= -1e-9


def test_mesh_convergence_of_disk_spectrum(mesh10, mesh05, mesh025):
    # error of each frequency (mean over its cos/sin pair) drops by >= 3 per halving of h
    K = 4
    errs = []
    for m in (mesh10, mesh05, mesh025):
        diag = np.diag(dtn_matrix(m, ConductivityField.constant(m, 1.0), K).entries)
        errs.append([abs(diag[2 * k - 1:2 * k + 1].mean() - np.pi * k) for k in range(1, K + 1)])
    errs = np.array(errs)
    assert np.all(errs[0] / errs[1] >= 3)
    assert np.all(errs[1, :2] / errs[2, :2] >= 3)


def test_truncation_limit(mesh10):
    op = DtNOperator(mesh10, ConductivityField.constant(mesh10, 1.0))
    with pytest.raises(ValueError):
        op.matrix(mesh10.n_boundary // 4 + 1)


def test_dtn_matrix_serialization(mesh10):
    D = dtn_matrix(mesh10, two_layer(mesh10), 2)
    text = D.to_csv()
    assert text.splitlines()[0] == "const,1c,1s,2c,2s"
    assert np.array_equal(DtNMatrix.from_csv(text).entries, D.entries)
    E = DtNMatrix.from_json(json.loads(json.dumps(D.to_json())))
    assert np.array_equal(E.entries, D.entries)
    O = D.to_basis("orthonormal")
    assert np.allclose(O.to_basis("raw").entries, D.entries)
    assert np.allclose(D.truncate(1).entries, D.entries[:3, :3])
