import numpy as np
import pytest

import rcmhomlab.solve as solve_mod
from rcmhomlab import (
    Constant,
    Geometry,
    GridFunction,
    HomogenizedProblem,
    IidParetoLower,
    ParameterError,
    SolverError,
    assemble_operator,
    eigs_smallest,
    homogenized_eigs,
    homogenized_solve,
    poisson_solve,
    sample_environment,
    trap_environment,
)
from rcmhomlab.solve import eigs_smallest_matrix


def _closed_form_lambda1(d, n):
    eps = 1.0 / n
    return d * 4.0 / eps**2 * np.sin(np.pi * eps / 4.0) ** 2


def _rayleigh_descent(mat, iters=30000, tol=1e-12):
    """Steepest descent on the Rayleigh quotient with exact line search
    (two-dimensional Rayleigh-Ritz per step): an independent variational
    oracle for the smallest eigenvalue."""
    x = np.ones(mat.shape[0])
    rq = None
    for _ in range(iters):
        ax = mat @ x
        rq = float(x @ ax) / float(x @ x)
        grad = ax - rq * x
        if np.linalg.norm(grad) <= tol * abs(rq) * np.linalg.norm(x):
            break
        q, _ = np.linalg.qr(np.column_stack([x, grad]))
        t = q.T @ (mat @ q)
        _, u = np.linalg.eigh(0.5 * (t + t.T))
        x = q @ u[:, 0]
    return rq


def test_poisson_zero_rhs():
    env = sample_environment(Constant(1.0), Geometry(1, 4), 0)
    op = assemble_operator(env, 1 / 4)
    zero = GridFunction(1 / 4, np.zeros(7))
    assert np.array_equal(poisson_solve(op, zero).values, np.zeros(7))


def test_poisson_matches_dense_lu_oracle():
    env = sample_environment(Constant(1.0), Geometry(1, 2), 0)
    op = assemble_operator(env, 0.5)
    f = GridFunction(0.5, np.array([0.0, 1.0, 0.0]))
    u = poisson_solve(op, f, tol=1e-12)
    dense = np.linalg.solve(op.matrix.toarray(), f.flat())
    assert np.max(np.abs(u.flat() - dense)) <= 1e-12


def test_poisson_residual_contract():
    env = sample_environment(IidParetoLower(1.1), Geometry(2, 8), 6)
    op = assemble_operator(env, 1 / 8)
    rng = np.random.default_rng(2)
    f = GridFunction(1 / 8, rng.standard_normal((15, 15)))
    u = poisson_solve(op, f, tol=1e-10)
    rel = np.linalg.norm(op.matrix @ u.flat() - f.flat()) / np.linalg.norm(f.flat())
    assert rel <= 1e-10


def test_poisson_invalid_tolerance():
    env = sample_environment(Constant(1.0), Geometry(1, 4), 0)
    op = assemble_operator(env, 1 / 4)
    with pytest.raises(ParameterError):
        poisson_solve(op, GridFunction(1 / 4, np.ones(7)), tol=0.0)


def test_eigenvalue_closed_form_dense_path():
    env = sample_environment(Constant(1.0), Geometry(2, 8), 0)
    pairs = eigs_smallest(assemble_operator(env, 1 / 8), 1)
    assert abs(pairs.values[0] - _closed_form_lambda1(2, 8)) <= 1e-9


def test_eigenvalue_closed_form_iterative_path():
    # 33^2 = 1089 unknowns: exceeds the dense limit, exercises LOBPCG
    env = sample_environment(Constant(1.0), Geometry(2, 17), 0)
    op = assemble_operator(env, 1 / 17)
    assert op.size > solve_mod.DENSE_EIG_LIMIT
    pairs = eigs_smallest(op, 2)
    assert abs(pairs.values[0] - _closed_form_lambda1(2, 17)) <= 1e-9


def test_eigenvectors_are_orthonormal_in_h_eps():
    env = sample_environment(IidParetoLower(1.3), Geometry(2, 8), 4)
    pairs = eigs_smallest(assemble_operator(env, 1 / 8), 4)
    assert np.max(np.abs(pairs.gram() - np.eye(4))) <= 1e-10
    assert np.all(np.diff(pairs.values) > 0) or pairs.values[0] < pairs.values[1]


def test_lambda1_matches_rayleigh_descent_oracle():
    env = sample_environment(IidParetoLower(1.5), Geometry(2, 4), 5)
    op = assemble_operator(env, 1 / 4)
    lam = eigs_smallest(op, 1).values[0]
    assert abs(lam - _rayleigh_descent(op.matrix)) <= 1e-6


def test_principal_eigenvector_has_a_sign():
    env = sample_environment(IidParetoLower(0.9), Geometry(2, 8), 3)
    pairs = eigs_smallest(assemble_operator(env, 1 / 8), 1)
    assert np.min(pairs.vectors[:, 0]) > 0  # Perron-Frobenius, sign normalized


def test_iterative_path_matches_dense_decomposition(monkeypatch):
    env = sample_environment(IidParetoLower(1.0), Geometry(2, 8), 12)
    op = assemble_operator(env, 1 / 8)
    dense_vals = np.linalg.eigvalsh(op.matrix.toarray())[:3]
    monkeypatch.setattr(solve_mod, "DENSE_EIG_LIMIT", 0)
    pairs = eigs_smallest_matrix(op.matrix, 3, tol=1e-8)
    assert np.max(np.abs(pairs.values - dense_vals)) <= 1e-10


def test_trap_insertion_lowers_lambda1():
    base = sample_environment(Constant(1.0), Geometry(2, 8), 0)
    trapped = trap_environment(base, 2, 1e-3)
    lam_base = eigs_smallest(assemble_operator(base, 1 / 8), 1).values[0]
    lam_trap = eigs_smallest(assemble_operator(trapped, 1 / 8), 1).values[0]
    assert lam_trap < lam_base


def test_constant_lambda1_increases_to_the_continuum_limit():
    lams = []
    for j in range(3, 7):
        n = 2**j
        env = sample_environment(Constant(1.0), Geometry(2, n), 0)
        lams.append(eigs_smallest(assemble_operator(env, 1 / n), 1).values[0])
    assert all(b > a for a, b in zip(lams, lams[1:]))
    assert all(lam < np.pi**2 / 2 for lam in lams)


def test_eigs_parameter_validation():
    env = sample_environment(Constant(1.0), Geometry(1, 4), 0)
    op = assemble_operator(env, 1 / 4)
    with pytest.raises(ParameterError):
        eigs_smallest(op, 0)
    with pytest.raises(ParameterError):
        eigs_smallest(op, op.size)


def test_homogenized_solve_manufactured_solution():
    def f(pts):
        return (np.pi**2 / 2) * np.cos(np.pi * pts[:, 0] / 2) * np.cos(np.pi * pts[:, 1] / 2)

    sol = homogenized_solve(HomogenizedProblem(A=2 * np.eye(2), f=f, m_intervals=256))
    ax = sol.node_axis()
    X, Y = np.meshgrid(ax, ax, indexing="ij")
    exact = np.cos(np.pi * X / 2) * np.cos(np.pi * Y / 2)
    assert np.max(np.abs(sol.values - exact)) <= 1e-3


def test_homogenized_solve_with_potential():
    def u_exact(pts):
        return np.cos(np.pi * pts[:, 0] / 2) * np.cos(np.pi * pts[:, 1] / 2)

    def f(pts):
        return (np.pi**2 / 2 + 1.0) * u_exact(pts)

    prob = HomogenizedProblem(
        A=2 * np.eye(2), f=f, V=lambda pts: np.ones(pts.shape[0]), m_intervals=128
    )
    sol = homogenized_solve(prob)
    ax = sol.node_axis()
    X, Y = np.meshgrid(ax, ax, indexing="ij")
    exact = np.cos(np.pi * X / 2) * np.cos(np.pi * Y / 2)
    assert np.max(np.abs(sol.values - exact)) <= 1e-3


def test_homogenized_solve_zero_forcing_and_validation():
    prob = HomogenizedProblem(A=np.eye(1), f=lambda pts: np.zeros(pts.shape[0]))
    assert np.all(homogenized_solve(prob).values == 0.0)
    with pytest.raises(ParameterError):
        HomogenizedProblem(A=np.array([[1.0, 2.0], [2.0, 1.0]]), f=lambda p: p[:, 0])


def test_homogenized_solve_cross_derivative_stencil():
    # anisotropic A with off-diagonal coupling; manufactured u = sin(pi x)sin(pi y)
    A = np.array([[2.0, 0.5], [0.5, 1.0]])

    def u_exact(pts):
        return np.sin(np.pi * pts[:, 0]) * np.sin(np.pi * pts[:, 1])

    def f(pts):
        x, y = pts[:, 0], pts[:, 1]
        uxx = -np.pi**2 * np.sin(np.pi * x) * np.sin(np.pi * y)
        uyy = uxx
        uxy = np.pi**2 * np.cos(np.pi * x) * np.cos(np.pi * y)
        return -0.5 * (A[0, 0] * uxx + 2 * A[0, 1] * uxy + A[1, 1] * uyy)

    sol = homogenized_solve(HomogenizedProblem(A=A, f=f, m_intervals=256))
    ax = sol.node_axis()
    X, Y = np.meshgrid(ax, ax, indexing="ij")
    assert np.max(np.abs(sol.values - np.sin(np.pi * X) * np.sin(np.pi * Y))) <= 2e-3


def test_homogenized_eigs_d1_closed_form():
    vals, vecs = homogenized_eigs(np.eye(1), None, 3)
    exact = np.array([k**2 * np.pi**2 / 8 for k in (1, 2, 3)])
    assert np.max(np.abs(vals - exact)) <= 1e-6
    assert abs(vecs[0].l2_norm() - 1.0) <= 1e-12


def test_homogenized_eigs_d2_extrapolated():
    vals, _ = homogenized_eigs(2 * np.eye(2), None, 1)
    assert abs(vals[0] - np.pi**2 / 2) <= 1e-4


def test_homogenized_eigs_constant_potential_shift():
    base, _ = homogenized_eigs(np.eye(1), None, 3)
    shifted, _ = homogenized_eigs(np.eye(1), lambda pts: np.full(pts.shape[0], 2.0), 3)
    assert np.max(np.abs(shifted - base - 2.0)) <= 1e-11


def test_homogenized_eigs_rejects_indefinite_matrix():
    with pytest.raises(ParameterError):
        homogenized_eigs(np.array([[1.0, 3.0], [3.0, 1.0]]), None, 1)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_poisson_nonconvergence_raises_solver_error():
    env = sample_environment(IidParetoLower(1.0), Geometry(2, 4), 0)
    op = assemble_operator(env, 1 / 4)
    f = GridFunction(1 / 4, np.ones((7, 7)))
    with pytest.raises(SolverError) as err:
        poisson_solve(op, f, tol=1e-300)
    assert err.value.residual is not None
