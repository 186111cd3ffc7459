"""Periodic corrector cell problem and the homogenized matrix.

The corrector chi_j on a torus of side L solves the discrete periodic
system

    sum_z w(x, z) (chi(x+z) - chi(x)) = -sum_z w(x, z) z_j   for all x,

i.e. it makes the corrected gradient z_j + grad chi_j flux stationary. The
right side sums to zero over the torus, so the system is consistent; the
one-dimensional kernel of constants is fixed by the mean-zero gauge, with
a re-projection every 50 CG iterations to guard against drift. The
homogenized matrix is the torus average

    A_ij = avg_x sum_z w(x,z) (z_i + grad chi_i(x,z)) (z_j + grad chi_j(x,z)),

a symmetric positive-definite d x d matrix whose half is the effective
diffusivity in this project's convention. Averaging over torus sides and
seeds approximates the ergodic expectation (representative-volume
estimation); only empirical side-to-side deviations are reported since no
quantitative error bound is available.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .env import Constant, Environment, Geometry, Periodic1D, sample_environment, support_steps
from .errors import ParameterError, PartialResultError, SolverError

__all__ = [
    "CorrectorField",
    "HomogenizedMatrix",
    "solve_cell_problem",
    "assemble_A_hom",
    "estimate_A_hom",
    "exact_a_hom",
]


@dataclass
class CorrectorField:
    """Mean-zero corrector for one coordinate direction on a torus."""

    direction: int
    side: int
    values: np.ndarray  # shape (L,)*d
    flux_residual: float  # max over vertices of the stationarity defect

    @property
    def d(self) -> int:
        return self.values.ndim


@dataclass
class HomogenizedMatrix:
    """Symmetric positive-definite effective coefficient A with D_eff = A/2."""

    A: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)

    @property
    def d(self) -> int:
        return self.A.shape[0]

    @property
    def d_eff(self) -> np.ndarray:
        return 0.5 * self.A

    def lambda_min(self) -> float:
        return float(np.min(np.linalg.eigvalsh(self.A)))

    def is_spd(self) -> bool:
        if not np.allclose(self.A, self.A.T, atol=1e-12):
            return False
        try:
            np.linalg.cholesky(self.A)
            return True
        except np.linalg.LinAlgError:
            return False

    def to_json(self) -> str:
        return json.dumps(
            {
                "matrix": [[f"{v:.17g}" for v in row] for row in self.A],
                "lambda_min": self.lambda_min(),
                "d_eff": [[f"{v:.17g}" for v in row] for row in self.d_eff],
                "provenance": self.provenance,
            },
            indent=2,
            sort_keys=True,
        )


def _torus_coords(d: int, L: int) -> np.ndarray:
    axis = np.arange(L, dtype=np.int64)
    mesh = np.meshgrid(*([axis] * d), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def _torus_operator(env: Environment) -> tuple[sp.csr_matrix, np.ndarray]:
    """Positive-semidefinite periodic graph Laplacian K = -L_w and the coords."""
    if env.geometry.boundary != "torus":
        raise ParameterError("cell problems require torus geometry")
    d, L = env.d, env.geometry.side
    coords = _torus_coords(d, L)
    size = L ** d
    strides = np.array([L ** (d - 1 - k) for k in range(d)], dtype=np.int64)
    diag = np.zeros(size)
    rows, cols, vals = [], [], []
    src = np.arange(size)
    for half in support_steps(d, env.r_max):
        for z in (half, -half):
            w = env.conductance_batch(coords, z)
            diag += w
            dst = np.mod(coords + z, L) @ strides
            rows.append(src)
            cols.append(dst)
            vals.append(-w)
    mat = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(size, size),
    )
    return (mat + sp.diags(diag)).tocsr(), coords


def _cell_rhs(env: Environment, coords: np.ndarray, direction: int) -> np.ndarray:
    rhs = np.zeros(coords.shape[0])
    for half in support_steps(env.d, env.r_max):
        for z in (half, -half):
            if z[direction] == 0:
                continue
            rhs += env.conductance_batch(coords, z) * float(z[direction])
    return rhs


def _gauge_project(x: np.ndarray) -> np.ndarray:
    return x - x.mean()


def _pcg_mean_zero(K: sp.csr_matrix, b: np.ndarray, tol: float, maxiter: int) -> tuple[np.ndarray, float]:
    """Diagonal-preconditioned CG on the mean-zero subspace.

    Convergence is declared on the max-norm of the true residual; the gauge
    is re-imposed every 50 iterations.
    """
    b = _gauge_project(b)
    inv_diag = 1.0 / K.diagonal()
    x = np.zeros_like(b)
    r = b.copy()
    z = inv_diag * r
    p = z.copy()
    rz = float(r @ z)
    res_inf = float(np.max(np.abs(r))) if b.size else 0.0
    for it in range(maxiter):
        if res_inf <= tol:
            break
        Kp = K @ p
        alpha = rz / float(p @ Kp)
        x += alpha * p
        r -= alpha * Kp
        if (it + 1) % 50 == 0:
            x = _gauge_project(x)
            r = b - K @ x  # true residual, clears accumulated drift
        res_inf = float(np.max(np.abs(r)))
        z = inv_diag * r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    x = _gauge_project(x)
    res_inf = float(np.max(np.abs(b - K @ x)))
    return x, res_inf


def solve_cell_problem(env: Environment, direction: int, tol: float = 1e-9) -> CorrectorField:
    """Solve the periodic cell problem for one direction, mean-zero gauge.

    The flux-stationarity residual is bounded by ``tol`` at every torus
    vertex on success; otherwise a SolverError reports the best residual.
    """
    if tol <= 0:
        raise ParameterError("tol must be positive")
    if not 0 <= direction < env.d:
        raise ParameterError(f"direction must lie in 0..{env.d - 1}")
    K, coords = _torus_operator(env)
    rhs = _cell_rhs(env, coords, direction)
    x, res = _pcg_mean_zero(K, rhs, tol=tol, maxiter=80 * K.shape[0] + 2000)
    if res > tol:
        raise SolverError(
            f"cell problem direction {direction} stalled at flux residual {res:.3e}",
            residual=res,
        )
    L = env.geometry.side
    return CorrectorField(
        direction=direction,
        side=L,
        values=x.reshape((L,) * env.d),
        flux_residual=res,
    )


def assemble_A_hom(env: Environment, correctors: list[CorrectorField]) -> HomogenizedMatrix:
    """Torus average of the corrected-gradient quadratic form."""
    d = env.d
    if len(correctors) != d or any(c.direction != i for i, c in enumerate(correctors)):
        raise ParameterError("need one corrector per coordinate direction, in order")
    L = env.geometry.side
    if any(c.side != L for c in correctors):
        raise ParameterError("corrector torus side does not match the environment")
    coords = _torus_coords(d, L)
    flat = [c.values.ravel() for c in correctors]
    strides = np.array([L ** (d - 1 - k) for k in range(d)], dtype=np.int64)
    A = np.zeros((d, d))
    size = coords.shape[0]
    src = np.arange(size)
    for half in support_steps(d, env.r_max):
        for z in (half, -half):
            w = env.conductance_batch(coords, z)
            dst = np.mod(coords + z, L) @ strides
            grads = [flat[i][dst] - flat[i][src] + float(z[i]) for i in range(d)]
            for i in range(d):
                for j in range(i, d):
                    A[i, j] += float(np.sum(w * grads[i] * grads[j]))
    A = A / size
    A = A + np.triu(A, 1).T  # mirror the strict upper triangle: exactly symmetric
    return HomogenizedMatrix(A=A, provenance=env.describe())


def estimate_A_hom(
    law,
    d: int,
    sides: list[int],
    seeds: list[int],
    tol: float = 1e-9,
    r_max: int | None = None,
) -> tuple[HomogenizedMatrix, list[dict]]:
    """Representative-volume estimate of A_hom over torus sides and seeds.

    Returns the seed-averaged matrix at the largest side together with a
    table of per-(side, seed) matrices and their Frobenius deviations from
    the final estimate. A cell-solve failure raises PartialResultError
    carrying the completed entries.
    """
    if len(sides) == 0 or any(b <= a for a, b in zip(sides, sides[1:])):
        raise ParameterError("torus side list must be strictly increasing")
    if any(L % 2 or L < 4 for L in sides):
        raise ParameterError("torus sides must be even and >= 4")
    if len(seeds) == 0:
        raise ParameterError("need at least one seed")
    records: list[dict] = []
    try:
        for L in sides:
            geometry = Geometry(dimension=d, n=L // 2, boundary="torus", r_max=r_max)
            for seed in seeds:
                env = sample_environment(law, geometry, seed)
                correctors = [solve_cell_problem(env, j, tol=tol) for j in range(d)]
                mat = assemble_A_hom(env, correctors)
                records.append(
                    {
                        "side": L,
                        "seed": seed,
                        "matrix": mat.A,
                        "spd": mat.is_spd(),
                        "flux_residual": max(c.flux_residual for c in correctors),
                    }
                )
    except SolverError as exc:
        raise PartialResultError(
            f"cell solve failed at side {L}, seed {seed}: {exc}",
            completed={"records": records},
            residual=exc.residual,
        ) from exc
    largest = sides[-1]
    finals = [r["matrix"] for r in records if r["side"] == largest]
    A_final = np.mean(finals, axis=0)
    A_final = 0.5 * (A_final + A_final.T)
    result = HomogenizedMatrix(
        A=A_final,
        provenance={
            "law": law.describe(),
            "dimension": d,
            "sides": list(sides),
            "seeds": list(seeds),
            "r_max": r_max,
        },
    )
    if not result.is_spd():
        raise SolverError("estimated A_hom failed the positive-definiteness check")
    for r in records:
        r["frobenius_deviation"] = float(np.linalg.norm(r["matrix"] - A_final))
    return result, records


def exact_a_hom(law, d: int) -> HomogenizedMatrix | None:
    """Closed-form A_hom where one exists: constant and 1d periodic laws."""
    if isinstance(law, Constant):
        return HomogenizedMatrix(
            A=2.0 * law.value * np.eye(d),
            provenance={"law": law.describe(), "dimension": d, "exact": True},
        )
    if isinstance(law, Periodic1D) and d == 1:
        harmonic = len(law.values) / sum(1.0 / v for v in law.values)
        return HomogenizedMatrix(
            A=np.array([[2.0 * harmonic]]),
            provenance={"law": law.describe(), "dimension": 1, "exact": True},
        )
    return None
