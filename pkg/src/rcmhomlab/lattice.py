"""Rescaled lattice Q_eps, grid functions, and the graph Laplacian.

Grid functions live on the interior sites of (-1,1)^d intersected with
eps*Z^d (eps = 1/n), stored as dense arrays of shape (2n-1,)*d in
row-major order over the integer lattice coordinates, and extend by zero
outside (zero Dirichlet data). The assembled operator is the diffusively
accelerated generator

    (-L^eps u)(x) = eps^{-2} sum_z w(x/eps, z) [u(x) - u(x + eps z)]

as a sparse symmetric matrix over the interior sites, optionally plus a
diagonal potential evaluated by midpoint cell averages.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .env import Environment, support_steps
from .errors import DomainError, ParameterError

__all__ = [
    "GridFunction",
    "GridOperator",
    "StepFunction",
    "assemble_operator",
    "assemble_box_matrix",
    "apply_operator",
    "dirichlet_energy",
    "restrict",
    "embed",
    "grid_norm",
    "interior_coords",
    "dump_operator",
]


def _n_from_epsilon(epsilon: float) -> int:
    n = round(1.0 / epsilon)
    if n < 2 or abs(epsilon * n - 1.0) > 1e-12:
        raise ParameterError(f"epsilon must equal 1/n for an integer n >= 2, got {epsilon}")
    return n


def interior_coords(d: int, n: int) -> np.ndarray:
    """Integer coordinates of the interior sites, shape ((2n-1)^d, d), row-major."""
    axis = np.arange(-(n - 1), n, dtype=np.int64)
    mesh = np.meshgrid(*([axis] * d), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


@dataclass
class GridFunction:
    """Samples on the interior of Q_eps; zero outside."""

    epsilon: float
    values: np.ndarray  # shape (2n-1,)*d

    def __post_init__(self):
        n = _n_from_epsilon(self.epsilon)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (2 * n - 1,) * self.values.ndim or self.values.ndim < 1:
            raise ParameterError(
                f"values must have shape (2n-1,)*d with n={n}, got {self.values.shape}"
            )

    @property
    def n(self) -> int:
        return _n_from_epsilon(self.epsilon)

    @property
    def d(self) -> int:
        return self.values.ndim

    def flat(self) -> np.ndarray:
        return self.values.ravel()

    def copy_with(self, flat_values: np.ndarray) -> "GridFunction":
        return GridFunction(self.epsilon, np.asarray(flat_values).reshape(self.values.shape))

    def at_sites(self, coords: np.ndarray) -> np.ndarray:
        """Values at integer lattice coordinates, zero outside the interior."""
        coords = np.asarray(coords, dtype=np.int64)
        n = self.n
        inside = np.all(np.abs(coords) <= n - 1, axis=-1)
        idx = np.clip(coords + (n - 1), 0, 2 * n - 2)
        vals = self.values[tuple(idx[..., k] for k in range(self.d))]
        return np.where(inside, vals, 0.0)


@dataclass
class GridOperator:
    """Sparse symmetric matrix for -L^eps (+ diag of cell-averaged V)."""

    epsilon: float
    matrix: sp.csr_matrix
    env: Environment
    potential: str = "none"

    @property
    def n(self) -> int:
        return _n_from_epsilon(self.epsilon)

    @property
    def d(self) -> int:
        return self.env.d

    @property
    def size(self) -> int:
        return self.matrix.shape[0]


def assemble_box_matrix(env: Environment, n: int) -> sp.csr_matrix:
    """Unrescaled Dirichlet graph Laplacian -L_w on the interior of (-n, n)^d.

    Row x encodes sum_z w(x,z) [u(x) - u(x+z)] with u extended by zero;
    edges leaving the box contribute to the diagonal only. Exactly symmetric
    because every undirected edge is assembled once from each endpoint with
    the same hashed weight.
    """
    d = env.d
    coords = interior_coords(d, n)
    m = 2 * n - 1
    size = m ** d
    strides = np.array([m ** (d - 1 - k) for k in range(d)], dtype=np.int64)
    diag = np.zeros(size)
    rows, cols, vals = [], [], []
    for half_step in support_steps(d, env.r_max):
        for z in (half_step, -half_step):
            w = env.conductance_batch(coords, z)
            diag += w
            nbr = coords + z
            inside = np.all(np.abs(nbr) <= n - 1, axis=1)
            if np.any(inside):
                src = np.nonzero(inside)[0]
                dst = (nbr[inside] + (n - 1)) @ strides
                rows.append(src)
                cols.append(dst)
                vals.append(-w[inside])
    mat = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(size, size),
    )
    mat = mat + sp.diags(diag)
    return mat.tocsr()


def assemble_operator(env: Environment, epsilon: float, V=None) -> GridOperator:
    """Assemble -L^eps (+ diag R_eps V) on Q_eps with zero Dirichlet data.

    ``V`` is a continuum function on Q evaluated by midpoint quadrature at
    the cell centers (the grid sites themselves); pass None for no
    potential. The environment must cover the box (-n, n)^d.
    """
    n = _n_from_epsilon(epsilon)
    if env.geometry.boundary != "box" or env.geometry.n < n:
        raise ParameterError(f"environment must be a box with half-width >= {n}")
    mat = assemble_box_matrix(env, n) * (1.0 / epsilon ** 2)
    potential = "none"
    if V is not None:
        pts = interior_coords(env.d, n).astype(np.float64) * epsilon
        v = np.asarray(V(pts), dtype=np.float64)
        if v.shape != (pts.shape[0],):
            raise ParameterError("potential must map (N, d) points to (N,) values")
        mat = (mat + sp.diags(v)).tocsr()
        potential = getattr(V, "__name__", "V")
    return GridOperator(epsilon=epsilon, matrix=mat.tocsr(), env=env, potential=potential)


def apply_operator(op: GridOperator, u: GridFunction) -> GridFunction:
    if abs(u.epsilon - op.epsilon) > 1e-15 or u.flat().shape[0] != op.size:
        raise DomainError("grid function does not match the operator's grid")
    return u.copy_with(op.matrix @ u.flat())


def dirichlet_energy(env: Environment, epsilon: float, u: GridFunction) -> float:
    """E^eps_w(u) = (eps^d / 2) sum_x sum_z w(x,z) (d^eps_z u)^2, u extended by zero.

    Equals <u, -L^eps u>_{H_eps} up to accumulation roundoff.
    """
    n = _n_from_epsilon(epsilon)
    if u.n != n or u.d != env.d:
        raise DomainError("grid function does not match epsilon or dimension")
    d = env.d
    total = 0.0
    for z in support_steps(d, env.r_max):
        # every undirected edge once: bases range over the box fattened by |z|
        r = int(np.max(np.abs(z)))
        axis = np.arange(-(n - 1) - r, n + r, dtype=np.int64)
        mesh = np.meshgrid(*([axis] * d), indexing="ij")
        bases = np.stack([m.ravel() for m in mesh], axis=1)
        du = u.at_sites(bases + z) - u.at_sites(bases)
        nz = du != 0.0
        if not np.any(nz):
            continue
        w = env.conductance_batch(bases[nz], z)
        total += float(np.sum(w * du[nz] ** 2))
    return epsilon ** (d - 2) * total


def restrict(f, epsilon: float, d: int) -> GridFunction:
    """Cell averages of f by midpoint quadrature (exact for affine f).

    ``f`` maps an (N, d) array of points to (N,) values.
    """
    n = _n_from_epsilon(epsilon)
    pts = interior_coords(d, n).astype(np.float64) * epsilon
    vals = np.asarray(f(pts), dtype=np.float64)
    if vals.shape != (pts.shape[0],):
        raise ParameterError("f must map (N, d) points to (N,) values")
    return GridFunction(epsilon, vals.reshape((2 * n - 1,) * d))


@dataclass
class StepFunction:
    """Piecewise-constant extension sum_z u(z) 1_{b(z, eps/2)} of a grid function."""

    grid: GridFunction

    def __call__(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        eps = self.grid.epsilon
        # half-open cells (c - eps/2, c + eps/2]: cell index k = ceil(x/eps - 1/2)
        k = np.ceil(points / eps - 0.5).astype(np.int64)
        return self.grid.at_sites(k)

    def l2_norm(self) -> float:
        # isometry: each cell has volume eps^d
        return grid_norm(self.grid, 2)


def embed(u: GridFunction) -> StepFunction:
    return StepFunction(u)


def grid_norm(u: GridFunction, p: float) -> float:
    """(eps^d sum |u|^p)^(1/p); max norm for p = inf."""
    if p < 1:
        raise ParameterError(f"grid norm needs p >= 1, got {p}")
    if np.isinf(p):
        return float(np.max(np.abs(u.values))) if u.values.size else 0.0
    eps = u.epsilon
    return float((eps ** u.d * np.sum(np.abs(u.values) ** p)) ** (1.0 / p))


def dump_operator(op: GridOperator, path) -> None:
    """Coordinate-format text dump: header with d, n, seed; one entry per line."""
    coo = op.matrix.tocoo()
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# d={op.d} n={op.n} seed={op.env.seed}\n")
        for r, c, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{r} {c} {v:.17g}\n")
