"""Edge-disjoint path families, the measures nu and nu_l, and inequality audits.

For a nearest-neighbor edge e, the default family consists of 2d pairwise
edge-disjoint paths of length at most 9 joining the endpoints of e: the
direct edge, two length-3 detours through each perpendicular row (2(d-1)
paths), and one length-9 detour two rows out in the plane of the first
perpendicular axis. The optimized resistance

    w_l(e)^{-1} = min over paths of length <= l of sum_{e' in path} w(e')^{-1}

drives the vertex measures nu (plain inverse weights) and nu_l, whose
moments control the weighted Poincare/Sobolev constants and the Moser
l-infinity bound. Audits evaluate those inequalities on concrete test
functions and report the empirical constant (the ratio of the two sides
with every explicit factor evaluated); the constants in the underlying
theory are existential, so no absolute threshold is asserted here.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .env import Environment, canonical_edge
from .errors import DomainError, ParameterError
from .lattice import GridFunction, grid_norm, restrict, assemble_operator
from . import solve as _solve

__all__ = [
    "EdgeId",
    "PathFamily",
    "NuMeasure",
    "OmegaLResult",
    "AuditReport",
    "default_path_family",
    "omega_l_inverse",
    "nu",
    "nu_l",
    "nu_field",
    "nu_l_field",
    "rho",
    "inequality_audit",
]

MAX_TEMPLATE_LENGTH = 9


class EdgeId(NamedTuple):
    """Canonical undirected edge: base site plus lexicographically-positive step."""

    base: tuple[int, ...]
    step: tuple[int, ...]

    @classmethod
    def of(cls, x, z) -> "EdgeId":
        b, s = canonical_edge(np.asarray(x), np.asarray(z))
        return cls(tuple(int(v) for v in b), tuple(int(v) for v in s))

    @property
    def is_nearest_neighbor(self) -> bool:
        return sum(abs(c) for c in self.step) == 1


@dataclass
class PathFamily:
    """Edge-disjoint nearest-neighbor paths joining the endpoints of an edge."""

    edge: EdgeId
    paths: list[np.ndarray]  # each (length+1, d) vertex sequence
    l: int

    def path_edges(self, path: np.ndarray) -> list[EdgeId]:
        return [EdgeId.of(path[i], path[i + 1] - path[i]) for i in range(len(path) - 1)]

    def check_invariants(self) -> None:
        x = np.asarray(self.edge.base, dtype=np.int64)
        y = x + np.asarray(self.edge.step, dtype=np.int64)
        seen: set[EdgeId] = set()
        for path in self.paths:
            if len(path) - 1 > self.l:
                raise ParameterError("path exceeds the family length bound")
            if not (np.array_equal(path[0], x) and np.array_equal(path[-1], y)):
                raise ParameterError("path does not join the edge endpoints")
            for eid in self.path_edges(path):
                if not eid.is_nearest_neighbor:
                    raise ParameterError("path contains a non nearest-neighbor hop")
                if eid in seen:
                    raise ParameterError("paths share an edge")
                seen.add(eid)


def _template_paths(d: int) -> list[np.ndarray]:
    """Paths for the edge {0, e_1} in template coordinates (axis 0 = direction)."""
    e = np.eye(d, dtype=np.int64)
    direct = np.stack([np.zeros(d, dtype=np.int64), e[0]])
    paths = [direct]
    for b in range(1, d):
        for sgn in (+1, -1):
            detour = np.stack(
                [
                    np.zeros(d, dtype=np.int64),
                    sgn * e[b],
                    sgn * e[b] + e[0],
                    e[0],
                ]
            )
            paths.append(detour)
    if d >= 2:
        b = 1  # long detour two rows out, in the plane of the first perpendicular axis
        long_path = np.stack(
            [
                np.zeros(d, dtype=np.int64),
                -e[0],
                -e[0] + e[b],
                -e[0] + 2 * e[b],
                2 * e[b],
                e[0] + 2 * e[b],
                2 * e[0] + 2 * e[b],
                2 * e[0] + e[b],
                2 * e[0],
                e[0],
            ]
        )
        paths.append(long_path)
    return paths


def default_path_family(d: int, e: EdgeId) -> PathFamily:
    """The translated, axis-permuted template family for a nearest-neighbor edge.

    Yields 2d pairwise edge-disjoint paths of length <= 9 for d >= 2 and the
    single direct edge for d = 1.
    """
    if d < 1:
        raise ParameterError(f"dimension must be >= 1, got {d}")
    if not e.is_nearest_neighbor:
        raise ParameterError("path families are defined for nearest-neighbor edges")
    axis = int(np.nonzero(e.step)[0][0])
    perm = [axis] + [a for a in range(d) if a != axis]
    base = np.asarray(e.base, dtype=np.int64)
    paths = []
    for tp in _template_paths(d):
        real = np.zeros_like(tp)
        for tcol, rcol in enumerate(perm):
            real[:, rcol] = tp[:, tcol]
        paths.append(real + base)
    return PathFamily(edge=e, paths=paths, l=MAX_TEMPLATE_LENGTH)


class OmegaLResult(NamedTuple):
    value: float
    optimal_path: np.ndarray | None


def omega_l_inverse(env: Environment, family: PathFamily) -> OmegaLResult:
    """min over the family of the path resistances sum 1/w, with the argmin path.

    A zero-weight edge makes its path's resistance infinite; if every path
    is infinite the infinity sentinel is returned with no optimal path.
    """
    best = math.inf
    best_path = None
    for path in family.paths:
        resistance = 0.0
        for i in range(len(path) - 1):
            w = env.conductance(path[i], path[i + 1] - path[i])
            if w == 0.0:
                resistance = math.inf
                break
            resistance += 1.0 / w
        if resistance < best:
            best = resistance
            best_path = path
    return OmegaLResult(best, best_path)


def _incident_edges(d: int, x) -> list[EdgeId]:
    x = np.asarray(x, dtype=np.int64)
    out = []
    for a in range(d):
        z = np.zeros(d, dtype=np.int64)
        z[a] = 1
        out.append(EdgeId.of(x, z))
        out.append(EdgeId.of(x, -z))
    return out


def nu(env: Environment, x) -> float:
    """nu(x) = sum of inverse weights over the 2d incident nearest-neighbor edges."""
    total = 0.0
    for eid in _incident_edges(env.d, x):
        w = env.conductance(eid.base, eid.step)
        if w == 0.0:
            return math.inf
        total += 1.0 / w
    return total


def _family_up_to(d: int, eid: EdgeId, l: int) -> PathFamily:
    if l < 1:
        raise ParameterError(f"path length bound must be >= 1, got {l}")
    fam = default_path_family(d, eid)
    kept = [p for p in fam.paths if len(p) - 1 <= l]
    return PathFamily(edge=eid, paths=kept, l=l)


def nu_l(env: Environment, x, l: int) -> float:
    """nu_l(x) = sum of w_l(e)^{-1} over incident edges, default family cut at l."""
    total = 0.0
    for eid in _incident_edges(env.d, x):
        fam = _family_up_to(env.d, eid, l)
        total += omega_l_inverse(env, fam).value
    return total


@dataclass
class NuMeasure:
    """Vertex measure over the interior sites of a box (-n, n)^d."""

    kind: str  # "plain" | "path-optimized"
    n: int
    values: np.ndarray  # shape (2n-1,)*d
    l: int | None = None

    def moment(self, q: float) -> float:
        return float(np.mean(self.values ** q))

    def box_norm(self, q: float) -> float:
        """Space-averaged q-norm ((1/|B|) sum nu^q)^(1/q); max norm for q = inf."""
        if np.isinf(q):
            return float(np.max(self.values))
        return float(np.mean(self.values ** q) ** (1.0 / q))


def _template_edge_offsets(d: int, l: int) -> dict[int, list[list[tuple[np.ndarray, np.ndarray]]]]:
    """Per axis: per path: list of (offset, step) base-relative canonical edges."""
    table: dict[int, list[list[tuple[np.ndarray, np.ndarray]]]] = {}
    for axis in range(d):
        z = np.zeros(d, dtype=np.int64)
        z[axis] = 1
        fam = _family_up_to(d, EdgeId.of(np.zeros(d, dtype=np.int64), z), l)
        per_path = []
        for path in fam.paths:
            edges = []
            for i in range(len(path) - 1):
                b, s = canonical_edge(path[i], path[i + 1] - path[i])
                edges.append((b, s))
            per_path.append(edges)
        table[axis] = per_path
    return table


def _extended_resistance_fields(env: Environment, n: int, table) -> dict[int, np.ndarray]:
    """Per axis a: field of w_l({x, x+e_a})^{-1} over bases x with
    x_a in [-n, n-1] and |x_b| <= n-1 otherwise (one extra layer so both
    incident edges of every interior site are covered)."""
    d = env.d
    fields = {}
    for axis in range(d):
        axes = []
        for b in range(d):
            if b == axis:
                axes.append(np.arange(-n, n, dtype=np.int64))
            else:
                axes.append(np.arange(-(n - 1), n, dtype=np.int64))
        mesh = np.meshgrid(*axes, indexing="ij")
        shape = mesh[0].shape
        bases = np.stack([m.ravel() for m in mesh], axis=1)
        best = None
        for edges in table[axis]:
            resistance = np.zeros(bases.shape[0])
            for off, step in edges:
                w = env.conductance_batch(bases + off, step)
                resistance += 1.0 / w
            best = resistance if best is None else np.minimum(best, resistance)
        fields[axis] = best.reshape(shape)
    return fields


def _assemble_nu_values(fields: dict[int, np.ndarray], d: int) -> np.ndarray:
    values = None
    for axis in range(d):
        f = fields[axis]
        lead = [slice(None)] * d
        lag = [slice(None)] * d
        lead[axis] = slice(1, None)  # edge {x, x + e_a}
        lag[axis] = slice(0, -1)  # edge {x - e_a, x}
        contrib = f[tuple(lead)] + f[tuple(lag)]
        values = contrib if values is None else values + contrib
    return values


def nu_field(env: Environment, n: int) -> NuMeasure:
    """Plain measure nu over the interior sites of (-n, n)^d, vectorized."""
    table = {a: [edges] for a, edges in _direct_edge_table(env.d).items()}
    fields = _extended_resistance_fields(env, n, table)
    return NuMeasure(kind="plain", n=n, values=_assemble_nu_values(fields, env.d))


def _direct_edge_table(d: int) -> dict[int, list[tuple[np.ndarray, np.ndarray]]]:
    out = {}
    for axis in range(d):
        z = np.zeros(d, dtype=np.int64)
        z[axis] = 1
        out[axis] = [(np.zeros(d, dtype=np.int64), z)]
    return out


def nu_l_field(env: Environment, n: int, l: int) -> NuMeasure:
    """Path-optimized measure nu_l over the interior sites, vectorized."""
    table = _template_edge_offsets(env.d, l)
    fields = _extended_resistance_fields(env, n, table)
    return NuMeasure(
        kind="path-optimized", n=n, values=_assemble_nu_values(fields, env.d), l=l
    )


def rho(d: int, q: float) -> float:
    """Sobolev gain exponent d / (d - 2 + d/q); rho(d, d/2) = 1 exactly."""
    if d < 2:
        raise DomainError("rho is defined for d >= 2 (d = 1 uses the sup-norm form)")
    if q < 1:
        raise ParameterError(f"rho needs q >= 1, got {q}")
    return d / (d - 2.0 + d / q)


# -- inequality audits --------------------------------------------------------


@dataclass
class AuditReport:
    kind: str
    epsilons: list[float]
    ratios: list[float]  # per epsilon, max over trials, all explicit factors in
    uniform_ratios: list[float]  # same but without the nu_l environment factor
    max_ratio: float
    argmax_input_digest: str
    per_trial: list[list[float]]  # per_trial[i][j]: epsilon i, trial j
    params: dict

    def to_json(self) -> str:
        return json.dumps(
            {
                "kind": self.kind,
                "epsilons": self.epsilons,
                "ratios": self.ratios,
                "uniform_ratios": self.uniform_ratios,
                "max_ratio": self.max_ratio,
                "argmax_input_digest": self.argmax_input_digest,
                "per_trial": self.per_trial,
                "params": self.params,
            },
            indent=2,
            sort_keys=True,
        )


def _fourier_trial(d: int, trial: int, seed: int) -> Callable:
    """Smooth random test functions, identical across resolutions.

    Trial 0 is the deterministic product-cosine bump; higher trials are
    random sine series with decaying seeded coefficients (zero on the
    boundary of Q by construction).
    """
    if trial == 0:
        def bump(pts):
            return np.prod(np.cos(0.5 * np.pi * pts), axis=1)

        return bump
    rng = np.random.default_rng([seed, trial])
    kmax = 3
    modes = [np.array(m) + 1 for m in np.ndindex(*([kmax] * d))]
    coeffs = [rng.standard_normal() / float(np.dot(m, m)) for m in modes]

    def series(pts):
        out = np.zeros(pts.shape[0])
        for m, c in zip(modes, coeffs):
            term = np.ones(pts.shape[0])
            for i in range(d):
                term = term * np.sin(0.5 * np.pi * m[i] * (pts[:, i] + 1.0))
            out += c * term
        return out

    return series


def _nn_energy(env: Environment, u: GridFunction, zero_extend: bool) -> float:
    """sum over nearest-neighbor edges of w(e) |grad u(e)|^2 (unrescaled).

    With ``zero_extend`` the sum covers edges with at least one interior
    endpoint (u vanishes outside); otherwise only edges with both endpoints
    interior.
    """
    d, n = u.d, u.n
    vals = u.values
    total = 0.0
    for axis in range(d):
        step = np.zeros(d, dtype=np.int64)
        step[axis] = 1
        if zero_extend:
            pad = [(0, 0)] * d
            pad[axis] = (1, 1)
            padded = np.pad(vals, pad)
            du = np.diff(padded, axis=axis)
            axes = []
            for b in range(d):
                if b == axis:
                    axes.append(np.arange(-n, n, dtype=np.int64))
                else:
                    axes.append(np.arange(-(n - 1), n, dtype=np.int64))
        else:
            du = np.diff(vals, axis=axis)
            axes = []
            for b in range(d):
                if b == axis:
                    axes.append(np.arange(-(n - 1), n - 1, dtype=np.int64))
                else:
                    axes.append(np.arange(-(n - 1), n, dtype=np.int64))
        mesh = np.meshgrid(*axes, indexing="ij")
        bases = np.stack([m.ravel() for m in mesh], axis=1)
        w = env.conductance_batch(bases, step)
        total += float(np.sum(w * du.ravel() ** 2))
    return total


def _poincare_ratios(env, eps, q, l, u_fn):
    n = round(1.0 / eps)
    u = restrict(u_fn, eps, env.d)
    centered = u.values - np.mean(u.values)
    lhs = float(np.mean(centered ** 2))
    size = u.values.size
    energy = _nn_energy(env, u, zero_extend=False)
    base = (n ** 2 / size) * energy
    if env.d == 1:
        nu_norm = nu_field(env, n).box_norm(1.0)
    else:
        nu_norm = nu_l_field(env, n, l).box_norm(env.d / 2.0)
    return lhs / (nu_norm * base), lhs / base


def _sobolev_ratios(env, eps, q, l, u_fn):
    n = round(1.0 / eps)
    u = restrict(u_fn, eps, env.d)
    size = u.values.size
    energy = _nn_energy(env, u, zero_extend=True)
    base = n ** 2 * energy / size
    if env.d == 1:
        lhs = float(np.max(u.values ** 2))
        nu_norm = nu_field(env, n).box_norm(1.0)
    else:
        r = rho(env.d, q)
        lhs = float(np.mean((u.values ** 2) ** r) ** (1.0 / r))
        nu_norm = nu_l_field(env, n, l).box_norm(q)
    return lhs / (nu_norm * base), lhs / base


def _moser_ratios(env, eps, q, l, f_fn, tol):
    n = round(1.0 / eps)
    f = restrict(f_fn, eps, env.d)
    f_inf = float(np.max(np.abs(f.values)))
    op = assemble_operator(env, eps)
    u = _solve.poisson_solve(op, f, tol=tol)
    lhs = float(np.max(np.abs(u.values)))
    u_l2 = grid_norm(u, 2)
    if env.d == 1:
        nu_norm = nu_field(env, n).box_norm(1.0)
    else:
        nu_norm = nu_l_field(env, n, l).box_norm(q)
    return lhs / (max(1.0, nu_norm * f_inf) * u_l2), lhs / max(u_l2, 1e-300)


def inequality_audit(
    kind: str,
    env: Environment,
    epsilons: list[float],
    q: float,
    l: int,
    trials: int,
    seed: int = 0,
    tol: float = 1e-10,
) -> AuditReport:
    """Empirical-constant audit of the weighted Poincare or Sobolev inequality
    or of the Moser sup bound for Poisson solutions with ||f||_inf = 1.

    For each epsilon the same continuum test inputs (trial 0 deterministic,
    further trials seeded random) are sampled on the grid and the ratio of
    the inequality's left side to the product of all its explicit factors is
    recorded; the maximum over trials is reported per epsilon, alongside the
    ratio without the nu_l factor (the uniform-inequality constant, which a
    trap environment inflates). No absolute constant is asserted.
    """
    if kind not in ("poincare", "sobolev", "moser"):
        raise ParameterError(f"unknown audit kind {kind!r}")
    if trials < 1:
        raise ParameterError("audit needs at least one trial")
    if kind in ("sobolev", "moser") and env.d >= 2 and q < env.d / 2.0:
        raise ParameterError(f"{kind} audit needs q >= d/2 = {env.d / 2}")
    per_trial: list[list[float]] = []
    per_trial_uniform: list[list[float]] = []
    for eps in epsilons:
        row, urow = [], []
        for trial in range(trials):
            if kind == "moser":
                if trial == 0:
                    f_fn = lambda pts: np.ones(pts.shape[0])
                else:
                    g = _fourier_trial(env.d, trial, seed)
                    f_fn = lambda pts, _g=g: np.where(_g(pts) >= 0.0, 1.0, -1.0)
                ratio, uniform = _moser_ratios(env, eps, q, l, f_fn, tol)
            elif kind == "poincare":
                ratio, uniform = _poincare_ratios(env, eps, q, l, _fourier_trial(env.d, trial, seed))
            else:
                ratio, uniform = _sobolev_ratios(env, eps, q, l, _fourier_trial(env.d, trial, seed))
            row.append(ratio)
            urow.append(uniform)
        per_trial.append(row)
        per_trial_uniform.append(urow)
    ratios = [max(row) for row in per_trial]
    uniform_ratios = [max(row) for row in per_trial_uniform]
    i_eps = int(np.argmax(ratios))
    i_trial = int(np.argmax(per_trial[i_eps]))
    digest = hashlib.sha256(
        repr((kind, epsilons[i_eps], i_trial, seed, q, l)).encode()
    ).hexdigest()
    return AuditReport(
        kind=kind,
        epsilons=list(epsilons),
        ratios=ratios,
        uniform_ratios=uniform_ratios,
        max_ratio=max(ratios),
        argmax_input_digest=digest,
        per_trial=per_trial,
        params={"q": q, "l": l, "trials": trials, "seed": seed},
    )
