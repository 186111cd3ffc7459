"""Variable-speed random walk, local times, and the spectral cumulant.

The walk jumps from x to x+z at rate w(x, z); holding times are
exponential with the total rate at the current site. Local times are the
per-site occupation durations, and their diffusive rescaling

    L_t(z) = (alpha_t^d / t) l_t(floor(alpha_t z))

is an L1-normalized step profile whenever the walk stayed inside the
growing box alpha_t Q. The conditioned cumulant is evaluated spectrally:

    Lambda_t(V) = -lambda_1^{(t)}(V) + lambda_1^{(t)}(0),

with lambda_1^{(t)}(V) the principal Dirichlet eigenvalue of
-alpha_t^2 L_w + V_t on alpha_t Q intersected with Z^d, V_t the midpoint
unit-cell average of V(./alpha_t). Its homogenized target is
-lambda_1(V) + lambda_1(0) for the effective operator -L_eff + V. A naive
Monte Carlo of the conditioned expectation would founder on the vanishing
probability of the confinement event, which is why the spectral route is
the primary evaluator and the dense matrix exponential of the semigroup
serves as the small-box oracle in the tests.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .corrector import HomogenizedMatrix, exact_a_hom
from .env import Environment, support_steps
from .errors import DomainError, ParameterError
from .lattice import assemble_box_matrix, interior_coords
from .solve import RefGridFunction, eigs_smallest_matrix, homogenized_eigs

__all__ = [
    "Trajectory",
    "LocalTimes",
    "RescaledProfile",
    "CumulantEstimate",
    "simulate_vsrw",
    "local_times",
    "rescaled_profile",
    "cumulant_spectral",
    "rate_function",
    "dump_trajectory",
    "heat_kernel_histogram",
]


@dataclass
class Trajectory:
    """Jump chain of one walk: event times and destinations up to t_max."""

    start: tuple[int, ...]
    times: np.ndarray  # strictly increasing jump times
    sites: np.ndarray  # (k, d) destinations, sites[i] reached at times[i]
    t_max: float
    seed: int

    @property
    def d(self) -> int:
        return len(self.start)


@dataclass
class LocalTimes:
    """Occupation durations per visited site up to time t."""

    t: float
    durations: dict[tuple[int, ...], float]

    def total(self) -> float:
        return math.fsum(self.durations.values())


@dataclass
class RescaledProfile:
    """Step profile L_t on R^d; one cell of volume alpha_t^{-d} per site."""

    alpha_t: float
    t: float
    sites: np.ndarray  # (k, d)
    heights: np.ndarray  # (k,)
    support_ok: bool  # supp(l_t) inside alpha_t Q

    def integral(self) -> float:
        return float(np.sum(self.heights)) * self.alpha_t ** (-self.sites.shape[1])

    def __call__(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        cells = np.floor(self.alpha_t * points).astype(np.int64)
        table = {tuple(s): h for s, h in zip(self.sites, self.heights)}
        return np.array([table.get(tuple(c), 0.0) for c in cells])


def simulate_vsrw(env: Environment, x0, t_max: float, seed: int) -> Trajectory:
    """Simulate the variable-speed walk: rate w(x,z) per jump, reproducible."""
    if t_max <= 0:
        raise ParameterError("t_max must be positive")
    x0 = tuple(int(v) for v in np.atleast_1d(x0))
    d = env.d
    if len(x0) != d:
        raise ParameterError(f"start site must have {d} coordinates")
    steps = []
    for half in support_steps(d, env.r_max):
        steps.append(half)
        steps.append(-half)
    steps = np.array(steps, dtype=np.int64)
    rng = np.random.default_rng(seed)
    rate_cache: dict[tuple[int, ...], tuple[np.ndarray, float]] = {}
    times, sites = [], []
    current = np.array(x0, dtype=np.int64)
    t = 0.0
    while True:
        key = tuple(current)
        cached = rate_cache.get(key)
        if cached is None:
            rates = np.array(
                [env.conductance_batch(current[None, :], z)[0] for z in steps]
            )
            cum = np.cumsum(rates)
            rate_cache[key] = (cum, float(cum[-1]))
            cached = rate_cache[key]
        cum, total = cached
        t += rng.exponential(1.0 / total)
        if t > t_max:
            break
        pick = int(np.searchsorted(cum, total * rng.random(), side="right"))
        current = current + steps[min(pick, len(steps) - 1)]
        times.append(t)
        sites.append(current.copy())
    return Trajectory(
        start=x0,
        times=np.array(times),
        sites=np.array(sites, dtype=np.int64).reshape(len(sites), d),
        t_max=float(t_max),
        seed=seed,
    )


def local_times(traj: Trajectory, t: float) -> LocalTimes:
    """Occupation durations l_t(z) with exact total-time conservation."""
    if t > traj.t_max:
        raise DomainError(f"t={t} exceeds the simulated horizon {traj.t_max}")
    durations: dict[tuple[int, ...], float] = {}
    prev_site = traj.start
    prev_time = 0.0
    for i in range(traj.times.shape[0]):
        tau = float(traj.times[i])
        if tau >= t:
            break
        durations[prev_site] = durations.get(prev_site, 0.0) + (tau - prev_time)
        prev_site = tuple(int(v) for v in traj.sites[i])
        prev_time = tau
    durations[prev_site] = durations.get(prev_site, 0.0) + (t - prev_time)
    return LocalTimes(t=float(t), durations=durations)


def rescaled_profile(lt: LocalTimes, alpha_t: float) -> RescaledProfile:
    """Diffusively rescaled, normalized occupation profile."""
    if alpha_t <= 0:
        raise ParameterError("alpha_t must be positive")
    sites = np.array(sorted(lt.durations.keys()), dtype=np.int64)
    d = sites.shape[1]
    values = np.array([lt.durations[tuple(s)] for s in sites])
    heights = (alpha_t ** d / lt.t) * values
    half = math.ceil(alpha_t) - 1  # sites of alpha_t Q: |s_i| <= ceil(alpha_t) - 1
    support_ok = bool(np.all(np.abs(sites) <= half))
    return RescaledProfile(
        alpha_t=float(alpha_t),
        t=lt.t,
        sites=sites,
        heights=heights,
        support_ok=support_ok,
    )


@dataclass
class CumulantEstimate:
    potential: str
    t: float
    alpha_t: float
    lambda_t_v: float
    lambda_t_0: float
    lambda_hom_v: float
    lambda_hom_0: float

    @property
    def value(self) -> float:
        """Lambda_t(V); exactly zero for V = 0."""
        return -self.lambda_t_v + self.lambda_t_0

    @property
    def target(self) -> float:
        return -self.lambda_hom_v + self.lambda_hom_0


def box_generator_matrix(env: Environment, alpha_t: float, V=None) -> sp.csr_matrix:
    """-alpha_t^2 L_w + V_t on alpha_t Q with zero Dirichlet data.

    V_t is the midpoint unit-cell average V(z / alpha_t).
    """
    half = math.ceil(alpha_t) - 1
    if half < 1:
        raise ParameterError("alpha_t too small: the box has no interior sites")
    mat = assemble_box_matrix(env, half + 1) * (alpha_t ** 2)
    if V is not None:
        pts = interior_coords(env.d, half + 1).astype(np.float64) / alpha_t
        mat = (mat + sp.diags(np.asarray(V(pts), dtype=np.float64))).tocsr()
    return mat.tocsr()


def cumulant_spectral(
    env: Environment,
    V,
    t: float,
    alpha_t: float,
    ahom: HomogenizedMatrix | None = None,
    tol: float = 1e-8,
    m_intervals: tuple[int, int] = (128, 256),
) -> CumulantEstimate:
    """Spectral evaluation of Lambda_t(V) and its homogenized target.

    ``V`` is a bounded continuous potential (callable on (N, d) points) or
    None for the zero potential. ``ahom`` defaults to the closed-form
    matrix for laws that have one; pass an estimate for random laws.
    """
    if alpha_t < 2:
        raise ParameterError("alpha_t must be at least 2")
    if alpha_t > 0.5 * math.sqrt(t):
        warnings.warn(
            f"alpha_t={alpha_t:.3g} is not small against sqrt(t)={math.sqrt(t):.3g}; "
            "the spectral approximation degrades",
            stacklevel=2,
        )
    if ahom is None:
        ahom = exact_a_hom(env.law, env.d)
        if ahom is None:
            raise ParameterError(
                "no closed-form A_hom for this law; pass an RVE estimate via ahom="
            )
    mat0 = box_generator_matrix(env, alpha_t, V=None)
    lam_t_0 = float(eigs_smallest_matrix(mat0, 1, tol=tol).values[0])
    if V is None:
        lam_t_v = lam_t_0
        lam_hom_0 = float(homogenized_eigs(ahom.A, None, 1, m_intervals)[0][0])
        lam_hom_v = lam_hom_0
    else:
        mat_v = box_generator_matrix(env, alpha_t, V=V)
        lam_t_v = float(eigs_smallest_matrix(mat_v, 1, tol=tol).values[0])
        lam_hom_0 = float(homogenized_eigs(ahom.A, None, 1, m_intervals)[0][0])
        lam_hom_v = float(homogenized_eigs(ahom.A, V, 1, m_intervals)[0][0])
    return CumulantEstimate(
        potential="0" if V is None else getattr(V, "__name__", "V"),
        t=float(t),
        alpha_t=float(alpha_t),
        lambda_t_v=lam_t_v,
        lambda_t_0=lam_t_0,
        lambda_hom_v=lam_hom_v,
        lambda_hom_0=lam_hom_0,
    )


def rate_function(ahom: HomogenizedMatrix, g: RefGridFunction) -> float:
    """Donsker-Varadhan quadratic form I(g) = integral of grad g . D_eff grad g.

    ``g`` must be L2(Q)-normalized on its reference grid; profiles that
    violate the zero boundary values beyond tolerance get the infinity
    sentinel (they fall outside H^1_0).
    """
    norm = g.l2_norm()
    if abs(norm - 1.0) > 1e-6:
        raise ParameterError(f"profile must be L2-normalized, got norm {norm:.6g}")
    d = g.d
    vmax = float(np.max(np.abs(g.values)))
    boundary_max = 0.0
    for axis in range(d):
        for side in (0, -1):
            sl = [slice(None)] * d
            sl[axis] = side
            boundary_max = max(boundary_max, float(np.max(np.abs(g.values[tuple(sl)]))))
    if boundary_max > 1e-8 * max(vmax, 1.0):
        return math.inf
    # cell-centered gradients (forward difference along each axis, averaged
    # over the other axes): midpoint quadrature over the M^d cells, second
    # order for smooth profiles, and it sees the node-alternating mode that
    # centered differences annihilate
    grads = []
    for i in range(d):
        gi = np.diff(g.values, axis=i) / g.h
        for j in range(d):
            if j == i:
                continue
            lead = [slice(None)] * d
            lag = [slice(None)] * d
            lead[j] = slice(1, None)
            lag[j] = slice(0, -1)
            gi = 0.5 * (gi[tuple(lead)] + gi[tuple(lag)])
        grads.append(gi)
    D = ahom.d_eff
    density = np.zeros_like(grads[0])
    for i in range(d):
        for j in range(d):
            density += D[i, j] * grads[i] * grads[j]
    return float(g.h ** d * np.sum(density))


def dump_trajectory(traj: Trajectory, path) -> None:
    """CSV dump of one walk: the start at time 0, then (time, site) per jump."""
    d = traj.d
    header = "time," + ",".join(f"x{i}" for i in range(d))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        fh.write("0," + ",".join(str(c) for c in traj.start) + "\n")
        for t, site in zip(traj.times, traj.sites):
            fh.write(f"{t:.17g}," + ",".join(str(int(c)) for c in site) + "\n")


def heat_kernel_histogram(
    env: Environment, t: float, n_walks: int, seed: int
) -> dict:
    """Optional empirical check of the diffusive heat-kernel lower bound.

    Returns the histogram of endpoints over independent walks and the
    minimum of t^{d/2} P[X_t = x] over the visited sites with |x| <= sqrt(t).
    Constants in the bound are existential, so this is reported, never
    asserted.
    """
    counts: dict[tuple[int, ...], int] = {}
    for i in range(n_walks):
        traj = simulate_vsrw(env, (0,) * env.d, t, seed + i)
        end = traj.start if traj.sites.shape[0] == 0 else tuple(int(v) for v in traj.sites[-1])
        counts[end] = counts.get(end, 0) + 1
    radius = math.sqrt(t)
    scaled = {
        x: t ** (env.d / 2.0) * c / n_walks
        for x, c in counts.items()
        if np.linalg.norm(x) <= radius
    }
    return {
        "counts": counts,
        "scaled_min_inside": min(scaled.values()) if scaled else 0.0,
        "n_walks": n_walks,
        "t": t,
    }
