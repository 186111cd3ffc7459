"""Random conductance environments on Z^d.

An environment assigns a nonnegative weight (conductance) to every
undirected lattice edge. Weights are produced by a counter-based keyed
hash of ``(seed, canonical edge)``, so they are deterministic, order
independent, symmetric under endpoint exchange, and never materialized
as a table. Supported weight laws:

* ``Constant(c)``            -- every nearest-neighbor edge has weight c.
* ``IidParetoLower(gamma)``  -- w = U**(1/gamma), U uniform on (0,1); the
  inverse moment E[w**(-q)] equals gamma/(gamma-q) for q < gamma and is
  infinite otherwise, which makes the lower-tail exponent tunable.
* ``IidTwoPoint(a, b, p)``   -- w = a with probability p, else b.
* ``LongRangePolynomial(base, alpha)`` -- w(e) = w_base(e) / |e|^alpha for
  every edge up to the truncation radius; alpha > d+2 is required so the
  weighted second moment of the jump lengths stays finite.
* ``Periodic1D(values)``     -- deterministic periodic weights in d=1.
* ``TrapLaw(base, m, delta)`` -- base law, except every nearest-neighbor
  edge crossing the boundary of the cube of side 2m+1 centered at the
  origin has weight delta. Built via :func:`trap_environment`.

Geometry is either a box ``(-n, n)^d`` (interior sites are used with zero
Dirichlet data by the operator modules) or a torus of side ``2n`` (used by
the periodic cell problem). Environments are immutable; batch queries are
vectorized over edges.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DomainError, ParameterError

__all__ = [
    "Geometry",
    "Constant",
    "IidParetoLower",
    "IidTwoPoint",
    "LongRangePolynomial",
    "Periodic1D",
    "TrapLaw",
    "Environment",
    "sample_environment",
    "trap_environment",
    "empirical_moment",
    "moment_condition_report",
    "canonical_edge",
    "support_steps",
]

_U64 = np.uint64
_MUL1 = _U64(0xBF58476D1CE4E5B9)
_MUL2 = _U64(0x94D049BB133111EB)
_GOLD = _U64(0x9E3779B97F4A7C15)

DEFAULT_LONG_RANGE_TRUNCATION = 8


def _mix64(x: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer; full-avalanche on 64-bit words
    x = x.copy()
    x ^= x >> _U64(30)
    x *= _MUL1
    x ^= x >> _U64(27)
    x *= _MUL2
    x ^= x >> _U64(31)
    return x


def _hash_uniform(seed: int, base: np.ndarray, step: np.ndarray) -> np.ndarray:
    """Keyed hash of (seed, base coords, step) -> uniform floats in (0, 1).

    ``base`` has shape (N, d) with int64 entries, ``step`` shape (d,).
    Coordinates enter via their two's-complement bit pattern, so negative
    sites hash like any other.
    """
    h = _mix64(np.array(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + _GOLD, ndmin=1))
    h = np.broadcast_to(h, base.shape[0]).copy()
    for j in range(base.shape[1]):
        h = _mix64(h ^ (base[:, j].astype(np.int64).view(np.uint64) + _GOLD))
    for s in step:
        key = np.int64(s).view(np.uint64)
        h = _mix64(h ^ (np.broadcast_to(key, h.shape) + _GOLD))
    # 53 significant bits, shifted into the open interval (0, 1)
    return ((h >> _U64(11)).astype(np.float64) + 0.5) * 2.0 ** -53


@dataclass(frozen=True)
class Geometry:
    """Box or torus region of Z^d.

    ``n`` is the half-width: the box is (-n, n)^d with interior sites
    |x_i| <= n-1; the torus has side 2n with coordinates taken mod 2n.
    ``r_max`` truncates jump lengths (Euclidean); None defers to the law
    default (1 for nearest-neighbor laws, 8 for long-range ones).
    """

    dimension: int
    n: int
    boundary: str = "box"  # "box" | "torus"
    r_max: int | None = None

    def __post_init__(self):
        if self.dimension < 1:
            raise ParameterError(f"dimension must be >= 1, got {self.dimension}")
        if self.n < 2:
            raise ParameterError(f"box half-width n must be >= 2, got {self.n}")
        if self.boundary not in ("box", "torus"):
            raise ParameterError(f"boundary must be 'box' or 'torus', got {self.boundary!r}")
        if self.r_max is not None and self.r_max < 1:
            raise ParameterError(f"r_max must be >= 1, got {self.r_max}")
        if self.boundary == "torus" and self.r_max is not None and self.r_max >= self.n:
            raise ParameterError("torus geometry requires r_max < n so edges are unambiguous")

    @property
    def side(self) -> int:
        return 2 * self.n


@dataclass(frozen=True)
class Constant:
    value: float = 1.0

    def validate(self, d: int) -> None:
        if self.value <= 0:
            raise ParameterError(f"Constant law needs value > 0, got {self.value}")

    nn_only = True

    def from_uniform(self, u: np.ndarray) -> np.ndarray:
        return np.full_like(u, float(self.value))

    def describe(self) -> dict:
        return {"variant": "constant", "value": self.value}


@dataclass(frozen=True)
class IidParetoLower:
    """w = U**(1/gamma): P(w <= s) = s^gamma on (0,1), heavy lower tail."""

    gamma: float

    def validate(self, d: int) -> None:
        if self.gamma <= 0:
            raise ParameterError(f"IidParetoLower needs gamma > 0, got {self.gamma}")

    nn_only = True

    def from_uniform(self, u: np.ndarray) -> np.ndarray:
        return u ** (1.0 / self.gamma)

    def describe(self) -> dict:
        return {"variant": "iid_pareto_lower", "gamma": self.gamma}


@dataclass(frozen=True)
class IidTwoPoint:
    a: float
    b: float
    p: float

    def validate(self, d: int) -> None:
        if self.a <= 0 or self.b <= 0:
            raise ParameterError("IidTwoPoint weights must be positive")
        if not 0.0 <= self.p <= 1.0:
            raise ParameterError(f"IidTwoPoint needs p in [0,1], got {self.p}")

    nn_only = True

    def from_uniform(self, u: np.ndarray) -> np.ndarray:
        return np.where(u < self.p, float(self.a), float(self.b))

    def describe(self) -> dict:
        return {"variant": "iid_two_point", "a": self.a, "b": self.b, "p": self.p}


@dataclass(frozen=True)
class LongRangePolynomial:
    """w(x, z) = w_base / |z|^alpha for 0 < |z| <= r_max; needs alpha > d+2."""

    base: "Constant | IidParetoLower | IidTwoPoint"
    alpha: float

    def validate(self, d: int) -> None:
        if not isinstance(self.base, (Constant, IidParetoLower, IidTwoPoint)):
            raise ParameterError("LongRangePolynomial base must be an i.i.d. nearest-neighbor law")
        self.base.validate(d)
        if self.alpha <= d + 2:
            raise ParameterError(
                f"LongRangePolynomial needs alpha > d+2 = {d + 2}, got {self.alpha}"
            )

    nn_only = False

    def describe(self) -> dict:
        return {
            "variant": "long_range_polynomial",
            "alpha": self.alpha,
            "base": self.base.describe(),
        }


@dataclass(frozen=True)
class Periodic1D:
    """d=1 deterministic law: edge {i, i+1} has weight values[i mod len]."""

    values: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))

    def validate(self, d: int) -> None:
        if d != 1:
            raise ParameterError("Periodic1D is only defined in dimension 1")
        if len(self.values) == 0 or any(v <= 0 for v in self.values):
            raise ParameterError("Periodic1D needs a nonempty tuple of positive weights")

    nn_only = True

    def describe(self) -> dict:
        return {"variant": "periodic_1d", "values": list(self.values)}


@dataclass(frozen=True)
class TrapLaw:
    """Base law with a weight-delta wall around the cube |x|_inf <= m."""

    base: object
    m: int
    delta: float

    def validate(self, d: int) -> None:
        if self.m < 1:
            raise ParameterError(f"trap radius m must be >= 1, got {self.m}")
        if self.delta <= 0:
            raise ParameterError(f"trap weight delta must be > 0, got {self.delta}")
        self.base.validate(d)

    @property
    def nn_only(self):
        return self.base.nn_only

    def describe(self) -> dict:
        return {
            "variant": "trap",
            "m": self.m,
            "delta": self.delta,
            "base": self.base.describe(),
        }


LawSpec = Constant | IidParetoLower | IidTwoPoint | LongRangePolynomial | Periodic1D | TrapLaw


def canonical_edge(x: np.ndarray, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Canonical (base, step) for the undirected edge {x, x+z}.

    The step is made lexicographically positive (first nonzero component
    > 0); otherwise the edge is re-based at the other endpoint. Scalars in,
    scalars out; used by the scalar accessor and by tests.
    """
    x = np.asarray(x, dtype=np.int64)
    z = np.asarray(z, dtype=np.int64)
    if not z.any():
        raise DomainError("edge step must be nonzero")
    for comp in z:
        if comp > 0:
            return x, z
        if comp < 0:
            return x + z, -z
    raise DomainError("edge step must be nonzero")  # pragma: no cover


def support_steps(d: int, r_max: int) -> list[np.ndarray]:
    """Lexicographically positive steps z with 0 < |z|_2 <= r_max.

    One representative per undirected direction; iterate +/- each step to
    cover every edge incident to a site.
    """
    steps = []
    rng = range(-r_max, r_max + 1)
    for offset in np.ndindex(*([2 * r_max + 1] * d)):
        z = np.array(offset, dtype=np.int64) - r_max
        if not z.any():
            continue
        nz = z[z != 0]
        if nz[0] < 0:
            continue  # keep the lex-positive representative only
        if float(np.dot(z, z)) <= r_max * r_max + 1e-9:
            steps.append(z)
    steps.sort(key=lambda s: tuple(s))
    return steps


@dataclass(frozen=True)
class Environment:
    """Immutable conductance field on Z^d, determined by (law, geometry, seed).

    ``shift`` translates the environment: the shifted environment's weight
    at (x, z) equals the unshifted weight at (x + shift, z). Concurrent
    read-only queries are safe.
    """

    law: LawSpec
    geometry: Geometry
    seed: int
    shift: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if self.shift == ():
            object.__setattr__(self, "shift", (0,) * self.geometry.dimension)
        if len(self.shift) != self.geometry.dimension:
            raise ParameterError("shift must have one offset per dimension")

    @property
    def d(self) -> int:
        return self.geometry.dimension

    @property
    def r_max(self) -> int:
        if self.geometry.r_max is not None:
            return self.geometry.r_max
        return 1 if self.law.nn_only else DEFAULT_LONG_RANGE_TRUNCATION

    def translate(self, shift) -> "Environment":
        new = tuple(int(a) + int(b) for a, b in zip(self.shift, shift))
        return replace(self, shift=new)

    # -- weight queries ----------------------------------------------------

    def conductance(self, x, z) -> float:
        """Weight of the edge {x, x+z}; zero outside the law's support."""
        x = np.atleast_1d(np.asarray(x, dtype=np.int64))
        z = np.atleast_1d(np.asarray(z, dtype=np.int64))
        if x.shape != (self.d,) or z.shape != (self.d,):
            raise DomainError(f"site and step must have {self.d} coordinates")
        if not z.any():
            raise DomainError("step z must be nonzero")
        return float(self.conductance_batch(x[None, :], z)[0])

    def conductance_batch(self, base: np.ndarray, step: np.ndarray) -> np.ndarray:
        """Weights of the edges {base_i, base_i + step} for a common step.

        Vectorized over rows of ``base``. Symmetry w(x, z) = w(x+z, -z) is
        exact because both queries hash the same canonical edge.
        """
        base = np.asarray(base, dtype=np.int64)
        step = np.asarray(step, dtype=np.int64)
        if not step.any():
            raise DomainError("step z must be nonzero")
        if float(np.dot(step, step)) > self.r_max * self.r_max + 1e-9:
            return np.zeros(base.shape[0])
        if self.law.nn_only and int(np.abs(step).sum()) != 1:
            return np.zeros(base.shape[0])
        base = base + np.asarray(self.shift, dtype=np.int64)
        # canonicalize: lex-positive step, re-based if necessary
        nz = step[step != 0]
        if nz[0] < 0:
            base = base + step
            step = -step
        if self.geometry.boundary == "torus":
            base = np.mod(base, self.geometry.side)
        return self._law_weights(base, step)

    def _law_weights(self, base: np.ndarray, step: np.ndarray) -> np.ndarray:
        law = self.law
        if isinstance(law, TrapLaw):
            inner = replace(self, law=law.base, shift=(0,) * self.d)
            w = inner._law_weights(base, step)
            if int(np.abs(step).sum()) == 1:
                a_in = np.max(np.abs(base), axis=1) <= law.m
                b_in = np.max(np.abs(base + step), axis=1) <= law.m
                w = np.where(a_in != b_in, float(law.delta), w)
            return w
        if isinstance(law, Periodic1D):
            k = len(law.values)
            vals = np.asarray(law.values)
            return vals[np.mod(base[:, 0], k)]
        if isinstance(law, LongRangePolynomial):
            u = _hash_uniform(self.seed, base, step)
            r2 = float(np.dot(step, step))
            return law.base.from_uniform(u) / r2 ** (law.alpha / 2.0)
        u = _hash_uniform(self.seed, base, step)
        return law.from_uniform(u)

    def total_rate(self, x) -> float:
        """Sum of the weights of all edges at x (within the truncation)."""
        x = np.asarray(x, dtype=np.int64)
        total = 0.0
        for z in support_steps(self.d, self.r_max):
            total += float(self.conductance_batch(x[None, :], z)[0])
            total += float(self.conductance_batch(x[None, :], -z)[0])
        return total

    def describe(self) -> dict:
        return {
            "law": self.law.describe(),
            "dimension": self.d,
            "n": self.geometry.n,
            "boundary": self.geometry.boundary,
            "r_max": self.r_max,
            "seed": self.seed,
            "shift": list(self.shift),
        }


def sample_environment(law: LawSpec, geometry: Geometry, seed: int) -> Environment:
    """Construct the deterministic environment for (law, geometry, seed)."""
    law.validate(geometry.dimension)
    if isinstance(law, TrapLaw):
        if geometry.boundary != "box" or geometry.n <= 2 * law.m:
            raise ParameterError("trap law requires box geometry with n > 2m")
    env = Environment(law=law, geometry=geometry, seed=int(seed))
    if geometry.boundary == "torus" and env.r_max >= geometry.n:
        raise ParameterError(
            f"truncation radius {env.r_max} must stay below the torus half-side {geometry.n}"
        )
    return env


def trap_environment(env: Environment, m: int, delta: float) -> Environment:
    """Environment equal to ``env`` except that every nearest-neighbor edge
    crossing the boundary of the cube of side 2m+1 centered at the origin
    has weight delta."""
    law = TrapLaw(base=env.law, m=int(m), delta=float(delta))
    law.validate(env.d)
    if env.geometry.boundary != "box":
        raise ParameterError("trap insertion requires box geometry")
    if env.geometry.n <= 2 * m:
        raise ParameterError(
            f"trap radius m={m} too large for box half-width n={env.geometry.n} (need n > 2m)"
        )
    return replace(env, law=law)


def _box_nn_edges(d: int, n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """(bases, step) arrays covering every NN edge with both ends interior."""
    axes = [np.arange(-(n - 1), n, dtype=np.int64)] * d
    out = []
    for k in range(d):
        step = np.zeros(d, dtype=np.int64)
        step[k] = 1
        ranges = list(axes)
        ranges[k] = np.arange(-(n - 1), n - 1, dtype=np.int64)  # base of +e_k edge
        mesh = np.meshgrid(*ranges, indexing="ij")
        bases = np.stack([m.ravel() for m in mesh], axis=1)
        out.append((bases, step))
    return out


def moment_condition_report(law: LawSpec, d: int) -> dict:
    """Report whether exponents p, q with 1/p + 1/q < 2/d exist for the law.

    ``p_sup`` and ``q_sup`` are the suprema of the finite upper and inverse
    moments of a single nearest-neighbor weight (None encodes infinity).
    The condition is evaluated at the suprema, ignoring the critical case.
    """
    base = law.base if isinstance(law, (LongRangePolynomial, TrapLaw)) else law
    if isinstance(base, IidParetoLower):
        p_sup: float | None = None  # weights lie in (0, 1]: all upper moments finite
        q_sup: float | None = base.gamma
    else:
        p_sup = None  # bounded away from 0 and infinity
        q_sup = None
    inv_p = 0.0 if p_sup is None else 1.0 / p_sup
    inv_q = 0.0 if q_sup is None else 1.0 / q_sup
    return {
        "law": law.describe(),
        "dimension": d,
        "p_sup": p_sup,
        "q_sup": q_sup,
        "condition_holds": bool(inv_p + inv_q < 2.0 / d),
    }


def empirical_moment(env: Environment, exponent: float, box: Geometry | None = None) -> float:
    """Spatial average of w(e)**exponent over nearest-neighbor edges in a box.

    Returns ``math.inf`` when a zero weight meets a negative exponent. The
    box defaults to the environment's own geometry.
    """
    geo = box if box is not None else env.geometry
    if geo.dimension != env.d:
        raise DomainError("box dimension does not match environment")
    if geo.n > env.geometry.n and env.geometry.boundary == "torus":
        raise DomainError("box exceeds the torus period")
    total = 0.0
    count = 0
    for bases, step in _box_nn_edges(env.d, geo.n):
        if bases.shape[0] == 0:
            continue
        w = env.conductance_batch(bases, step)
        if exponent < 0 and np.any(w == 0.0):
            return math.inf
        total += float(np.sum(w ** exponent))
        count += w.shape[0]
    if count == 0:
        raise DomainError("box contains no nearest-neighbor edges")
    return total / count
