"""Level-blocked Laplacian and Markov operators.

Functions on the vertex set are stored as one vector per level.  The Markov
operator splits into back blocks P<-_n (level n+1 -> n, entries c_xz/c(x))
and forward blocks P->_{n-1} (level n-1 -> n, entries c_yx/c(x)); the
Laplacian acts as (Df)_n = D_n f_n - C_{n-1}^T f_{n-1} - C_n f_{n+1}.

Outputs at the last stored level are flagged invalid: without level N+1 the
operators are not determined there.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._matops import matvec, rmatvec, scale_rows
from .diagram import Diagram


class LevelFunction:
    """A function V -> R stored as per-level vectors f_0, ..., f_N."""

    def __init__(self, values):
        self.values = [np.asarray(v, dtype=float).reshape(-1) for v in values]

    @classmethod
    def zeros(cls, d: Diagram) -> "LevelFunction":
        return cls([np.zeros(s) for s in d.level_sizes])

    @classmethod
    def constant(cls, d: Diagram, value: float) -> "LevelFunction":
        return cls([np.full(s, float(value)) for s in d.level_sizes])

    @classmethod
    def delta(cls, d: Diagram, vertex) -> "LevelFunction":
        d.check_vertex(vertex)
        f = cls.zeros(d)
        f.values[vertex.level][vertex.index] = 1.0
        return f

    def check_shape(self, d: Diagram) -> None:
        if len(self.values) != d.num_levels + 1:
            raise ValueError(
                f"function has {len(self.values)} levels, diagram stores {d.num_levels + 1}")
        for n, v in enumerate(self.values):
            if v.shape[0] != d.level_sizes[n]:
                raise ValueError(f"level {n} has length {v.shape[0]}, expected {d.level_sizes[n]}")

    @property
    def num_levels(self) -> int:
        return len(self.values) - 1

    def level(self, n: int) -> np.ndarray:
        return self.values[n]

    def at(self, vertex) -> float:
        return float(self.values[vertex.level][vertex.index])

    def copy(self) -> "LevelFunction":
        return LevelFunction([v.copy() for v in self.values])

    def __add__(self, other):
        return LevelFunction([a + b for a, b in zip(self.values, other.values)])

    def __sub__(self, other):
        return LevelFunction([a - b for a, b in zip(self.values, other.values)])

    def __mul__(self, t: float):
        return LevelFunction([t * a for a in self.values])

    __rmul__ = __mul__

    def shift(self, t: float) -> "LevelFunction":
        return LevelFunction([a + t for a in self.values])

    def max_abs(self, other: Optional["LevelFunction"] = None) -> float:
        vals = self.values if other is None else (self - other).values
        return max((np.abs(v).max() if v.size else 0.0) for v in vals)

    def level_extrema(self):
        """(max over V_n, min over V_n) per level, for max/min-principle checks."""
        return ([float(v.max()) for v in self.values],
                [float(v.min()) for v in self.values])


@dataclass(frozen=True)
class LevelOperators:
    """Per-level blocks of P and the Laplacian for one diagram.

    p_back[n]: |V_n| x |V_{n+1}| block P<-_n, defined for 0 <= n < N.
    p_fwd[n]:  |V_n| x |V_{n-1}| block P->_{n-1}, defined for 1 <= n <= N
               (entry [n] lives at index n; index 0 is None).
    degrees[n]: total conductance c(x) per vertex (diagonal of D_n).
    Row [P->_{n-1} | P<-_n] is stochastic for interior n; the last level's
    blocks use truncated c and are flagged by interior_mask.
    """
    diagram: Diagram
    p_back: tuple
    p_fwd: tuple
    degrees: tuple

    @property
    def num_levels(self) -> int:
        return self.diagram.num_levels

    def interior_mask(self) -> list:
        """Validity per level: the last stored level is truncation boundary."""
        return [n < self.num_levels for n in range(self.num_levels + 1)]


def build_level_operators(d: Diagram) -> LevelOperators:
    """Assemble P<-, P->, and degree vectors from the conductance matrices.

    Raises on isolated vertices (c(x) = 0), which cannot carry transition
    probabilities.
    """
    degrees = []
    for n in range(d.num_levels + 1):
        c = d.degree_vector(n)
        if (c <= 0).any():
            x = int(np.nonzero(c <= 0)[0][0])
            raise ValueError(f"isolated vertex at level {n}, index {x} (c(x) = 0)")
        degrees.append(c)
    p_back = []
    p_fwd = [None]
    for n in range(d.num_levels):
        p_back.append(scale_rows(d.conductance[n], 1.0 / degrees[n]))
    for n in range(1, d.num_levels + 1):
        p_fwd.append(scale_rows(d.conductance[n - 1].T, 1.0 / degrees[n]))
    return LevelOperators(diagram=d, p_back=tuple(p_back), p_fwd=tuple(p_fwd),
                          degrees=tuple(degrees))


def laplacian_apply(ops: LevelOperators, f: LevelFunction):
    """(Df)_n = D_n f_n - C_{n-1}^T f_{n-1} - C_n f_{n+1}.

    Returns (LevelFunction, validity mask).  The root is fully determined
    (no predecessor level exists); level N is not and is masked out.
    """
    d = ops.diagram
    f.check_shape(d)
    out = []
    for n in range(d.num_levels + 1):
        v = ops.degrees[n] * f.values[n]
        if n > 0:
            v = v - rmatvec(d.conductance[n - 1], f.values[n - 1])
        if n < d.num_levels:
            v = v - matvec(d.conductance[n], f.values[n + 1])
        out.append(v)
    return LevelFunction(out), ops.interior_mask()


def markov_apply(ops: LevelOperators, f: LevelFunction):
    """(Pf)_n = P->_{n-1} f_{n-1} + P<-_n f_{n+1}, with the same validity mask."""
    d = ops.diagram
    f.check_shape(d)
    out = []
    for n in range(d.num_levels + 1):
        v = np.zeros(d.level_sizes[n])
        if n > 0:
            v += matvec(ops.p_fwd[n], f.values[n - 1])
        if n < d.num_levels:
            v += matvec(ops.p_back[n], f.values[n + 1])
        out.append(v)
    return LevelFunction(out), ops.interior_mask()


def weighted_inner(ops: LevelOperators, u: LevelFunction, v: LevelFunction,
                   up_to_level: Optional[int] = None) -> float:
    """<u, v>_{l2(c)} = sum c(x) u(x) v(x) over levels 0..up_to_level."""
    last = ops.num_levels if up_to_level is None else up_to_level
    return float(sum(np.dot(ops.degrees[n] * u.values[n], v.values[n])
                     for n in range(last + 1)))


@dataclass(frozen=True)
class SpectralBoundReport:
    """Worst observed violations of the P-spectrum bounds and self-adjointness."""
    trials: int
    seed: int
    max_upper_violation: float
    max_lower_violation: float
    max_symmetry_violation: float

    @property
    def max_violation(self) -> float:
        return max(self.max_upper_violation, self.max_lower_violation,
                   self.max_symmetry_violation)


def spectral_bound_check(ops: LevelOperators, trials: int, seed: int) -> SpectralBoundReport:
    """Sample finitely-supported u, v away from the truncation boundary and
    check -|u|^2 <= <u,Pu> <= |u|^2 and <u,Pv> = <Pu,v> in l2(c).

    Violations are normalized: bound violations by |u|^2, symmetry by
    |u| |v|.
    """
    d = ops.diagram
    if d.num_levels < 2:
        raise ValueError("need at least two stored levels")
    rng = np.random.Generator(np.random.Philox(key=seed))
    up = low = sym = 0.0
    interior_last = d.num_levels - 1
    for _ in range(trials):
        u = LevelFunction.zeros(d)
        v = LevelFunction.zeros(d)
        for n in range(interior_last + 1):
            u.values[n] = rng.standard_normal(d.level_sizes[n])
            v.values[n] = rng.standard_normal(d.level_sizes[n])
        pu, _ = markov_apply(ops, u)
        pv, _ = markov_apply(ops, v)
        nu = weighted_inner(ops, u, u, interior_last)
        nv = weighted_inner(ops, v, v, interior_last)
        upu = weighted_inner(ops, u, pu, interior_last)
        up = max(up, (upu - nu) / nu)
        low = max(low, (-nu - upu) / nu)
        upv = weighted_inner(ops, u, pv, interior_last)
        puv = weighted_inner(ops, pu, v, interior_last)
        sym = max(sym, abs(upv - puv) / np.sqrt(nu * nv))
    return SpectralBoundReport(trials=trials, seed=seed, max_upper_violation=up,
                               max_lower_violation=low, max_symmetry_violation=sym)
