"""Level recursion for harmonic functions, monopoles, and dipoles, and the
dimension bookkeeping for the space of harmonic prefixes.

The recursion solves, level by level,

    P<-_n f_{n+1} = f_n - P->_{n-1} f_{n-1} - rhs_n / c_n

where rhs is a point-source vector (empty for harmonic functions, delta_x
for a monopole at x, delta_x - delta_o for a dipole).  Underdetermined
levels take the minimum-norm representative unless coordinates are pinned;
inconsistent levels are reported, not thrown, and the least-squares solution
is used.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from ._matops import is_sparse, matvec, rmatvec, to_dense
from .diagram import Diagram, VertexId
from .operators import LevelFunction, LevelOperators, build_level_operators

# Singular values below RANK_RCOND * sigma_max are treated as zero.
RANK_RCOND = 1e-12
DEFAULT_TOL = 1e-9


@dataclass
class SolveReport:
    """Per-level residuals of the recursion (or of a harmonicity check).

    residuals[n] is the max-norm constraint violation at level n; consistent
    is true iff every residual is within the tolerance.  solution_dims[n] is
    the dimension of the level-n solution set where the solver computed it
    (None on large sparse levels, where rank is not revealed).
    """
    residuals: list
    tol: float
    solution_dims: list = field(default_factory=list)

    @property
    def consistent(self) -> bool:
        return all(r <= self.tol for r in self.residuals)

    @property
    def max_residual(self) -> float:
        return max(self.residuals) if self.residuals else 0.0

    def first_inconsistent_level(self) -> Optional[int]:
        for n, r in enumerate(self.residuals):
            if r > self.tol:
                return n
        return None


@dataclass(frozen=True)
class HarmonicState:
    """Orthonormal basis of the admissible stacked pairs (f_{n-1}, f_n).

    Every element, extended by any admissible next level, satisfies all
    constraints below level n.  The basis columns are kept orthonormal for
    conditioning; split gives the two level blocks.
    """
    level: int
    sizes: tuple          # (|V_{n-1}|, |V_n|)
    basis: np.ndarray     # (|V_{n-1}|+|V_n|) x t, orthonormal columns
    tol: float

    @property
    def pair_dimension(self) -> int:
        return self.basis.shape[1]

    def split(self):
        return self.basis[: self.sizes[0]], self.basis[self.sizes[0]:]


def _source_vectors(d: Diagram, source: Optional[Dict[VertexId, float]]):
    rhs = [np.zeros(s) for s in d.level_sizes]
    if source:
        for v, val in source.items():
            d.check_vertex(v)
            rhs[v.level][v.index] += val
    return rhs


def harmonicity_check(d: Diagram, f: LevelFunction, tol: float = DEFAULT_TOL,
                      source: Optional[Dict[VertexId, float]] = None) -> SolveReport:
    """Residuals of Delta f = source at the root and all interior levels.

    residuals[n] = max |(Delta f)_n - rhs_n| for 0 <= n <= N-1; level N is
    truncation boundary and is not checked.
    """
    f.check_shape(d)
    rhs = _source_vectors(d, source)
    degs = [d.degree_vector(n) for n in range(d.num_levels + 1)]
    residuals = []
    for n in range(d.num_levels):
        v = degs[n] * f.values[n] - matvec(d.conductance[n], f.values[n + 1])
        if n > 0:
            v -= rmatvec(d.conductance[n - 1], f.values[n - 1])
        v -= rhs[n]
        residuals.append(float(np.abs(v).max()) if v.size else 0.0)
    return SolveReport(residuals=residuals, tol=tol)


def _solve_level(a, b: np.ndarray, pins: Optional[Dict[int, float]] = None):
    """Minimum-norm least-squares solve of a x = b with optional pinned
    coordinates.  Returns (x, residual_inf, solution_dim or None)."""
    ncols = a.shape[1]
    x = np.zeros(ncols)
    free = np.arange(ncols)
    if pins:
        for j, val in pins.items():
            if not (0 <= j < ncols):
                raise ValueError(f"pinned index {j} outside level of size {ncols}")
            x[j] = val
        pinned_idx = np.array(sorted(pins), dtype=int)
        free = np.setdiff1d(free, pinned_idx)
        if is_sparse(a):
            b = b - a[:, pinned_idx] @ x[pinned_idx]
            a = a[:, free]
        else:
            b = b - np.asarray(a)[:, pinned_idx] @ x[pinned_idx]
            a = np.asarray(a)[:, free]
    if free.size == 0:
        resid = float(np.abs(matvec(a, x[free]) - b).max()) if b.size else 0.0
        return x, resid, 0
    if is_sparse(a):
        sol = spla.lsqr(a.tocsr(), b, atol=1e-14, btol=1e-14,
                        iter_lim=8 * (a.shape[0] + a.shape[1]))[0]
        dim = None
    else:
        a = np.asarray(a, dtype=float)
        sol, _, rank, _ = np.linalg.lstsq(a, b, rcond=RANK_RCOND)
        dim = a.shape[1] - rank
    x[free] = sol
    resid = matvec(a, sol) - b
    return x, float(np.abs(resid).max()) if resid.size else 0.0, dim


def extend_harmonic(d: Diagram, prefix: Sequence[np.ndarray], mode: str = "min-norm",
                    pins: Optional[Dict[int, float]] = None, tol: float = DEFAULT_TOL,
                    source: Optional[Dict[VertexId, float]] = None,
                    ops: Optional[LevelOperators] = None):
    """Solve the next level of the recursion from a prefix f_0..f_n.

    mode "min-norm" (default) and "least-squares" return the minimum-norm
    least-squares representative; "pinned" fixes the given coordinates of
    f_{n+1} and takes minimum norm on the rest.  The report carries the
    residual (inconsistent levels are reported, not raised) and the
    dimension of the level solution set where available.
    """
    if mode not in ("min-norm", "least-squares", "pinned"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode != "pinned":
        pins = None
    ops = ops or build_level_operators(d)
    n = len(prefix) - 1
    if n >= d.num_levels:
        raise ValueError("prefix already reaches the stored depth")
    prefix = [np.asarray(v, dtype=float).reshape(-1) for v in prefix]
    for k, v in enumerate(prefix):
        if v.shape[0] != d.level_sizes[k]:
            raise ValueError(f"prefix level {k} has length {v.shape[0]}, "
                             f"expected {d.level_sizes[k]}")
    rhs = _source_vectors(d, source)
    g = prefix[n].copy()
    if n > 0:
        g -= matvec(ops.p_fwd[n], prefix[n - 1])
    g -= rhs[n] / ops.degrees[n]
    x, resid, dim = _solve_level(ops.p_back[n], g, pins)
    report = SolveReport(residuals=[resid], tol=tol, solution_dims=[dim])
    return x, report


def _exact_residual(rows: np.ndarray, cols: np.ndarray, vals: np.ndarray,
                    n_rows: int, x: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exactly rounded residual b - A x via two-product splitting and fsum.

    Each product a*x is decomposed into an exact hi+lo pair (Dekker split,
    no FMA needed); fsum of all pairs per row then returns the correctly
    rounded sum, which is what lifts iterative refinement past the double
    rounding floor on ill-conditioned stacked systems.
    """
    from math import fsum
    a = vals
    xx = x[cols]
    p = a * xx
    split = 134217729.0  # 2^27 + 1
    a_big = a * split
    a_hi = a_big - (a_big - a)
    a_lo = a - a_hi
    x_big = xx * split
    x_hi = x_big - (x_big - xx)
    x_lo = xx - x_hi
    err = ((a_hi * x_hi - p) + a_hi * x_lo + a_lo * x_hi) + a_lo * x_lo
    buckets: list = [[] for _ in range(n_rows)]
    for r, hi, lo in zip(rows.tolist(), p.tolist(), err.tolist()):
        bucket = buckets[r]
        bucket.append(hi)
        bucket.append(lo)
    out = np.empty(n_rows)
    for r in range(n_rows):
        out[r] = fsum([b[r]] + [-t for t in buckets[r]])
    return out


def _global_refine(d: Diagram, ops: LevelOperators, depth: int, rhs,
                   values: list, seed_given: bool, pins: Dict[int, Dict[int, float]],
                   forward_ok: bool = True):
    """One global solve of the stacked constraint system to remove the
    forward recursion's error growth.

    The forward pass propagates rounding through the three-term recursion,
    which has exponentially growing modes on expanding diagrams; the stacked
    system with the seed and pins eliminated behaves like a boundary value
    problem and is solved in one shot.  Square systems go through a sparse
    LU followed by iterative refinement with exactly rounded residuals (the
    stacked map can be ill-conditioned even though each level is benign, so
    plain double solves stall well above the target accuracy).
    Underdetermined systems get a minimum-norm LSQR correction on top of the
    forward representative, preserving the per-level representative choice.
    """
    sizes = d.level_sizes
    off = np.concatenate([[0], np.cumsum(sizes[1: depth + 1])]).astype(int)
    nvar = int(off[-1])
    rows, cols, vals = [], [], []
    b_parts = [np.array([-rhs[0][0]])]
    c0 = to_dense(d.conductance[0]).reshape(-1)
    rows.append(np.zeros(sizes[1], dtype=np.int64))
    cols.append(np.arange(sizes[1], dtype=np.int64) + off[0])
    vals.append(c0)
    row_base = 1
    for n in range(1, depth):
        cn = sp.coo_matrix(d.conductance[n])
        rows.append(cn.row.astype(np.int64) + row_base)
        cols.append(cn.col.astype(np.int64) + off[n])
        vals.append(cn.data.astype(float))
        rows.append(np.arange(sizes[n], dtype=np.int64) + row_base)
        cols.append(np.arange(sizes[n], dtype=np.int64) + off[n - 1])
        vals.append(-ops.degrees[n])
        if n >= 2:
            cp = sp.coo_matrix(d.conductance[n - 1])
            rows.append(cp.col.astype(np.int64) + row_base)
            cols.append(cp.row.astype(np.int64) + off[n - 2])
            vals.append(cp.data.astype(float))
        b_parts.append(-rhs[n])
        row_base += sizes[n]
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    b = np.concatenate(b_parts)
    n_rows = row_base
    fixed = np.zeros(nvar, dtype=bool)
    x_full = np.concatenate([values[n + 1] for n in range(depth)])
    if seed_given:
        fixed[off[0]: off[1]] = True
    for lvl, coord_map in pins.items():
        if 1 <= lvl <= depth:
            for idx in coord_map:
                fixed[off[lvl - 1] + idx] = True
    keep = ~fixed[cols]
    fix_mask = fixed[cols]
    b_adj = b.copy()
    if fix_mask.any():
        np.add.at(b_adj, rows[fix_mask], -vals[fix_mask] * x_full[cols[fix_mask]])
    free_ids = np.nonzero(~fixed)[0]
    remap = np.full(nvar, -1, dtype=np.int64)
    remap[free_ids] = np.arange(free_ids.size)
    r_f, c_f, v_f = rows[keep], remap[cols[keep]], vals[keep]
    live_rows = np.zeros(n_rows, dtype=bool)
    live_rows[r_f] = True
    row_remap = np.cumsum(live_rows) - 1
    r_f = row_remap[r_f]
    n_live = int(live_rows.sum())
    a_free = sp.csr_matrix((v_f, (r_f, c_f)), shape=(n_live, free_ids.size))
    b_live = b_adj[live_rows]
    x0 = x_full[free_ids]
    if a_free.shape[0] == a_free.shape[1]:
        try:
            lu = spla.splu(a_free.tocsc())
        except RuntimeError:
            lu = None
        if lu is None:
            sol = x0 + spla.lsqr(a_free, b_live - a_free @ x0, atol=1e-14,
                                 btol=1e-14, iter_lim=8 * sum(a_free.shape))[0]
        else:
            sol = lu.solve(b_live)
            if v_f.size <= 2_000_000:
                prev = np.inf
                for _ in range(30):
                    resid = _exact_residual(r_f, c_f, v_f, n_live, sol, b_live)
                    step = lu.solve(resid)
                    norm = float(np.abs(step).max())
                    sol = sol + step
                    if norm <= 1e-15 * max(1.0, float(np.abs(sol).max())) or norm >= prev:
                        break
                    prev = norm
    else:
        r0 = b_live - a_free @ x0
        if forward_ok:
            # healthy forward pass: keep its per-level representative
            correction = spla.lsqr(a_free, r0, atol=1e-14, btol=1e-14,
                                   iter_lim=8 * sum(a_free.shape))[0]
            sol = x0 + correction
        elif v_f.size <= 2_000_000 and max(a_free.shape) <= 4000:
            # the forward pass drifted: return the global minimum-norm
            # least-squares representative (dense SVD: iterative solvers
            # stall on the ill-conditioning that caused the drift)
            sol = np.linalg.lstsq(a_free.toarray(), b_live, rcond=RANK_RCOND)[0]
        else:
            sol = x0 + spla.lsqr(a_free, r0, atol=1e-14, btol=1e-14,
                                 iter_lim=8 * sum(a_free.shape))[0]
    x_full[free_ids] = sol
    out = [values[0]] + [x_full[off[n]: off[n + 1]].copy() for n in range(depth)]
    return out


def solve_chain(d: Diagram, depth: Optional[int] = None,
                source: Optional[Dict[VertexId, float]] = None,
                seed_f1: Optional[np.ndarray] = None,
                pins: Optional[Dict[int, Dict[int, float]]] = None,
                mode: str = "min-norm", tol: float = DEFAULT_TOL,
                stabilize: bool = True):
    """Run the recursion from the root through `depth`, with point sources.

    pins maps level -> {index: value}.  With no seed_f1, level 1 is solved
    from the root equation (min-norm / pinned); a given seed is verified
    against the root equation instead.  When the forward pass is consistent
    and `stabilize` is set, a global solve of the stacked system removes the
    forward error growth (see _global_refine); inconsistent runs keep the
    sequential least-squares semantics untouched.  Returns (LevelFunction,
    SolveReport) with one residual per solved level (root equation first).
    """
    depth = d.num_levels if depth is None else depth
    if depth > d.num_levels:
        raise ValueError("depth exceeds the stored prefix")
    ops = build_level_operators(d)
    pins = pins or {}
    rhs = _source_vectors(d, source)
    values = [np.zeros(1)]
    residuals = []
    dims = []
    if seed_f1 is not None:
        seed_f1 = np.asarray(seed_f1, dtype=float).reshape(-1)
        if seed_f1.shape[0] != d.level_sizes[1]:
            raise ValueError("seed vector length does not match level 1")
        root_resid = abs(float(matvec(ops.p_back[0], seed_f1)[0]
                               - values[0][0] + rhs[0][0] / ops.degrees[0][0]))
        values.append(seed_f1)
        residuals.append(root_resid)
        dims.append(None)
    for n in range(len(values) - 1, depth):
        mode_n = "pinned" if n + 1 in pins else (mode if mode != "pinned" else "min-norm")
        x, rep = extend_harmonic(d, values, mode=mode_n, pins=pins.get(n + 1),
                                 tol=tol, source=source, ops=ops)
        values.append(x)
        residuals.extend(rep.residuals)
        dims.extend(rep.solution_dims)
    if stabilize and depth >= 2:
        # Run the global solve even when the forward pass looks inconsistent:
        # forward drift on expanding diagrams is indistinguishable from a
        # genuine obstruction until the stacked system has been solved.  The
        # refined values are kept only if they actually satisfy the system;
        # genuinely inconsistent runs keep the sequential least-squares
        # semantics and reports.
        forward_ok = all(r <= tol for r in residuals)
        refined = _global_refine(d, ops, depth, rhs, values, seed_f1 is not None,
                                 pins, forward_ok=forward_ok)
        refined_residuals = _chain_residuals(d, ops, depth, rhs, refined)
        refined_ok = all(r <= tol for r in refined_residuals)
        if refined_ok or (forward_ok and max(refined_residuals) <= max(residuals)):
            values = refined
            residuals = refined_residuals
    # pad to the stored depth so the result is a full LevelFunction
    for n in range(depth + 1, d.num_levels + 1):
        values.append(np.zeros(d.level_sizes[n]))
    return LevelFunction(values), SolveReport(residuals=residuals, tol=tol, solution_dims=dims)


def _chain_residuals(d: Diagram, ops: LevelOperators, depth: int, rhs, values) -> list:
    """Per-level residuals of the recursion equations in normalized form."""
    out = []
    for n in range(depth):
        g = values[n].copy()
        if n > 0:
            g -= matvec(ops.p_fwd[n], values[n - 1])
        g -= rhs[n] / ops.degrees[n]
        r = matvec(ops.p_back[n], values[n + 1]) - g
        out.append(float(np.abs(r).max()) if r.size else 0.0)
    return out


def solve_monopole(d: Diagram, x: VertexId, up_to_level: Optional[int] = None,
                   mode: str = "min-norm", pins=None, tol: float = DEFAULT_TOL):
    """Recursion solution of Delta w = delta_x with w(o) = 0.

    Inconsistent levels are reported in the SolveReport, not raised.
    """
    d.check_vertex(x)
    n = d.num_levels if up_to_level is None else up_to_level
    if x.level >= n:
        raise ValueError("pole must lie strictly above the solve depth")
    return solve_chain(d, depth=n, source={x: 1.0}, pins=pins, mode=mode, tol=tol)


def solve_dipole(d: Diagram, x: VertexId, up_to_level: Optional[int] = None,
                 mode: str = "min-norm", pins=None, tol: float = DEFAULT_TOL):
    """Recursion solution of Delta v = delta_x - delta_o with v(o) = 0.

    The root equation this induces is sum_y c_oy v_1(y) = +1: the definition
    Delta v = delta_x - delta_o is implemented exactly (see module docs for
    the sign convention).
    """
    d.check_vertex(x)
    o = VertexId(0, 0)
    if x == o:
        raise ValueError("dipole pole must differ from the root")
    n = d.num_levels if up_to_level is None else up_to_level
    if x.level >= n:
        raise ValueError("pole must lie strictly above the solve depth")
    return solve_chain(d, depth=n, source={x: 1.0, o: -1.0}, pins=pins, mode=mode, tol=tol)


# ---------------------------------------------------------------------------
# Dimension of the space of harmonic prefixes
# ---------------------------------------------------------------------------

@dataclass
class DimensionResult:
    """Prefix-space dimensions from the affine-state propagation.

    per_level[k] is the dimension of {(f_1..f_k) : f(o)=0, all constraints
    at levels < k hold}; dimension is per_level at the requested depth.
    solution_set_dims[k] = nullity of C_k (free parameters added at level
    k+1); rank_drops[k] = extendability conditions imposed at level k.
    Dimensions are for truncated prefixes; extendability to the infinite
    diagram is not certified.
    """
    dimension: int
    per_level: dict
    solution_set_dims: dict
    rank_drops: dict
    state: HarmonicState
    unique_extension: bool

    def as_table(self) -> str:
        lines = ["level  prefix_dim  new_free  rank_drop"]
        for k in sorted(self.per_level):
            nf = self.solution_set_dims.get(k - 1, "")
            rd = self.rank_drops.get(k - 1, "")
            lines.append(f"{k:>5}  {self.per_level[k]:>10}  {nf!s:>8}  {rd!s:>9}")
        return "\n".join(lines)


def _orth(m: np.ndarray) -> np.ndarray:
    if m.size == 0:
        return m.reshape(m.shape[0], 0)
    return scipy.linalg.orth(m, rcond=RANK_RCOND)


def _nullspace(m: np.ndarray) -> np.ndarray:
    if m.shape[0] == 0:
        return np.eye(m.shape[1])
    return scipy.linalg.null_space(m, rcond=RANK_RCOND)


def _rank(m: np.ndarray) -> int:
    if m.size == 0:
        return 0
    sv = np.linalg.svd(m, compute_uv=False)
    if sv.size == 0 or sv[0] == 0.0:
        return 0
    return int((sv > RANK_RCOND * sv[0]).sum())


def harm_dimension(d: Diagram, up_to_level: Optional[int] = None,
                   tol: float = DEFAULT_TOL) -> DimensionResult:
    """Dimension of the space of harmonic prefixes with f(o) = 0.

    Propagates the admissible-pair subspace level by level (impose the
    constraint, project onto the column space, re-orthonormalize) while
    accounting for interior degrees of freedom already forgotten by the pair
    representation.  Equals the null-space dimension of the stacked
    constraint system (the brute-force oracle) on every tested instance.
    """
    n_max = d.num_levels if up_to_level is None else up_to_level
    if n_max < 1:
        raise ValueError("need up_to_level >= 1")
    c0 = to_dense(d.conductance[0]).reshape(1, -1)
    basis1 = _nullspace(c0)
    prev = np.zeros((1, basis1.shape[1]))
    cur = basis1
    dim_p = basis1.shape[1]
    per_level = {1: dim_p}
    sol_dims = {}
    drops = {}
    unique = True
    for n in range(1, n_max):
        cn = to_dense(d.conductance[n])
        cprev = to_dense(d.conductance[n - 1])
        degs = d.degree_vector(n)
        g_map = degs[:, None] * cur - cprev.T @ prev
        q = _orth(cn)
        resid = g_map - q @ (q.T @ g_map)
        # rank decisions on the residual must be relative to the scale of the
        # constraint map, not to the residual's own (possibly noise) spectrum
        scale = max(float(np.linalg.norm(g_map, 2)) if g_map.size else 0.0, 1.0)
        if resid.size:
            u_, sv, vt = np.linalg.svd(resid)
            r = int((sv > RANK_RCOND * scale).sum())
            z = vt[r:].T
        else:
            r = 0
            z = np.eye(g_map.shape[1])
        rank_cn = _rank(cn)
        nullity = cn.shape[1] - rank_cn
        if nullity > 0:
            unique = False
        dim_p = (dim_p - r) + nullity
        sol_dims[n] = nullity
        drops[n] = r
        # particular next-level solutions for the surviving pair basis
        g_ext = g_map @ z if z.size else np.zeros((g_map.shape[0], 0))
        if g_ext.shape[1] > 0:
            f_next, _, _, _ = np.linalg.lstsq(cn, g_ext, rcond=RANK_RCOND)
        else:
            f_next = np.zeros((cn.shape[1], 0))
        kern = _nullspace(cn)
        top = np.hstack([cur @ z, np.zeros((cur.shape[0], kern.shape[1]))])
        bot = np.hstack([f_next, kern])
        stacked = _orth(np.vstack([top, bot]))
        prev, cur = stacked[: cur.shape[0]], stacked[cur.shape[0]:]
        per_level[n + 1] = dim_p
    state = HarmonicState(level=n_max, sizes=(prev.shape[0], cur.shape[0]),
                          basis=np.vstack([prev, cur]), tol=tol)
    return DimensionResult(dimension=dim_p, per_level=per_level,
                           solution_set_dims=sol_dims, rank_drops=drops,
                           state=state, unique_extension=unique)
