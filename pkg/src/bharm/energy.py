"""Energy norms, currents, the harmonic energy identities, the per-level
lower bound for harmonic functions, resistance distance, and the dissipation
isometry.

All sums run over the stored prefix in a fixed order (level by level), so
results are bit-stable across runs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np
import scipy.sparse as sp

from ._matops import col_sums, matvec, rmatvec, row_sums
from .diagram import Diagram, VertexId
from .harmonic import DEFAULT_TOL, harmonicity_check
from .operators import LevelFunction, build_level_operators, markov_apply
from .pathspace import dipole_green


def _edge_energy(cm, f_top: np.ndarray, f_bot: np.ndarray) -> float:
    """sum c_ij (f_top(i) - f_bot(j))^2 over one level of edges.

    Computed from per-edge differences: the quadratic expansion cancels
    catastrophically when the differences are small against the values.
    """
    coo = sp.coo_matrix(cm)
    drops = f_top[coo.row] - f_bot[coo.col]
    return float(np.dot(coo.data, drops * drops))


@dataclass
class EnergyReport:
    """Energy and current diagnostics over the stored prefix.

    level_increments[n] is the edge energy between levels n and n+1;
    energy_partial is its running sum.  currents[n] (n >= 1) holds
    I_n(x), the conductance-weighted flux into x from level n-1, and
    level_currents[n] their sum I_n (equal to the root flux I_1 for harmonic
    functions).  beta[n] = max c(x) on V_n; the entry at the last stored
    level uses truncated c(x) (no outgoing edges are stored there).
    bound_partial[m] = sum_{n<=m} I_1^2 / (beta_n |V_n|) is the harmonic
    lower bound; divergence_flag marks empirically unbounded partial sums of
    sum 1/(beta_n |V_n|), reported as a flag, never as a theorem.
    """
    energy: float
    level_increments: list
    energy_partial: list
    currents: list
    level_currents: list
    root_flux: float
    beta: list
    bound_terms: list
    bound_partial: list
    divergence_terms: list
    divergence_flag: bool
    beta_footnote: str = "beta at the last stored level uses truncated c(x)"


def _divergence_heuristic(terms: list, tail: int = 10, eps: float = 1e-6) -> bool:
    """Empirical non-summability flag, never a theorem.

    Fails the Cauchy test (tail still contributes more than eps) and the
    terms do not decay faster than 1/n: either the tail is non-decreasing or
    n*a_n at the deepest level stays comparable to its running maximum
    (constant n*a_n is the harmonic borderline, which diverges).
    """
    if len(terms) < 3:
        return False
    tail_terms = terms[-tail:]
    if float(sum(tail_terms)) <= eps:
        return False
    nondecreasing = all(b >= a * (1 - 1e-9) for a, b in zip(tail_terms, tail_terms[1:]))
    weighted = [(k + 1) * t for k, t in enumerate(terms)]
    slow_decay = weighted[-1] >= 0.4 * max(weighted)
    return nondecreasing or slow_decay


def energy_norm(d: Diagram, f: LevelFunction) -> EnergyReport:
    """Edge-sum energy (1/2) sum_{x,y} c_xy (f(x)-f(y))^2 with per-level
    partial sums, per-vertex currents, and the lower-bound ingredients."""
    f.check_shape(d)
    incs = []
    for n in range(d.num_levels):
        incs.append(_edge_energy(d.conductance[n], f.values[n], f.values[n + 1]))
    partial = np.cumsum(incs).tolist() if incs else []
    currents: list = [np.zeros(0)]
    level_currents = [0.0]
    for n in range(1, d.num_levels + 1):
        up = col_sums(d.conductance[n - 1])
        i_n = up * f.values[n] - rmatvec(d.conductance[n - 1], f.values[n - 1])
        currents.append(i_n)
        level_currents.append(float(i_n.sum()))
    root_flux = level_currents[1] if d.num_levels >= 1 else 0.0
    beta = [float(d.degree_vector(n).max()) for n in range(d.num_levels + 1)]
    bound_terms = [root_flux ** 2 / (beta[n] * d.level_sizes[n])
                   for n in range(d.num_levels + 1)]
    div_terms = [1.0 / (beta[n] * d.level_sizes[n]) for n in range(d.num_levels + 1)]
    return EnergyReport(
        energy=float(sum(incs)),
        level_increments=incs,
        energy_partial=partial,
        currents=currents,
        level_currents=level_currents,
        root_flux=float(root_flux),
        beta=beta,
        bound_terms=bound_terms,
        bound_partial=np.cumsum(bound_terms).tolist(),
        divergence_terms=div_terms,
        divergence_flag=_divergence_heuristic(div_terms),
    )


def energy_lower_bound(report: EnergyReport) -> Tuple[float, bool]:
    """Evaluate the harmonic lower bound against the energy partial sums.

    Returns (deepest comparable bound partial sum, holds).  holds is true
    when bound_partial[m] <= energy_partial[m] + 1e-12 at every depth m for
    which the edge energy through level m+1 is stored: the bound term at
    level n is dominated by the vertex-centered energy at level n, whose
    edges are all stored up to m = N-1.
    """
    holds = True
    last = len(report.energy_partial)
    for m in range(last):
        if report.bound_partial[m] > report.energy_partial[m] + 1e-12:
            holds = False
    bound = report.bound_partial[last - 1] if last else 0.0
    return bound, holds


@dataclass(frozen=True)
class HarmonicEnergyValues:
    """The two interior-sum energy formulas for harmonic functions and the
    matching restricted edge sum.

    Both formulas sum over interior vertices only; boundary_correction is
    the half-weight of the interior-to-boundary edges, reported separately
    so the identity stays exact on a truncated prefix.
    """
    via_markov: float        # (1/2) sum c(x) ((P f^2)(x) - f^2(x))
    via_laplacian: float     # -(1/2) sum (Delta f^2)(x)
    edge_sum_interior: float
    boundary_correction: float


def energy_harmonic_formulas(d: Diagram, f: LevelFunction,
                             tol: float = DEFAULT_TOL) -> HarmonicEnergyValues:
    """Evaluate the two alternative energy formulas on the interior.

    Requires f harmonic on the interior (checked); both formulas then agree
    with the edge sum that gives full weight to interior-interior edges and
    half weight to interior-boundary edges.
    """
    rep = harmonicity_check(d, f, tol=tol)
    if not rep.consistent:
        raise ValueError(
            f"input is not harmonic (max residual {rep.max_residual:.3e}); "
            "use energy_norm for general functions")
    ops = build_level_operators(d)
    f2 = LevelFunction([v ** 2 for v in f.values])
    pf2, _ = markov_apply(ops, f2)
    via_markov = 0.5 * float(sum(
        np.dot(ops.degrees[n], pf2.values[n] - f2.values[n])
        for n in range(d.num_levels)))
    via_laplacian = 0.0
    for n in range(d.num_levels):
        v = ops.degrees[n] * f2.values[n]
        if n > 0:
            v = v - rmatvec(d.conductance[n - 1], f2.values[n - 1])
        if n < d.num_levels:
            v = v - matvec(d.conductance[n], f2.values[n + 1])
        via_laplacian -= 0.5 * float(v.sum())
    incs = [_edge_energy(d.conductance[n], f.values[n], f.values[n + 1])
            for n in range(d.num_levels)]
    boundary_half = 0.5 * incs[-1] if incs else 0.0
    edge_sum_interior = float(sum(incs[:-1])) + boundary_half
    return HarmonicEnergyValues(via_markov=via_markov, via_laplacian=via_laplacian,
                                edge_sum_interior=edge_sum_interior,
                                boundary_correction=boundary_half)


@dataclass(frozen=True)
class CurrentBalanceReport:
    """Per-level worst |I_in(x) - I_out(x)|; zero exactly on harmonic input."""
    per_level: tuple
    max_imbalance: float


def current_balance(d: Diagram, f: LevelFunction) -> CurrentBalanceReport:
    """Kirchhoff check: incoming equals outgoing current at every interior
    vertex iff f is harmonic."""
    f.check_shape(d)
    per_level = []
    for n in range(1, d.num_levels):
        up = col_sums(d.conductance[n - 1])
        i_in = up * f.values[n] - rmatvec(d.conductance[n - 1], f.values[n - 1])
        down = row_sums(d.conductance[n])
        i_out = matvec(d.conductance[n], f.values[n + 1]) - down * f.values[n]
        per_level.append(float(np.abs(i_in - i_out).max()))
    worst = max(per_level) if per_level else 0.0
    return CurrentBalanceReport(per_level=tuple(per_level), max_imbalance=worst)


@dataclass(frozen=True)
class DissipationReport:
    """Both sides of the dissipation isometry |d(u)|^2_Diss = |u|^2_E."""
    dissipation: float
    energy: float
    relative_gap: float


def dissipation_check(d: Diagram, f: LevelFunction) -> DissipationReport:
    """Compute the edge current I = du and verify sum I(e)^2 / c_e equals the
    energy norm (algebraic identity; checked to numerical precision)."""
    f.check_shape(d)
    diss = 0.0
    for n in range(d.num_levels):
        cm = sp.coo_matrix(d.conductance[n])
        drops = f.values[n][cm.row] - f.values[n + 1][cm.col]
        currents = cm.data * drops
        diss += float(np.sum(currents ** 2 / cm.data))
    energy = energy_norm(d, f).energy
    gap = abs(diss - energy) / max(abs(energy), 1.0)
    return DissipationReport(dissipation=float(diss), energy=energy, relative_gap=float(gap))


def resistance_distance(d: Diagram, x: VertexId, y: VertexId, boundary_level: int) -> float:
    """Energy of the Green dipole between x and y; zero on equal input.

    Symmetric and a metric on the truncated network (effective resistance
    with the boundary level grounded).
    """
    if x == y:
        return 0.0
    v = dipole_green(d, x, y, boundary_level)
    return energy_norm(d, v).energy


@dataclass(frozen=True)
class StationaryEnergyResult:
    """Finite-energy criterion for the repeating-diagram formula family."""
    finite: bool
    f1_spread: float
    energy_partial: list
    function: LevelFunction


def stationary_energy_criterion(d: Diagram, f_1: np.ndarray,
                                tol: float = 1e-9) -> StationaryEnergyResult:
    """Build f by the repeating-diagram formula f_n = f_1 * sum_{i<n} lam^-i
    and report whether the energy partial sums are bounded.

    The stated criterion: finite energy iff f_1 is constant (within tol).
    Requires a stationary diagram with symmetric invertible A and lam > 1.
    """
    rule = d.extension
    if rule is None or rule.kind != "stationary":
        raise ValueError("diagram was not built by the stationary generator")
    a = np.array(rule.matrix, dtype=float)
    if not np.array_equal(a, a.T):
        raise ValueError("stationary matrix A must be symmetric")
    if abs(np.linalg.det(a)) < 1e-12:
        raise ValueError("stationary matrix A must be invertible")
    if rule.lam <= 1.0:
        raise ValueError("criterion requires lam > 1")
    f_1 = np.asarray(f_1, dtype=float).reshape(-1)
    if f_1.shape[0] != d.level_sizes[1]:
        raise ValueError("f_1 has the wrong length")
    from .closedforms import stationary_formula
    f = stationary_formula(d, f_1)
    report = energy_norm(d, f)
    spread = float(f_1.max() - f_1.min())
    return StationaryEnergyResult(finite=spread <= tol, f1_spread=spread,
                                  energy_partial=report.energy_partial, function=f)
