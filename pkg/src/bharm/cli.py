"""Command-line surface: generation, validation, solving, simulation,
energy reporting, conversion, and the closed-form verification suite.

Exit codes: 0 success, 1 domain error (message names the violated
precondition), 2 usage error.  Numeric output uses 12 significant digits
with '.' as the decimal separator; every file output gets a JSON run
manifest alongside it so reruns are byte-reproducible.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__
from .closedforms import (
    pascal_harmonic,
    pascal_pins,
    stationary_formula,
    tree_path_value,
    tree_pins,
    tree_symmetric_harmonic,
)
from .diagram import VertexId, diagram_from_graph, extract_maximal_bratteli, validate
from .energy import energy_lower_bound, energy_norm
from .fileio import (
    FMT,
    format_diagram,
    format_function,
    load_diagram,
    parse_diagram,
    parse_function,
    parse_graph,
)
from .harmonic import harm_dimension, harmonicity_check, solve_chain, solve_dipole, solve_monopole
from .operators import build_level_operators, laplacian_apply, markov_apply
from .pathspace import (
    WalkConfig,
    green_exact,
    green_identity_report,
    poisson_kernel,
    simulate_walks,
)


class DomainError(Exception):
    """Precondition violations surfaced to the user with exit code 1."""


# input-file digests recorded per invocation for the run manifest
_INPUT_HASHES: dict = {}


def _read_text(path: str) -> str:
    if path == "-":
        return sys.stdin.read()
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    _INPUT_HASHES[path] = _hash(text)
    return text


def _hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _write_output(path: str, text: str, args, extra: dict) -> None:
    """Write an output file plus its run manifest; stdout when no path."""
    if path is None or path == "-":
        sys.stdout.write(text)
        return
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    manifest = {
        "tool": "bharm",
        "version": __version__,
        "command": sys.argv[1:],
        "threads": int(os.environ.get("BH_THREADS", "1")),
        "input_sha256_16": dict(_INPUT_HASHES),
        "output_sha256_16": _hash(text),
    }
    manifest.update(extra)
    with open(path + ".manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _parse_vertex(spec: str) -> VertexId:
    try:
        n, i = spec.split(",")
        return VertexId(int(n), int(i))
    except ValueError as exc:
        raise DomainError(f"bad vertex {spec!r}, expected 'level,index'") from exc


def _parse_pins(pin_args) -> dict:
    pins: dict = {}
    for spec in pin_args or []:
        try:
            coord, val = spec.split("=")
            n, i = coord.split(",")
            pins.setdefault(int(n), {})[int(i)] = float(val)
        except ValueError as exc:
            raise DomainError(f"bad pin {spec!r}, expected 'level,index=value'") from exc
    return pins


def _diagram_arg(args):
    try:
        if os.path.exists(args.diagram):
            return parse_diagram(_read_text(args.diagram))
        return load_diagram(args.diagram)
    except (OSError, ValueError) as exc:
        raise DomainError(f"cannot load diagram {args.diagram!r}: {exc}") from exc


def _fn_arg(d, path):
    return parse_function(_read_text(path), d)


# --- subcommands -----------------------------------------------------------

def _cmd_gen(args) -> int:
    d = _diagram_arg(argparse.Namespace(diagram=args.spec))
    _write_output(args.out, format_diagram(d), args, {"generator": args.spec})
    return 0


def _cmd_validate(args) -> int:
    d = parse_diagram(_read_text(args.file))
    violations = validate(d)
    for v in violations:
        print(str(v))
    if violations:
        raise DomainError(f"{len(violations)} violation(s)")
    print(f"valid: {len(d.level_sizes)} levels, {d.total_vertices} vertices")
    return 0


def _cmd_harmonic(args) -> int:
    d = _diagram_arg(args)
    depth = args.depth if args.depth is not None else d.num_levels
    if depth > d.num_levels:
        raise DomainError("requested depth exceeds the stored prefix")
    pins = _parse_pins(args.pin)
    seed = None
    if args.seed_vector and args.seed_vector != "auto":
        seed = _fn_arg(d, args.seed_vector).values[1]
    elif 1 not in pins:
        # deterministic nonzero seed: first basis vector of the root
        # constraint's null space, sign-normalized (the plain minimum-norm
        # seed would be the zero function)
        import scipy.linalg
        from ._matops import to_dense
        c0 = to_dense(d.conductance[0]).reshape(1, -1)
        basis = scipy.linalg.null_space(c0)
        if basis.shape[1] == 0:
            raise DomainError("root constraint admits only the zero seed")
        seed = basis[:, 0]
        lead = seed[np.nonzero(np.abs(seed) > 1e-12)[0][0]]
        seed = seed / lead
    f, report = solve_chain(d, depth=depth, seed_f1=seed, pins=pins,
                            mode=args.mode, tol=args.tol)
    if not report.consistent:
        lvl = report.first_inconsistent_level()
        print(f"# inconsistent at level {lvl}: residual "
              + FMT.format(report.residuals[lvl]), file=sys.stderr)
    _write_output(args.out, format_function(f), args,
                  {"tol": args.tol, "max_residual": report.max_residual})
    return 0


def _cmd_dimension(args) -> int:
    d = _diagram_arg(args)
    depth = args.depth if args.depth is not None else d.num_levels
    res = harm_dimension(d, up_to_level=depth, tol=args.tol)
    print(res.as_table())
    print(f"prefix dimension at level {depth}: {res.dimension}")
    return 0


def _cmd_pole(args, dipole: bool) -> int:
    d = _diagram_arg(args)
    x = _parse_vertex(args.vertex)
    depth = args.depth if args.depth is not None else d.num_levels
    try:
        if dipole:
            f, report = solve_dipole(d, x, up_to_level=depth, mode=args.mode, tol=args.tol)
        else:
            f, report = solve_monopole(d, x, up_to_level=depth, mode=args.mode, tol=args.tol)
    except ValueError as exc:
        raise DomainError(str(exc)) from exc
    if not report.consistent:
        print("# inconsistent recursion; least-squares solution emitted", file=sys.stderr)
    _write_output(args.out, format_function(f), args,
                  {"pole": str(x), "max_residual": report.max_residual})
    return 0


def _cmd_green(args) -> int:
    d = _diagram_arg(args)
    boundary = args.boundary if args.boundary is not None else d.num_levels
    verts = [_parse_vertex(s) for s in args.vertices.split(";")] if args.vertices else None
    try:
        gs = green_exact(d, boundary, vertices=verts)
    except ValueError as exc:
        raise DomainError(str(exc)) from exc
    lines = ["x_level,x_index,y_level,y_index,quantity,estimate,stderr,n_samples"]
    for i, x in enumerate(gs.vertices):
        for j, y in enumerate(gs.vertices):
            lines.append(f"{x.level},{x.index},{y.level},{y.index},G,"
                         + FMT.format(gs.green[i, j]) + ",0,0")
            lines.append(f"{x.level},{x.index},{y.level},{y.index},F,"
                         + FMT.format(gs.reach_hit[i, j]) + ",0,0")
    for j, y in enumerate(gs.vertices):
        lines.append(f"{y.level},{y.index},{y.level},{y.index},U,"
                     + FMT.format(gs.return_prob[j]) + ",0,0")
    _write_output(args.out, "\n".join(lines) + "\n", args, {"boundary_level": boundary})
    return 0


def _cmd_walk(args) -> int:
    d = _diagram_arg(args)
    start = _parse_vertex(args.start)
    targets = [_parse_vertex(s) for s in args.targets.split(";")] if args.targets else []
    absorb = args.absorb if args.absorb is not None else d.num_levels
    cfg = WalkConfig(max_steps=args.max_steps, num_walks=args.walks,
                     seed=args.seed, absorb_level=absorb)
    try:
        est = simulate_walks(d, start, cfg, targets)
    except ValueError as exc:
        raise DomainError(str(exc)) from exc
    lines = ["x_level,x_index,y_level,y_index,quantity,estimate,stderr,n_samples"]
    for p in est.pairs:
        base = f"{start.level},{start.index},{p.target.level},{p.target.index}"
        lines.append(f"{base},F," + FMT.format(p.reach) + ","
                     + FMT.format(p.reach_stderr) + f",{est.n_absorbed}")
        lines.append(f"{base},G," + FMT.format(p.visits) + ","
                     + FMT.format(p.visits_stderr) + f",{est.n_absorbed}")
    lines.append(f"{start.level},{start.index},{start.level},{start.index},U,"
                 + FMT.format(est.return_prob) + "," + FMT.format(est.return_stderr)
                 + f",{est.n_absorbed}")
    _write_output(args.out, "\n".join(lines) + "\n", args,
                  {"seed": args.seed, "n_capped": est.n_capped})
    return 0


def _cmd_poisson(args) -> int:
    d = _diagram_arg(args)
    fvals = _fn_arg(d, args.values)
    level = args.level
    cfg = None
    if args.method == "monte-carlo":
        cfg = WalkConfig(max_steps=args.max_steps, num_walks=args.walks,
                         seed=args.seed, absorb_level=level)
    try:
        res = poisson_kernel(d, fvals.values[level], level, method=args.method, cfg=cfg)
    except ValueError as exc:
        raise DomainError(str(exc)) from exc
    if res.n_capped:
        print(f"# {res.n_capped} capped walk(s) excluded (bias note: see docs)",
              file=sys.stderr)
    _write_output(args.out, format_function(res.values), args,
                  {"method": args.method, "level": level})
    return 0


def _cmd_energy(args) -> int:
    d = _diagram_arg(args)
    f = _fn_arg(d, args.fn)
    rep = energy_norm(d, f)
    bound, holds = energy_lower_bound(rep)
    if args.format == "csv":
        lines = ["level,increment,energy_partial,level_current,beta_times_size,bound_partial"]
        for n in range(d.num_levels):
            lines.append(",".join([str(n), FMT.format(rep.level_increments[n]),
                                   FMT.format(rep.energy_partial[n]),
                                   FMT.format(rep.level_currents[n + 1]),
                                   FMT.format(rep.beta[n] * d.level_sizes[n]),
                                   FMT.format(rep.bound_partial[n])]))
        text = "\n".join(lines) + "\n"
    else:
        rows = ["level  increment        energy<=level   I_n             bound<=level"]
        for n in range(d.num_levels):
            rows.append(f"{n:>5}  " + "  ".join(
                FMT.format(v).ljust(15) for v in
                (rep.level_increments[n], rep.energy_partial[n],
                 rep.level_currents[n + 1], rep.bound_partial[n])))
        rows.append(f"total energy: {FMT.format(rep.energy)}  lower bound: "
                    + FMT.format(bound) + f"  holds: {holds}"
                    + f"  divergence flag: {rep.divergence_flag}")
        text = "\n".join(rows) + "\n"
    _write_output(args.out, text, args, {"energy": rep.energy})
    return 0


def _cmd_apply(args, which: str) -> int:
    d = _diagram_arg(args)
    f = _fn_arg(d, args.fn)
    ops = build_level_operators(d)
    out, mask = (laplacian_apply if which == "laplacian" else markov_apply)(ops, f)
    for n, ok in enumerate(mask):
        if not ok:
            out.values[n][:] = 0.0
            print(f"# level {n} omitted: not determined at the truncation boundary",
                  file=sys.stderr)
    _write_output(args.out, format_function(out), args, {"operator": which})
    return 0


def _cmd_convert(args) -> int:
    g = parse_graph(_read_text(args.graph))
    try:
        if args.ray:
            ray = [int(v) for v in args.ray.split(",")]
            res = extract_maximal_bratteli(g, ray)
            d = res.diagram
            note = {"maximal_within_ball": res.maximal_within_ball}
        else:
            d = diagram_from_graph(g, args.root)
            note = {}
    except ValueError as exc:
        raise DomainError(str(exc)) from exc
    _write_output(args.out, format_diagram(d), args, note)
    return 0


# --- closed-form verification ---------------------------------------------

def _verify_rows_pascal():
    from .diagram import gen_pascal
    d = gen_pascal(8, 1.0)
    f, _ = solve_chain(d, seed_f1=[1.0, -1.0], pins=pascal_pins(8))
    h = pascal_harmonic(8)
    rows = []
    for (n, i) in [(2, 0), (2, 1), (2, 2), (5, 2), (8, 3)]:
        rows.append((f"h({n},{i})", h.values[n][i], f.values[n][i], "closed-form vs recursion"))
    rep = harmonicity_check(d, f)
    rows.append(("max harmonicity residual", 0.0, rep.max_residual, "recursion output"))
    return rows, 1e-8


def _verify_rows_tree():
    from .diagram import gen_binary_tree
    lam = 2.0
    d = gen_binary_tree(8, lam)
    f, _ = solve_chain(d, seed_f1=[lam, -lam], pins=tree_pins(8, lam))
    rows = []
    for n in (2, 4, 7):
        rows.append((f"f(x_{n}(1))", tree_path_value(n, lam), f.values[n][0],
                     "closed-form vs recursion"))
    g = tree_symmetric_harmonic(8, lam)
    sup = max(float(np.abs(a - b).max()) for a, b in zip(f.values, g.values))
    rows.append(("sup |recursion - closed form|", 0.0, sup, "whole prefix"))
    return rows, 1e-8


def _verify_rows_stationary():
    from .diagram import gen_stationary
    d = gen_stationary([[1, 1], [1, 0]], 8, 2.0)
    f1 = np.array([1.0, -1.0])
    f, _ = solve_chain(d, seed_f1=f1)
    formula = stationary_formula(d, f1)
    rows = []
    for n in (2, 3):
        for i in (0, 1):
            rows.append((f"f_{n}({i})", formula.values[n][i], f.values[n][i],
                         "formula vs recursion"))
    rows.append(("recursion harmonicity residual", 0.0,
                 harmonicity_check(d, f).max_residual, "recursion output"))
    rows.append(("formula harmonicity residual", 0.0,
                 harmonicity_check(d, formula).max_residual,
                 "formula output (nonzero: formula family is not harmonic here)"))
    return rows, 1e-9


def _verify_rows_bounds():
    from .diagram import gen_binary_tree, gen_pascal
    rows = []
    d = gen_pascal(10, 1.0)
    rep = energy_norm(d, pascal_harmonic(10))
    bound, holds = energy_lower_bound(rep)
    rows.append(("pascal bound <= energy", 1.0, 1.0 if holds else 0.0, "harmonic lower bound"))
    rows.append(("pascal divergence flag", 1.0, 1.0 if rep.divergence_flag else 0.0,
                 "infinite-energy criterion"))
    d = gen_binary_tree(10, 2.0)
    rep = energy_norm(d, tree_symmetric_harmonic(10, 2.0))
    bound, holds = energy_lower_bound(rep)
    rows.append(("tree bound <= energy", 1.0, 1.0 if holds else 0.0, "harmonic lower bound"))
    return rows, 1e-12


def _verify_rows_greens():
    from .diagram import gen_binary_tree
    d = gen_binary_tree(10, 2.0)
    verts = [VertexId(0, 0), VertexId(1, 0), VertexId(2, 1), VertexId(3, 4)]
    gs = green_exact(d, 10, vertices=verts)
    rep = green_identity_report(d, gs)
    rows = [
        ("G(x,x)(1-U(x,x)) = 1", 0.0, rep.diag_product, "diagonal identity"),
        ("G(x,y) = F(x,y)G(y,y)", 0.0, rep.ratio_vs_hit, "reach/visit identity"),
        ("U one-step", 0.0, rep.one_step_return, "return decomposition"),
        ("F one-step", 0.0, rep.one_step_reach, "reach decomposition"),
        ("c(x)G(x,y) = c(y)G(y,x)", 0.0, rep.reversibility_g, "reversibility (G)"),
    ]
    return rows, 1e-9


def _cmd_verify(args) -> int:
    cases = {
        "pascal": _verify_rows_pascal,
        "tree": _verify_rows_tree,
        "stationary": _verify_rows_stationary,
        "bounds": _verify_rows_bounds,
        "greens": _verify_rows_greens,
    }
    if args.case not in cases:
        raise DomainError(f"unknown case {args.case!r}; pick from {sorted(cases)}")
    rows, tol = cases[args.case]()
    width = max(len(r[0]) for r in rows)
    ok = True
    for name, expected, computed, tag in rows:
        good = abs(expected - computed) <= tol
        ok = ok and good
        print(f"{name.ljust(width)}  expected {FMT.format(expected):>18}  "
              f"computed {FMT.format(computed):>18}  [{tag}] "
              + ("ok" if good else "MISMATCH"))
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


# --- argument parsing -------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bharm",
                                description="potential theory on level-graded networks")
    sub = p.add_subparsers(dest="command", required=True)

    def add_common(sp, diagram=True):
        if diagram:
            sp.add_argument("--diagram", required=True,
                            help="diagram file or generator spec (tree:d:lam, ...)")
        sp.add_argument("--out", default=None, help="output file ('-' = stdout)")
        sp.add_argument("--tol", type=float, default=1e-9)

    sp = sub.add_parser("gen", help="emit a generated diagram")
    sp.add_argument("spec")
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=_cmd_gen)

    sp = sub.add_parser("validate", help="check diagram invariants")
    sp.add_argument("file", nargs="?", default="-")
    sp.set_defaults(func=_cmd_validate)

    sp = sub.add_parser("harmonic", help="run the harmonic level recursion")
    add_common(sp)
    sp.add_argument("--depth", type=int, default=None)
    sp.add_argument("--seed-vector", default="auto")
    sp.add_argument("--mode", choices=["min-norm", "least-squares", "pinned"],
                    default="min-norm")
    sp.add_argument("--pin", action="append", help="level,index=value (repeatable)")
    sp.set_defaults(func=_cmd_harmonic)

    sp = sub.add_parser("dimension", help="prefix dimension per level")
    add_common(sp)
    sp.add_argument("--depth", type=int, default=None)
    sp.set_defaults(func=_cmd_dimension)

    for name, dip in (("monopole", False), ("dipole", True)):
        sp = sub.add_parser(name, help=f"solve the {name} recursion")
        add_common(sp)
        sp.add_argument("--vertex", required=True, help="level,index")
        sp.add_argument("--depth", type=int, default=None)
        sp.add_argument("--mode", choices=["min-norm", "least-squares", "pinned"],
                        default="min-norm")
        sp.set_defaults(func=lambda a, dip=dip: _cmd_pole(a, dip))

    sp = sub.add_parser("green", help="exact killed-chain G/F/U values")
    add_common(sp)
    sp.add_argument("--boundary", type=int, default=None)
    sp.add_argument("--vertices", default=None, help="'l,i;l,i;...'")
    sp.set_defaults(func=_cmd_green)

    sp = sub.add_parser("walk", help="Monte Carlo walk estimates")
    add_common(sp)
    sp.add_argument("--start", required=True)
    sp.add_argument("--targets", default=None)
    sp.add_argument("--walks", type=int, default=10000)
    sp.add_argument("--max-steps", type=int, default=100000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--absorb", type=int, default=None)
    sp.set_defaults(func=_cmd_walk)

    sp = sub.add_parser("poisson", help="harmonic extension of boundary data")
    add_common(sp)
    sp.add_argument("--level", type=int, required=True)
    sp.add_argument("--values", required=True, help="fn file with the boundary data")
    sp.add_argument("--method", choices=["exact-dirichlet", "monte-carlo"],
                    default="exact-dirichlet")
    sp.add_argument("--walks", type=int, default=10000)
    sp.add_argument("--max-steps", type=int, default=100000)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=_cmd_poisson)

    sp = sub.add_parser("energy", help="energy report for a function file")
    add_common(sp)
    sp.add_argument("--fn", required=True)
    sp.add_argument("--format", choices=["csv", "pretty"], default="pretty")
    sp.set_defaults(func=_cmd_energy)

    for name in ("apply-laplacian", "apply-markov"):
        sp = sub.add_parser(name, help=f"{name.split('-')[1]} operator on a function file")
        add_common(sp)
        sp.add_argument("--fn", required=True)
        sp.set_defaults(func=lambda a, w=name.split("-")[1]: _cmd_apply(a, w))

    sp = sub.add_parser("convert", help="general graph -> diagram")
    sp.add_argument("--graph", required=True)
    sp.add_argument("--root", type=int, default=0)
    sp.add_argument("--ray", default=None, help="comma-separated vertex ids")
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=_cmd_convert)

    sp = sub.add_parser("verify-paper", help="closed-form regression cases")
    sp.add_argument("case", help="tree | pascal | stationary | bounds | greens")
    sp.set_defaults(func=_cmd_verify)

    return p


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    _INPUT_HASHES.clear()
    try:
        return args.func(args)
    except DomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        if isinstance(exc, BrokenPipeError):
            return 0
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
