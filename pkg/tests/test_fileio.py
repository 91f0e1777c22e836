import numpy as np
import pytest

from bharm import LevelFunction, gen_binary_tree, gen_pascal, validate
from bharm._matops import to_dense
from bharm.fileio import (
    format_diagram,
    format_function,
    format_graph,
    parse_diagram,
    parse_function,
    parse_genspec,
    parse_graph,
)


def test_diagram_round_trip():
    d = gen_binary_tree(4, 2.0)
    d2 = parse_diagram(format_diagram(d))
    assert d2.level_sizes == d.level_sizes
    for a, b in zip(d.conductance, d2.conductance):
        assert np.allclose(to_dense(a), to_dense(b))
    assert validate(d2) == []


def test_diagram_header_required():
    with pytest.raises(ValueError):
        parse_diagram("levels 2 : 1 2\ne 0 0 0 1\n")


def test_duplicate_edge_rejected():
    text = "bratteli v1\nlevels 2 : 1 2\ne 0 0 0 1\ne 0 0 0 2\ne 0 0 1 1\n"
    with pytest.raises(ValueError, match="duplicate"):
        parse_diagram(text)


def test_zero_size_level_rejected():
    with pytest.raises(ValueError):
        parse_diagram("bratteli v1\nlevels 2 : 1 0\n")


def test_out_of_range_edge_rejected():
    with pytest.raises(ValueError):
        parse_diagram("bratteli v1\nlevels 2 : 1 2\ne 0 0 5 1\n")


def test_function_round_trip_skips_zeros():
    d = gen_pascal(4, 1.0)
    f = LevelFunction.zeros(d)
    f.values[2][1] = 2.5
    f.values[4][0] = -1.0
    text = format_function(f)
    assert text.count("\n") == 3  # header + two entries
    f2 = parse_function(text, d)
    for a, b in zip(f.values, f2.values):
        assert np.array_equal(a, b)


def test_function_out_of_range_rejected():
    d = gen_pascal(2, 1.0)
    with pytest.raises(ValueError):
        parse_function("fn v1\n9 0 1.0\n", d)


def test_graph_round_trip():
    from bharm.diagram import GeneralGraph
    g = GeneralGraph(4, [(0, 1, 2.0), (1, 2), (2, 3, 0.5)])
    g2 = parse_graph(format_graph(g))
    assert g2.num_vertices == 4
    assert g2.adj[2][3] == 0.5


def test_genspec_parsing():
    assert parse_genspec("tree:3:2").level_sizes == (1, 2, 4, 8)
    assert parse_genspec("pascal:3:1").level_sizes == (1, 2, 3, 4)
    d = parse_genspec("stationary:11;10:3:2")
    assert d.level_sizes == (1, 2, 2, 2)
    assert np.allclose(to_dense(d.conductance[2]), [[4, 4], [4, 0]])
    d2 = parse_genspec("stationary:1,1;1,0:3:2")
    assert np.allclose(to_dense(d2.conductance[2]), to_dense(d.conductance[2]))
    assert parse_genspec("ladder:4").level_sizes == (1, 2, 2, 2, 2)
    assert parse_genspec("bottleneck:1-3-1:7").level_sizes == (1, 3, 1)
    with pytest.raises(ValueError):
        parse_genspec("moebius:3")
