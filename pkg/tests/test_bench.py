import numpy as np
import pytest

from semistatic.bench import (
    bench_template, graph_with_edges, linear_fit, run_bench, serialized_size, size_vs_components,
)


def test_linear_fit_exact_line():
    slope, intercept, r2 = linear_fit([1, 2, 3, 4], [3, 5, 7, 9])
    assert (slope, intercept, r2) == (pytest.approx(2.0), pytest.approx(1.0), pytest.approx(1.0))


def test_graph_edge_count():
    g = graph_with_edges(10, bench_template(2, 0))
    assert len(g.edges) == 10
    assert serialized_size(graph_with_edges(20, bench_template(2, 0))) > serialized_size(g)


def test_per_component_size_constant():
    _, sizes = size_vs_components(5)
    marginal = np.diff(sizes[1:])
    assert np.all(marginal > 0)
    assert np.all(np.abs(marginal - marginal.mean()) <= 0.1 * marginal.mean())


def test_quick_bench_report():
    report, summary = run_bench(quick=True)
    assert summary["size_r2"] >= 0.999
    assert summary["bytes_per_edge"] > 0
    assert report.to_csv().splitlines()[0] == "measurement,x,value"
