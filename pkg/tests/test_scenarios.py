import json

import numpy as np
import pytest

from graphtrack import errors, scenarios as sc
from graphtrack.dynamics import generate_dataset
from graphtrack.graph import Graph, laplacian, random_graph

from oracles import central_jacobian

NOISE = sc.noise_pair("gauss", 0.1)


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b)))


def fd_check(fn, jac, rng, n, points=100, scale=1.0, tol=1e-5):
    for _ in range(points):
        x = scale * rng.standard_normal(n)
        assert rel_err(jac(x), central_jacobian(fn, x)) < tol


def test_scenario1_examples_and_jacobian():
    g = random_graph(10, 4, seed=0)
    m = sc.scenario1(g, *NOISE)
    np.testing.assert_allclose(m.f(np.zeros(10)), np.ones(10))
    np.testing.assert_array_equal(m.H(np.zeros(10)), 3 * np.eye(10))
    rng = np.random.default_rng(0)
    fd_check(m.f, m.F, rng, 10)
    fd_check(m.h, m.H, rng, 10)


def test_scenario2_examples_and_jacobian():
    g = random_graph(9, 6, seed=0)
    m = sc.scenario2(g, *NOISE)
    x = np.full(9, -30.0)
    np.testing.assert_allclose(m.f(x), x, atol=1e-12)
    np.testing.assert_array_equal(m.h(np.zeros(9)), np.zeros(9))
    rng = np.random.default_rng(1)
    fd_check(m.f, m.F, rng, 9, scale=3.0)
    fd_check(m.h, m.H, rng, 9)


def test_separable_model_jacobian():
    g = random_graph(8, 3, seed=0)
    m = sc.separable_model(g, *NOISE, amplitude=0.3)
    fd_check(m.f, m.F, np.random.default_rng(2), 8, points=20)


def test_batched_jacobians_match_single():
    m = sc.scenario1(random_graph(6, 2, seed=0), *NOISE)
    X = np.random.default_rng(0).standard_normal((4, 6))
    J = m.F(X)
    for i in range(4):
        np.testing.assert_allclose(J[i], m.F(X[i]))


def dense_injections(case, x):
    d = x[:, None] - x[None, :]
    return np.sum(case.G * np.cos(d) + case.B * np.sin(d), axis=1)


def test_psse_flat_phase_and_b_part_cancels():
    case = sc.ieee14()
    flat = sc.psse_measurement(case, np.full(14, 0.37))
    np.testing.assert_allclose(flat, case.G.sum(1), atol=1e-12)
    x = np.random.default_rng(0).uniform(-0.3, 0.3, 14)
    zero_g = sc.PowerCase.from_matrices(np.zeros((14, 14)), case.B)
    assert abs(sc.psse_measurement(zero_g, x).sum()) < 1e-12


def test_psse_measurement_dense_oracle():
    case = sc.ieee14()
    rng = np.random.default_rng(1)
    for _ in range(20):
        x = rng.uniform(-0.2, 0.2, 14)
        np.testing.assert_allclose(sc.psse_measurement(case, x), dense_injections(case, x), atol=1e-12)
    X = rng.uniform(-0.2, 0.2, (3, 14))
    np.testing.assert_allclose(sc.psse_measurement(case, X)[2], dense_injections(case, X[2]), atol=1e-12)


def test_psse_jacobian_fd_and_sparsity():
    case = sc.ieee14()
    rng = np.random.default_rng(2)
    pattern = case.graph.adjacency != 0
    for _ in range(100):
        x = rng.uniform(-np.pi, np.pi, 14)
        J = sc.psse_jacobian(case, x)
        assert rel_err(J, central_jacobian(lambda z: sc.psse_measurement(case, z), x)) < 1e-6
        off = J.copy()
        np.fill_diagonal(off, 0.0)
        assert np.array_equal(off != 0, pattern)
    J0 = sc.psse_jacobian(case, np.zeros(14))
    i, j = np.nonzero(np.triu(pattern, 1))
    np.testing.assert_allclose(J0[i, j], -case.B[i, j])


def test_psse_dim_mismatch():
    with pytest.raises(errors.DimMismatch):
        sc.psse_measurement(sc.ieee14(), np.zeros(3))
    with pytest.raises(errors.DimMismatch):
        sc.psse_jacobian(sc.ieee14(), np.zeros(3))


def test_psse_models():
    case = sc.ieee14()
    gauss, expo = sc.psse_models(case, NOISE, sc.noise_pair("exp", 2.0))
    np.testing.assert_allclose(gauss.f(np.zeros(14)), np.ones(14))
    np.testing.assert_array_equal(expo.F(np.random.default_rng(0).standard_normal(14)), np.eye(14))
    np.testing.assert_allclose(expo.f(np.zeros(14)), np.full(14, 0.05))
    W = np.abs(case.B)
    a = gauss.params["evolution_gain"]
    np.testing.assert_allclose(gauss.F(np.zeros(14)), -a * (np.eye(14) + W))
    assert a * (1 + np.max(np.abs(np.linalg.eigvalsh(W)))) < 1.0
    rng = np.random.default_rng(3)
    fd_check(gauss.f, gauss.F, rng, 14, points=10)
    unscaled, _ = sc.psse_models(case, NOISE, NOISE, evolution_gain=1.0)
    np.testing.assert_allclose(unscaled.f(np.zeros(14)), np.ones(14))
    np.testing.assert_allclose(unscaled.F(np.zeros(14)), -(np.eye(14) + W))
    # spectral basis comes from the susceptance Laplacian
    L = np.diag(W.sum(1)) - W
    np.testing.assert_allclose(gauss.basis.V @ np.diag(gauss.basis.eigvals) @ gauss.basis.V.T, L, atol=1e-9)


def test_load_power_case_validation(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"n": 3, "lines": [[0, 1, 1.0, -5.0], [1, 2, 0.5, -2.0]]}))
    case = sc.load_power_case(p)
    assert case.n == 3 and case.graph.edge_set() == {(0, 1), (1, 2)}
    p.write_text(json.dumps({"n": 3, "lines": [[0, 0, 1.0, -5.0]]}))
    with pytest.raises(ValueError):
        sc.load_power_case(p)
    p.write_text(json.dumps({"n": 2, "lines": [[0, 1, 1.0, 0.0]]}))
    with pytest.raises(ValueError):
        sc.load_power_case(p)
    with pytest.raises(errors.NonSymmetric):
        sc.PowerCase.from_matrices(np.array([[0, 1.0], [0, 0]]), np.array([[0, 1.0], [1, 0]]))
    assert sc.ieee14().graph.is_connected() and len(sc.ieee14().graph.edges) == 20


def test_mismatch_k0_and_rate():
    g = random_graph(9, 6, seed=0)
    m = sc.scenario2(g, *NOISE)
    assert sc.apply_mismatch(m, sc.MismatchSpec("drop_edges", k=0)) is m
    wrong = sc.apply_mismatch(m, sc.MismatchSpec("evolution_rate", assumed_rate=9.0))
    x = np.random.default_rng(0).standard_normal(9)
    np.testing.assert_allclose(wrong.f(x), x + np.sin(x / 9 + 3))
    np.testing.assert_allclose(m.f(x), x + np.sin(x / 10 + 3))
    with pytest.raises(ValueError):
        sc.apply_mismatch(sc.scenario1(g, *NOISE), sc.MismatchSpec("evolution_rate"))
    with pytest.raises(ValueError):
        sc.apply_mismatch(m, sc.MismatchSpec("bogus"))


def test_drop_one_edge_changes_two_adjacency_and_four_laplacian_entries():
    g = random_graph(10, 4, seed=0)
    m = sc.scenario1(g, *NOISE)
    mm = sc.apply_mismatch(m, sc.MismatchSpec("drop_edges", k=1), seed=3)
    assert np.count_nonzero(mm.graph.adjacency != g.adjacency) == 2
    assert np.count_nonzero(laplacian(mm.graph) != laplacian(g)) == 4
    assert mm.graph.is_connected()
    assert not np.allclose(mm.basis.eigvals, m.basis.eigvals)
    assert len(mm.params["mismatch"]["dropped"]) == 1


def test_drop_edges_psse_zeroes_lines():
    gauss, _ = sc.psse_models(sc.ieee14(), NOISE, NOISE)
    mm = sc.apply_mismatch(gauss, sc.MismatchSpec("drop_edges", k=3), seed=1)
    assert len(mm.graph.edges) == 17 and mm.graph.is_connected()
    assert mm.params["evolution_gain"] == gauss.params["evolution_gain"]
    for i, j in mm.params["mismatch"]["dropped"]:
        assert mm.params["case"]["n"] == 14
        assert all((a, b) != (i, j) for a, b, *_ in mm.params["case"]["lines"])


def test_disconnect_retry_exceeded():
    path = Graph(4, ((0, 1, 1.0), (1, 2, 1.0), (2, 3, 1.0)))
    with pytest.raises(errors.DisconnectRetryExceeded):
        sc.choose_dropped_edges(path, 1, seed=0)
    with pytest.raises(ValueError):
        sc.choose_dropped_edges(path, 3, seed=0)


def test_mismatch_never_touches_data_generation():
    g = random_graph(10, 4, seed=0)
    m = sc.scenario1(g, *NOISE)
    before = generate_dataset(m, 2, 10, seed=0).hash()
    sc.combine_mismatch(m, [sc.MismatchSpec("drop_edges", k=2)], seed=0)
    assert generate_dataset(m, 2, 10, seed=0).hash() == before
    assert m.graph.edge_set() == g.edge_set()


def test_combined_mismatch():
    g = random_graph(9, 6, seed=0)
    m = sc.scenario2(g, *NOISE)
    mm = sc.combine_mismatch(m, [sc.MismatchSpec("drop_edges", k=2), sc.MismatchSpec("evolution_rate", assumed_rate=9.0)], seed=0)
    assert len(mm.graph.edges) == len(g.edges) - 2 and mm.params["rate"] == 9.0
    assert isinstance(mm.params["mismatch"], list)


def test_noise_pair_and_db():
    p, r = sc.noise_pair("gauss", 0.1)
    assert r.variance == pytest.approx(0.1) and p.variance == pytest.approx(0.001)
    p, r = sc.noise_pair("exp", 2.0, ratio_db=-10)
    assert r.kind == "exponential" and p.variance == pytest.approx(0.2)
    assert sc.r2_from_db(10.0) == pytest.approx(0.1)
    with pytest.raises(ValueError):
        sc.noise_pair("cauchy", 1.0)
