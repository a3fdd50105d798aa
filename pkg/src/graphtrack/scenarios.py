"""Concrete systems: synthetic graph dynamics, AC power-flow PSSE, mismatch injection."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from importlib import resources
from typing import Optional, Sequence

import numpy as np

from .dynamics import NoiseProcess, StateSpaceModel
from .errors import DimMismatch, DisconnectRetryExceeded, NonSymmetric
from .graph import Graph, SpectralBasis, basis_of, decompose


def noise_pair(kind: str, level: float, ratio_db: float = -20.0) -> tuple[NoiseProcess, NoiseProcess]:
    """Process/measurement noise at a fixed process-to-measurement ratio.

    ``kind='gauss'``: ``level`` is r^2 and q^2 = r^2 * 10^(ratio_db/10).
    ``kind='exp'``: ``level`` is the exponential rate and q^2 = rate * 10^(ratio_db/10).
    """
    ratio = 10.0 ** (ratio_db / 10.0)
    if kind in ("gauss", "gaussian"):
        return NoiseProcess("gaussian", level * ratio), NoiseProcess("gaussian", level)
    if kind in ("exp", "exponential"):
        return NoiseProcess("gaussian", level * ratio), NoiseProcess("exponential", level)
    raise ValueError(f"unknown noise kind {kind!r}")


def r2_from_db(inv_r2_db: float) -> float:
    """Measurement variance r^2 for a sweep point given as 10 log10(1/r^2)."""
    return 10.0 ** (-inv_r2_db / 10.0)


def _eye_like(x, n):
    return np.broadcast_to(np.eye(n), np.shape(x)[:-1] + (n, n)).copy()


def scenario1(graph: Graph, process_noise: NoiseProcess, meas_noise: NoiseProcess, basis: Optional[SpectralBasis] = None) -> StateSpaceModel:
    """f(x) = sin(x) + cos(x + A x), h(x) = 3 x on an unweighted graph."""
    A = graph.adjacency
    n = graph.n
    IA = np.eye(n) + A

    def f(x):
        return np.sin(x) + np.cos(x @ IA)

    def jac_f(x):
        return np.cos(x)[..., :, None] * np.eye(n) - np.sin(x @ IA)[..., :, None] * IA

    def h(x):
        return 3.0 * x

    def jac_h(x):
        return 3.0 * _eye_like(x, n)

    def freq_jac_h(x):
        # V^T (3 I) V = 3 I
        return np.full(np.shape(x), 3.0)

    return StateSpaceModel(
        basis=basis or basis_of(graph), f=f, h=h, jac_f=jac_f, jac_h=jac_h,
        freq_jac_h=freq_jac_h, process_noise=process_noise, meas_noise=meas_noise,
        graph=graph, name="scenario1", params={},
    )


def scenario2(
    graph: Graph,
    process_noise: NoiseProcess,
    meas_noise: NoiseProcess,
    rate: float = 10.0,
    basis: Optional[SpectralBasis] = None,
) -> StateSpaceModel:
    """f(x) = x + sin(x/rate + 3), h(x) = 0.5 V x + 0.5 (V x)^3 (elementwise cube)."""
    basis = basis or basis_of(graph)
    V = basis.V
    n = graph.n

    def f(x):
        return x + np.sin(x / rate + 3.0)

    def jac_f(x):
        return np.eye(n) + (np.cos(x / rate + 3.0) / rate)[..., :, None] * np.eye(n)

    def h(x):
        u = x @ V.T
        return 0.5 * u + 0.5 * u**3

    def jac_h(x):
        u = x @ V.T
        return (0.5 + 1.5 * u**2)[..., :, None] * V

    return StateSpaceModel(
        basis=basis, f=f, h=h, jac_f=jac_f, jac_h=jac_h,
        process_noise=process_noise, meas_noise=meas_noise,
        graph=graph, name="scenario2", params={"rate": rate},
    )


def separable_model(
    graph: Graph,
    process_noise: NoiseProcess,
    meas_noise: NoiseProcess,
    response: Optional[Sequence[float]] = None,
    amplitude: float = 0.0,
    h_gain: float = 3.0,
    basis: Optional[SpectralBasis] = None,
) -> StateSpaceModel:
    """Model separable in the graph-frequency domain.

    ``f(x) = V (g * x~ + amplitude * sin(x~))`` with ``x~ = V^T x`` and
    ``h(x) = h_gain * x``. With ``amplitude = 0`` the evolution is the graph
    filter ``g(L)``. Default response ``g(lambda) = 0.9 exp(-0.1 lambda)``.
    """
    basis = basis or basis_of(graph)
    V = basis.V
    n = graph.n
    g = 0.9 * np.exp(-0.1 * basis.eigvals) if response is None else np.asarray(response, float)

    def f(x):
        xf = x @ V
        return (g * xf + amplitude * np.sin(xf)) @ V.T

    def freq_jac_f(x):
        return g + amplitude * np.cos(x @ V)

    def jac_f(x):
        return (V * freq_jac_f(x)[..., None, :]) @ V.T

    def h(x):
        return h_gain * x

    def jac_h(x):
        return h_gain * _eye_like(x, n)

    def freq_jac_h(x):
        return np.full(np.shape(x), float(h_gain))

    return StateSpaceModel(
        basis=basis, f=f, h=h, jac_f=jac_f, jac_h=jac_h,
        freq_jac_f=freq_jac_f, freq_jac_h=freq_jac_h,
        process_noise=process_noise, meas_noise=meas_noise, graph=graph,
        name="separable", params={"response": g.tolist(), "amplitude": amplitude, "h_gain": h_gain},
    )


@dataclass(frozen=True, eq=False)
class PowerCase:
    """Bus conductance/susceptance matrices (line entries only, zero diagonal)."""

    G: np.ndarray
    B: np.ndarray
    graph: Graph
    bus_labels: tuple = ()

    @property
    def n(self) -> int:
        return self.G.shape[0]

    def edge_arrays(self):
        i, j = np.nonzero(np.triu((self.G != 0) | (self.B != 0), 1))
        return i, j, self.G[i, j], self.B[i, j]

    @classmethod
    def from_lines(cls, n: int, lines, bus_labels=()) -> "PowerCase":
        G, B = np.zeros((n, n)), np.zeros((n, n))
        for i, j, g, b in lines:
            i, j = int(i), int(j)
            if i == j or not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"invalid line ({i}, {j})")
            G[i, j] = G[j, i] = float(g)
            B[i, j] = B[j, i] = float(b)
        return cls.from_matrices(G, B, bus_labels)

    @classmethod
    def from_matrices(cls, G, B, bus_labels=()) -> "PowerCase":
        G, B = np.asarray(G, float), np.asarray(B, float)
        if G.shape != B.shape or G.ndim != 2 or G.shape[0] != G.shape[1]:
            raise DimMismatch("G and B must be equal square matrices")
        if not (np.allclose(G, G.T, atol=0) and np.allclose(B, B.T, atol=0)):
            raise NonSymmetric("G and B must be symmetric")
        if np.any(np.diag(G)) or np.any(np.diag(B)):
            raise ValueError("diagonal entries of G and B must be zero")
        graph = Graph.from_adjacency(np.abs(B))
        pattern = (G != 0) | (B != 0)
        if not np.array_equal(pattern, graph.adjacency != 0):
            raise ValueError("every line needs a nonzero susceptance")
        return cls(G, B, graph, tuple(bus_labels))

    def without_lines(self, drop) -> "PowerCase":
        G, B = self.G.copy(), self.B.copy()
        for i, j in drop:
            G[i, j] = G[j, i] = B[i, j] = B[j, i] = 0.0
        return PowerCase.from_matrices(G, B, self.bus_labels)

    def to_json(self) -> dict:
        i, j, g, b = self.edge_arrays()
        return {"n": self.n, "lines": [[int(a), int(c), float(d), float(e)] for a, c, d, e in zip(i, j, g, b)]}


def load_power_case(path) -> PowerCase:
    with open(path) as fh:
        obj = json.load(fh)
    return PowerCase.from_lines(int(obj["n"]), obj["lines"], obj.get("bus_labels", ()))


def ieee14() -> PowerCase:
    """Bundled IEEE 14-bus case (series line admittances only)."""
    with resources.files("graphtrack.data").joinpath("ieee14.json").open() as fh:
        obj = json.load(fh)
    return PowerCase.from_lines(int(obj["n"]), obj["lines"], obj.get("bus_labels", ()))


def psse_measurement(case: PowerCase, x) -> np.ndarray:
    """Active power injections ``sum_j G_ij cos(x_i - x_j) + B_ij sin(x_i - x_j)``."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != case.n:
        raise DimMismatch(f"phase vector has {x.shape[-1]} entries, case has {case.n} buses")
    i, j, g, b = case.edge_arrays()
    d = x[..., i] - x[..., j]
    c, s = np.cos(d), np.sin(d)
    out = np.zeros(x.shape)
    # scatter each line's two contributions
    np.add.at(np.moveaxis(out, -1, 0), i, np.moveaxis(g * c + b * s, -1, 0))
    np.add.at(np.moveaxis(out, -1, 0), j, np.moveaxis(g * c - b * s, -1, 0))
    return out


def psse_jacobian(case: PowerCase, x) -> np.ndarray:
    """Analytic Jacobian of :func:`psse_measurement`; zero outside the line pattern."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != case.n:
        raise DimMismatch(f"phase vector has {x.shape[-1]} entries, case has {case.n} buses")
    i, j, g, b = case.edge_arrays()
    d = x[..., i] - x[..., j]
    c, s = np.cos(d), np.sin(d)
    n = case.n
    J = np.zeros(x.shape + (n,))
    J[..., i, j] = g * s - b * c
    J[..., j, i] = -g * s - b * c
    diag = np.zeros(x.shape)
    np.add.at(np.moveaxis(diag, -1, 0), i, np.moveaxis(-g * s + b * c, -1, 0))
    np.add.at(np.moveaxis(diag, -1, 0), j, np.moveaxis(g * s + b * c, -1, 0))
    idx = np.arange(n)
    J[..., idx, idx] = diag
    return J


def psse_models(case: PowerCase, gauss_noise, exp_noise, evolution_gain: Optional[float] = None):
    """The two PSSE systems sharing the AC power-flow measurement.

    Gaussian case: ``f(x) = 1 - a (x + W x)`` with W the susceptance weights and
    ``a = 0.98 / (1 + rho(W))`` keeping the recursion stable (``a = 1`` diverges
    for any nonnegative W). Exponential case: ``f(x) = x + 0.05``.
    ``gauss_noise``/``exp_noise`` are ``(process, measurement)`` pairs.
    """
    n = case.n
    W = np.abs(case.B)
    basis = decompose(np.diag(W.sum(1)) - W)
    if evolution_gain is None:
        evolution_gain = 0.98 / (1.0 + float(np.max(np.abs(np.linalg.eigvalsh(W)))))
    a = float(evolution_gain)
    M = a * (np.eye(n) + W)

    def h(x):
        return psse_measurement(case, x)

    def jac_h(x):
        return psse_jacobian(case, x)

    def f_gauss(x):
        return 1.0 - x @ M

    def jac_gauss(x):
        return -np.broadcast_to(M, np.shape(x)[:-1] + (n, n)).copy()

    def f_exp(x):
        return x + 0.05

    def jac_exp(x):
        return _eye_like(x, n)

    common = dict(basis=basis, h=h, jac_h=jac_h, graph=case.graph)
    gauss = StateSpaceModel(
        f=f_gauss, jac_f=jac_gauss, process_noise=gauss_noise[0], meas_noise=gauss_noise[1],
        name="psse-gauss", params={"evolution_gain": a, "case": case.to_json()}, **common,
    )
    expo = StateSpaceModel(
        f=f_exp, jac_f=jac_exp, process_noise=exp_noise[0], meas_noise=exp_noise[1],
        name="psse-exp", params={"case": case.to_json()}, **common,
    )
    return gauss, expo


@dataclass(frozen=True)
class MismatchSpec:
    """Filter-side model error.

    ``kind='drop_edges'`` removes ``k`` random edges (graph stays connected);
    ``kind='evolution_rate'`` swaps scenario-2's rate for ``assumed_rate``.
    """

    kind: str
    k: int = 0
    true_rate: float = 10.0
    assumed_rate: float = 9.0

    def to_json(self) -> dict:
        return {"kind": self.kind, "k": self.k, "true_rate": self.true_rate, "assumed_rate": self.assumed_rate}


def choose_dropped_edges(graph: Graph, k: int, seed: int, max_tries: int = 1000):
    if not 0 <= k < len(graph.edges):
        raise ValueError(f"cannot drop {k} of {len(graph.edges)} edges")
    if k == 0:
        return []
    rng = np.random.default_rng(seed)
    edges = [(i, j) for i, j, _ in graph.edges]
    for _ in range(max_tries):
        pick = rng.choice(len(edges), size=k, replace=False)
        drop = [edges[p] for p in sorted(pick)]
        if graph.without_edges(drop).is_connected():
            return drop
    raise DisconnectRetryExceeded(f"no connected graph after dropping {k} edges in {max_tries} draws")


def apply_mismatch(model: StateSpaceModel, spec: MismatchSpec, seed: int = 0) -> StateSpaceModel:
    """Filter-side copy of ``model`` with the mismatch applied; ``model`` is not touched."""
    noise = (model.process_noise, model.meas_noise)
    if spec.kind == "drop_edges":
        if spec.k == 0:
            return model
        if model.name in ("psse-gauss", "psse-exp"):
            case = PowerCase.from_lines(model.params["case"]["n"], model.params["case"]["lines"])
            drop = choose_dropped_edges(case.graph, spec.k, seed)
            new_case = case.without_lines(drop)
            gauss, expo = psse_models(
                new_case, noise, noise,
                evolution_gain=model.params.get("evolution_gain"),
            )
            out = gauss if model.name == "psse-gauss" else expo
        else:
            drop = choose_dropped_edges(model.graph, spec.k, seed)
            g = model.graph.without_edges(drop)
            out = _rebuild(model, g)
        return replace(out, params={**out.params, "mismatch": {**spec.to_json(), "dropped": [list(e) for e in drop], "seed": seed}})
    if spec.kind == "evolution_rate":
        if model.name != "scenario2":
            raise ValueError("rate mismatch is defined for scenario2 only")
        out = scenario2(model.graph, *noise, rate=spec.assumed_rate, basis=model.basis)
        return replace(out, params={**out.params, "mismatch": spec.to_json()})
    raise ValueError(f"unknown mismatch kind {spec.kind!r}")


def _rebuild(model: StateSpaceModel, graph: Graph) -> StateSpaceModel:
    noise = (model.process_noise, model.meas_noise)
    if model.name == "scenario1":
        return scenario1(graph, *noise)
    if model.name == "scenario2":
        return scenario2(graph, *noise, rate=model.params.get("rate", 10.0))
    if model.name == "separable":
        p = model.params
        return separable_model(graph, *noise, amplitude=p["amplitude"], h_gain=p["h_gain"])
    raise ValueError(f"cannot rebuild model {model.name!r} on a new graph")


def combine_mismatch(model: StateSpaceModel, specs: Sequence[MismatchSpec], seed: int = 0) -> StateSpaceModel:
    """Apply several mismatches in order (e.g. dropped edges then a wrong rate)."""
    out = model
    for spec in specs:
        if spec.kind == "evolution_rate" and out.name == "scenario2":
            prev = out.params.get("mismatch")
            out = scenario2(out.graph, out.process_noise, out.meas_noise, rate=spec.assumed_rate, basis=out.basis)
            out = replace(out, params={**out.params, "mismatch": [prev, spec.to_json()] if prev else spec.to_json()})
        else:
            out = apply_mismatch(out, spec, seed)
    return out
