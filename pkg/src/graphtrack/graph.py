"""Graphs, Laplacian spectra and graph-frequency filtering.

A graph signal is a length-N vector indexed by nodes. The graph Fourier
transform projects it on the eigenvectors of the combinatorial Laplacian
``L = diag(W 1) - W``; a frequency-domain graph filter scales each graph
frequency independently.

Batched signals are supported everywhere: the node axis is always the last
one, so ``gft(basis, z)`` accepts shapes ``(N,)``, ``(T, N)``, ``(B, T, N)``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import networkx as nx
import numpy as np

from .errors import (
    ConnectivityRetryExceeded,
    DimMismatch,
    EigFailure,
    InfeasibleDegree,
    NonSymmetric,
)

TIE_RTOL = 1e-9


@dataclass(frozen=True)
class Graph:
    """Undirected graph with nonnegative edge weights.

    ``edges`` holds ``(i, j, w)`` triples with ``i < j``; each undirected edge
    appears once.
    """

    n_nodes: int
    edges: tuple[tuple[int, int, float], ...] = ()

    def __post_init__(self):
        if self.n_nodes < 1:
            raise ValueError("graph needs at least one node")
        canon = {}
        for i, j, w in self.edges:
            i, j, w = int(i), int(j), float(w)
            if i == j:
                raise ValueError(f"self-loop at node {i}")
            if not (0 <= i < self.n_nodes and 0 <= j < self.n_nodes):
                raise ValueError(f"edge ({i}, {j}) out of range")
            if w < 0 or not np.isfinite(w):
                raise ValueError(f"edge ({i}, {j}) has invalid weight {w}")
            key = (min(i, j), max(i, j))
            if key in canon and canon[key] != w:
                raise ValueError(f"edge {key} listed twice with different weights")
            canon[key] = w
        object.__setattr__(
            self, "edges", tuple((i, j, w) for (i, j), w in sorted(canon.items()))
        )

    @property
    def n(self) -> int:
        return self.n_nodes

    @property
    def adjacency(self) -> np.ndarray:
        W = np.zeros((self.n_nodes, self.n_nodes))
        for i, j, w in self.edges:
            W[i, j] = W[j, i] = w
        return W

    def edge_set(self) -> set[tuple[int, int]]:
        return {(i, j) for i, j, _ in self.edges}

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n_nodes, dtype=int)
        for i, j, _ in self.edges:
            deg[i] += 1
            deg[j] += 1
        return deg

    def is_connected(self) -> bool:
        return nx.is_connected(self.to_networkx())

    def to_networkx(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(range(self.n_nodes))
        g.add_weighted_edges_from(self.edges)
        return g

    def without_edges(self, drop) -> "Graph":
        drop = {(min(i, j), max(i, j)) for i, j in drop}
        return Graph(self.n_nodes, tuple(e for e in self.edges if (e[0], e[1]) not in drop))

    def to_json(self) -> dict:
        return {"n": self.n_nodes, "edges": [[i, j, w] for i, j, w in self.edges]}

    @classmethod
    def from_json(cls, obj: dict) -> "Graph":
        return cls(int(obj["n"]), tuple((e[0], e[1], e[2] if len(e) > 2 else 1.0) for e in obj["edges"]))

    @classmethod
    def from_adjacency(cls, W: np.ndarray) -> "Graph":
        W = np.asarray(W, dtype=float)
        if W.ndim != 2 or W.shape[0] != W.shape[1]:
            raise DimMismatch(f"adjacency must be square, got {W.shape}")
        if not np.allclose(W, W.T, rtol=0, atol=1e-12):
            raise NonSymmetric("adjacency matrix is not symmetric")
        iu, ju = np.nonzero(np.triu(W, 1))
        return cls(W.shape[0], tuple((int(i), int(j), float(W[i, j])) for i, j in zip(iu, ju)))

    def hash(self) -> str:
        payload = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def load_graph(path) -> Graph:
    with open(path) as fh:
        return Graph.from_json(json.load(fh))


def save_graph(graph: Graph, path) -> None:
    Path(path).write_text(json.dumps(graph.to_json(), indent=1) + "\n")


def laplacian(graph: Graph) -> np.ndarray:
    W = graph.adjacency
    return np.diag(W.sum(axis=1)) - W


@dataclass(frozen=True, eq=False)
class SpectralBasis:
    laplacian: np.ndarray
    eigvecs: np.ndarray
    eigvals: np.ndarray
    _groups: tuple = field(default=(), repr=False)

    @property
    def V(self) -> np.ndarray:
        return self.eigvecs

    @property
    def n(self) -> int:
        return self.eigvals.shape[0]

    def tie_groups(self) -> tuple[np.ndarray, ...]:
        """Index groups of (numerically) repeated eigenvalues, in order."""
        return self._groups

    @classmethod
    def identity(cls, n: int) -> "SpectralBasis":
        """Trivial basis V = I with distinct eigenvalues 0..n-1.

        The frequency domain then coincides with the vertex domain.
        """
        lam = np.arange(n, dtype=float)
        return cls(np.diag(lam), np.eye(n), lam, _tie_groups(lam))


def _tie_groups(eigvals: np.ndarray, rtol: float = TIE_RTOL) -> tuple[np.ndarray, ...]:
    if eigvals.size == 0:
        return ()
    tol = rtol * max(np.max(np.abs(eigvals)), 1.0)
    groups, start = [], 0
    for k in range(1, eigvals.size + 1):
        if k == eigvals.size or eigvals[k] - eigvals[k - 1] > tol:
            groups.append(np.arange(start, k))
            start = k
    return tuple(groups)


def _fix_signs(V: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    V = V.copy()
    for k in range(V.shape[1]):
        col = V[:, k]
        nz = np.flatnonzero(np.abs(col) > tol)
        if nz.size and col[nz[0]] < 0:
            V[:, k] = -col
    return V


def decompose(L: np.ndarray) -> SpectralBasis:
    """Symmetric eigendecomposition with ascending eigenvalues and fixed signs."""
    L = np.asarray(L, dtype=float)
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise DimMismatch(f"Laplacian must be square, got {L.shape}")
    scale = max(np.linalg.norm(L), 1.0)
    if np.linalg.norm(L - L.T) > 1e-8 * scale:
        raise NonSymmetric("matrix is not symmetric")
    L = 0.5 * (L + L.T)
    try:
        lam, V = np.linalg.eigh(L)
    except np.linalg.LinAlgError as exc:
        raise EigFailure(str(exc)) from exc
    order = np.argsort(lam, kind="stable")
    lam, V = lam[order], _fix_signs(V[:, order])
    return SpectralBasis(L, V, lam, _tie_groups(lam))


def basis_of(graph: Graph) -> SpectralBasis:
    return decompose(laplacian(graph))


def _check_last(basis: SpectralBasis, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.shape[-1:] != (basis.n,):
        raise DimMismatch(f"signal has last dimension {z.shape[-1:] }, expected {basis.n}")
    return z


def gft(basis: SpectralBasis, z) -> np.ndarray:
    """Graph Fourier transform ``V^T z`` along the last axis."""
    return _check_last(basis, z) @ basis.V


def igft(basis: SpectralBasis, zf) -> np.ndarray:
    """Inverse transform ``V zf`` along the last axis."""
    return _check_last(basis, zf) @ basis.V.T


@dataclass(frozen=True, eq=False)
class FrequencyFilter:
    """Per-frequency response ``g(lambda_n)``."""

    response: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "response", np.asarray(self.response, dtype=float))

    @classmethod
    def from_function(cls, basis: SpectralBasis, g) -> "FrequencyFilter":
        return cls(np.array([g(lam) for lam in basis.eigvals], dtype=float))

    def respects_ties(self, basis: SpectralBasis, atol: float = 1e-12) -> bool:
        return all(np.ptp(self.response[grp]) <= atol for grp in basis.tie_groups())

    def tied(self, basis: SpectralBasis) -> "FrequencyFilter":
        """Copy with the response averaged inside each repeated-eigenvalue group."""
        out = self.response.copy()
        for grp in basis.tie_groups():
            out[grp] = out[grp].mean()
        return FrequencyFilter(out)


def apply_frequency_filter(filt: FrequencyFilter, xf) -> np.ndarray:
    xf = np.asarray(xf, dtype=float)
    if xf.shape[-1:] != filt.response.shape:
        raise DimMismatch(f"filter has {filt.response.shape[0]} taps, signal {xf.shape}")
    return filt.response * xf


def filter_matrix(basis: SpectralBasis, filt: FrequencyFilter) -> np.ndarray:
    """Dense vertex-domain operator ``V g(Lambda) V^T``."""
    if filt.response.shape != (basis.n,):
        raise DimMismatch("filter length does not match basis")
    return (basis.V * filt.response) @ basis.V.T


def random_graph(n: int, degree: int, seed: int, max_tries: int = 1000) -> Graph:
    """Connected, unweighted, ``degree``-regular graph on ``n`` nodes."""
    if degree < 0 or degree >= n or (n * degree) % 2:
        raise InfeasibleDegree(f"no {degree}-regular graph on {n} nodes")
    if n == 1:
        return Graph(1)
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        g = nx.random_regular_graph(degree, n, seed=int(rng.integers(2**31 - 1)))
        if nx.is_connected(g):
            return Graph(n, tuple((min(i, j), max(i, j), 1.0) for i, j in g.edges()))
    raise ConnectivityRetryExceeded(f"no connected {degree}-regular graph on {n} nodes after {max_tries} draws")
