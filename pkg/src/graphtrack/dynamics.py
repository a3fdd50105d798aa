"""State-space models over graphs, simulation and dataset persistence.

Models are time invariant: ``x_t = f(x_{t-1}) + e_t``, ``y_t = h(x_t) + v_t``.
``f``, ``h`` and their Jacobians broadcast over leading batch axes; the node
axis is last and Jacobians are ``(..., N, N)`` with ``J[..., i, j] = d out_i / d x_j``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import ChecksumMismatch, FormatVersionMismatch, NonFiniteState
from .graph import Graph, SpectralBasis

FORMAT_VERSION = 1
_MAGIC = b"GTDS"


@dataclass(frozen=True, eq=False)
class NoiseProcess:
    """I.i.d. additive noise.

    ``gaussian``: per-coordinate variance ``scale`` (or full covariance ``cov``).
    ``exponential``: rate ``scale``; draws are shifted by ``-1/scale`` when
    ``centered`` so the process is zero mean.
    """

    kind: str = "gaussian"
    scale: float = 1.0
    centered: bool = True
    cov: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("gaussian", "exponential"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.kind == "exponential" and not self.scale > 0:
            raise ValueError("exponential rate must be positive")
        if self.scale < 0:
            raise ValueError("noise scale must be nonnegative")
        if self.cov is not None:
            if self.kind != "gaussian":
                raise ValueError("full covariance only supported for gaussian noise")
            object.__setattr__(self, "cov", np.asarray(self.cov, dtype=float))

    @property
    def mean(self) -> float:
        if self.kind == "exponential" and not self.centered:
            return 1.0 / self.scale
        return 0.0

    @property
    def variance(self) -> float:
        if self.kind == "exponential":
            return 1.0 / self.scale**2
        return self.scale

    def covariance(self, n: int) -> np.ndarray:
        if self.cov is not None:
            return self.cov.copy()
        return self.variance * np.eye(n)

    def sample(self, rng: np.random.Generator, shape) -> np.ndarray:
        shape = tuple(shape)
        if self.kind == "exponential":
            draw = rng.exponential(1.0 / self.scale, size=shape)
            return draw - 1.0 / self.scale if self.centered else draw
        if self.cov is not None:
            w, U = np.linalg.eigh(self.cov)
            root = U * np.sqrt(np.clip(w, 0.0, None))
            return rng.standard_normal(shape) @ root.T
        if self.scale == 0:
            return np.zeros(shape)
        return np.sqrt(self.scale) * rng.standard_normal(shape)

    def to_json(self) -> dict:
        out = {"kind": self.kind, "scale": self.scale, "centered": self.centered}
        if self.cov is not None:
            out["cov"] = self.cov.tolist()
        return out


def numerical_jacobian(fn: Callable, x, eps: Optional[float] = None) -> np.ndarray:
    """Central-difference Jacobian of ``fn`` at ``x`` (batched over leading axes)."""
    x = np.asarray(x, dtype=float)
    if eps is None:
        eps = 1e-6 * max(1.0, float(np.max(np.abs(x))) if x.size else 1.0)
    if not eps > 0:
        raise ValueError("eps must be positive")
    n = x.shape[-1]
    cols = []
    for j in range(n):
        step = np.zeros(n)
        step[j] = eps
        cols.append((np.asarray(fn(x + step)) - np.asarray(fn(x - step))) / (2 * eps))
    J = np.stack(cols, axis=-1)
    if not np.all(np.isfinite(J)):
        raise NonFiniteState("numerical Jacobian is not finite")
    return J


@dataclass(frozen=True, eq=False)
class StateSpaceModel:
    """Nonlinear Gaussian-or-not state-space model on a graph.

    ``freq_jac_f`` / ``freq_jac_h`` are optional structure hints: when given
    they return the *diagonal* of the graph-frequency Jacobian as a vector
    (shape ``(..., N)``), which the GSP filters use to skip dense products.
    """

    basis: SpectralBasis
    f: Callable
    h: Callable
    process_noise: NoiseProcess
    meas_noise: NoiseProcess
    jac_f: Optional[Callable] = None
    jac_h: Optional[Callable] = None
    freq_jac_f: Optional[Callable] = None
    freq_jac_h: Optional[Callable] = None
    x0: Optional[np.ndarray] = None
    graph: Optional[Graph] = None
    name: str = "custom"
    params: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.basis.n

    @property
    def initial_state(self) -> np.ndarray:
        return np.zeros(self.n) if self.x0 is None else np.asarray(self.x0, dtype=float)

    @property
    def Q(self) -> np.ndarray:
        return self.process_noise.covariance(self.n)

    @property
    def R(self) -> np.ndarray:
        return self.meas_noise.covariance(self.n)

    def F(self, x) -> np.ndarray:
        if self.jac_f is not None:
            return np.asarray(self.jac_f(x), dtype=float)
        return numerical_jacobian(self.f, x)

    def H(self, x) -> np.ndarray:
        if self.jac_h is not None:
            return np.asarray(self.jac_h(x), dtype=float)
        return numerical_jacobian(self.h, x)

    def with_noise(self, process: Optional[NoiseProcess] = None, meas: Optional[NoiseProcess] = None):
        return replace(
            self,
            process_noise=process or self.process_noise,
            meas_noise=meas or self.meas_noise,
        )

    def describe(self) -> dict:
        return {
            "name": self.name,
            "params": self.params,
            "n": self.n,
            "graph_hash": self.graph.hash() if self.graph is not None else None,
            "process_noise": self.process_noise.to_json(),
            "meas_noise": self.meas_noise.to_json(),
        }


@dataclass(frozen=True, eq=False)
class Trajectory:
    states: np.ndarray
    observations: np.ndarray
    x0: np.ndarray
    seed: int


def _streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    ss_e, ss_v = np.random.SeedSequence(int(seed)).spawn(2)
    return np.random.default_rng(ss_e), np.random.default_rng(ss_v)


def simulate_trajectory(model: StateSpaceModel, x0, T: int, seed: int) -> Trajectory:
    if T < 1:
        raise ValueError("T must be at least 1")
    x0 = model.initial_state if x0 is None else np.asarray(x0, dtype=float)
    n = model.n
    rng_e, rng_v = _streams(seed)
    e = model.process_noise.sample(rng_e, (T, n))
    v = model.meas_noise.sample(rng_v, (T, n))
    states = np.empty((T, n))
    x = x0
    for t in range(T):
        x = np.asarray(model.f(x)) + e[t]
        states[t] = x
    obs = np.asarray(model.h(states)) + v
    if not (np.all(np.isfinite(states)) and np.all(np.isfinite(obs))):
        bad = np.flatnonzero(~(np.isfinite(states).all(1) & np.isfinite(obs).all(1)))[0]
        raise NonFiniteState("simulation diverged", t=int(bad) + 1)
    return Trajectory(states, obs, x0.copy(), int(seed))


def trajectory_seed(seed: int, d: int) -> int:
    """Per-trajectory seed derived from the dataset seed and the index."""
    words = np.random.SeedSequence([int(seed), int(d)]).generate_state(2, dtype=np.uint32)
    return int(words[0]) << 32 | int(words[1])


@dataclass(eq=False)
class Dataset:
    """``D`` trajectories stored as stacked ``(D, T, N)`` arrays."""

    states: np.ndarray
    observations: np.ndarray
    x0: np.ndarray
    seeds: list[int]
    metadata: dict = field(default_factory=dict)

    @property
    def D(self) -> int:
        return self.states.shape[0]

    @property
    def T(self) -> int:
        return self.states.shape[1]

    @property
    def n(self) -> int:
        return self.states.shape[2]

    def __len__(self) -> int:
        return self.D

    def trajectory(self, d: int) -> Trajectory:
        return Trajectory(self.states[d], self.observations[d], self.x0[d], self.seeds[d])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        meta = dict(self.metadata)
        meta["parent_hash"] = self.hash()
        return Dataset(
            self.states[idx], self.observations[idx], self.x0[idx],
            [self.seeds[i] for i in idx], meta,
        )

    def hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.x0, self.states, self.observations):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        h.update(json.dumps(self.seeds).encode())
        return h.hexdigest()[:16]


def generate_dataset(model: StateSpaceModel, D: int, T: int, seed: int, x0=None, scenario: Optional[str] = None) -> Dataset:
    if D < 1:
        raise ValueError("D must be at least 1")
    x0 = model.initial_state if x0 is None else np.asarray(x0, dtype=float)
    seeds = [trajectory_seed(seed, d) for d in range(D)]
    trajs = []
    for d, s in enumerate(seeds):
        try:
            trajs.append(simulate_trajectory(model, x0, T, s))
        except NonFiniteState as exc:
            raise NonFiniteState("simulation diverged", t=exc.t, index=d) from exc
    meta = {
        "scenario": scenario or model.name,
        "model": model.describe(),
        "generation_seed": int(seed),
        "D": D,
        "T": T,
        "x0": x0.tolist(),
    }
    return Dataset(
        np.stack([tr.states for tr in trajs]),
        np.stack([tr.observations for tr in trajs]),
        np.tile(x0, (D, 1)),
        seeds,
        meta,
    )


def save_dataset(dataset: Dataset, path) -> None:
    """Binary layout: magic, u32 header length, JSON header, f8 payload, u32 CRC32."""
    D, T, N = dataset.states.shape
    header = json.dumps(
        {
            "version": FORMAT_VERSION,
            "dims": [D, T, N],
            "dtype": "<f8",
            "seeds": [str(s) for s in dataset.seeds],
            "metadata": dataset.metadata,
        },
        sort_keys=True,
    ).encode()
    body = b"".join(
        np.ascontiguousarray(a, dtype="<f8").tobytes()
        for a in (dataset.x0, dataset.states, dataset.observations)
    )
    blob = _MAGIC + struct.pack("<I", len(header)) + header + body
    Path(path).write_bytes(blob + struct.pack("<I", zlib.crc32(blob)))


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != _MAGIC:
        raise FormatVersionMismatch(f"{path} is not a graphtrack dataset")
    blob, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(blob) != crc:
        raise ChecksumMismatch(f"{path}: CRC32 mismatch")
    (hlen,) = struct.unpack("<I", blob[4:8])
    header = json.loads(blob[8 : 8 + hlen])
    if header.get("version") != FORMAT_VERSION:
        raise FormatVersionMismatch(f"dataset version {header.get('version')} != {FORMAT_VERSION}")
    D, T, N = header["dims"]
    payload = np.frombuffer(blob[8 + hlen :], dtype="<f8").astype(float)
    x0 = payload[: D * N].reshape(D, N)
    states = payload[D * N : D * N + D * T * N].reshape(D, T, N)
    obs = payload[D * N + D * T * N :].reshape(D, T, N)
    return Dataset(states, obs, x0, [int(s) for s in header["seeds"]], header["metadata"])


def export_csv(dataset: Dataset, directory) -> list[Path]:
    """One CSV per trajectory with columns t, x_1..x_N, y_1..y_N."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    N = dataset.n
    cols = ["t"] + [f"x_{i + 1}" for i in range(N)] + [f"y_{i + 1}" for i in range(N)]
    paths = []
    for d in range(dataset.D):
        p = directory / f"trajectory_{d:05d}.csv"
        with p.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for t in range(dataset.T):
                w.writerow([t + 1, *(repr(float(v)) for v in dataset.states[d, t]), *(repr(float(v)) for v in dataset.observations[d, t])])
        paths.append(p)
    return paths
