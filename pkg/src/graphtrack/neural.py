"""GRU gain network producing a diagonal graph-frequency Kalman gain.

Architecture for N nodes (multipliers configurable):

    input 3N -> FC+ReLU 24N -> GRU 20N -> GRU 20N -> FC+ReLU 4N -> FC N

GRU convention::

    z  = sigmoid(Wx_z u + Wh_z h + b_z)
    r  = sigmoid(Wx_r u + Wh_r h + b_r)
    n  = tanh(Wx_n u + r * (Wh_n h + b_n))
    h' = (1 - z) * n + z * h

Forward passes can record a cache per step; :meth:`GainNetwork.step_backward`
turns output/hidden adjoints into parameter gradients, which is all the
filter-level backpropagation-through-time needs.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ChecksumMismatch, DimMismatch, FormatVersionMismatch

CHECKPOINT_VERSION = 1
_MAGIC = b"GTCK"


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def gru_cell(x, h, Wx, Wh, b):
    """Single GRU update; ``Wx`` is ``(3H, I)``, ``Wh`` ``(3H, H)``, ``b`` ``(3H,)``."""
    x, h = np.asarray(x, float), np.asarray(h, float)
    H = h.shape[-1]
    if Wx.shape != (3 * H, x.shape[-1]) or Wh.shape != (3 * H, H) or b.shape != (3 * H,):
        raise DimMismatch("GRU parameter shapes do not match input/hidden sizes")
    return _gru_forward(x, h, Wx, Wh, b)[0]


def _gru_forward(x, h, Wx, Wh, b):
    H = h.shape[-1]
    gx = x @ Wx.T
    gh = h @ Wh.T
    z = sigmoid(gx[..., :H] + gh[..., :H] + b[:H])
    r = sigmoid(gx[..., H : 2 * H] + gh[..., H : 2 * H] + b[H : 2 * H])
    c = gh[..., 2 * H :] + b[2 * H :]
    n = np.tanh(gx[..., 2 * H :] + r * c)
    h_new = (1.0 - z) * n + z * h
    return h_new, (x, h, z, r, c, n)


def _gru_backward(dh_new, cache, Wx, Wh, grads, prefix):
    x, h, z, r, c, n = cache
    dn = dh_new * (1.0 - z)
    dz = dh_new * (h - n)
    dpre_n = dn * (1.0 - n * n)
    dc = dpre_n * r
    dr = dpre_n * c
    dpre_z = dz * z * (1.0 - z)
    dpre_r = dr * r * (1.0 - r)
    dgx = np.concatenate([dpre_z, dpre_r, dpre_n], axis=-1)
    dgh = np.concatenate([dpre_z, dpre_r, dc], axis=-1)
    grads[prefix + "Wx"] += dgx.T @ x
    grads[prefix + "Wh"] += dgh.T @ h
    grads[prefix + "b"] += dgh.sum(axis=0)
    dx = dgx @ Wx
    dh = dh_new * z + dgh @ Wh
    return dx, dh


@dataclass(frozen=True)
class NetShape:
    n: int
    in_mult: int = 3
    fc1_mult: int = 24
    gru_mult: int = 20
    gru_layers: int = 2
    fc2_mult: int = 4

    @property
    def dims(self) -> dict:
        n = self.n
        return {
            "input": self.in_mult * n,
            "fc1": self.fc1_mult * n,
            "gru": self.gru_mult * n,
            "fc2": self.fc2_mult * n,
            "output": n,
        }

    def param_shapes(self) -> dict[str, tuple]:
        d = self.dims
        shapes = {"fc1.W": (d["fc1"], d["input"]), "fc1.b": (d["fc1"],)}
        width_in = d["fc1"]
        H = d["gru"]
        for layer in range(self.gru_layers):
            p = f"gru{layer}."
            shapes[p + "Wx"] = (3 * H, width_in)
            shapes[p + "Wh"] = (3 * H, H)
            shapes[p + "b"] = (3 * H,)
            width_in = H
        shapes["fc2.W"] = (d["fc2"], H)
        shapes["fc2.b"] = (d["fc2"],)
        shapes["out.W"] = (d["output"], d["fc2"])
        shapes["out.b"] = (d["output"],)
        return shapes

    def param_count(self) -> int:
        return int(sum(np.prod(s) for s in self.param_shapes().values()))

    def to_json(self) -> dict:
        return {
            "n": self.n, "in_mult": self.in_mult, "fc1_mult": self.fc1_mult,
            "gru_mult": self.gru_mult, "gru_layers": self.gru_layers, "fc2_mult": self.fc2_mult,
        }


def init_params(shape: NetShape, seed: int) -> dict[str, np.ndarray]:
    """Uniform(+-1/sqrt(fan_in)) weights and FC biases; zero GRU biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, s in shape.param_shapes().items():
        if name.startswith("gru") and name.endswith(".b"):
            params[name] = np.zeros(s)
            continue
        if name.endswith(".b"):
            fan_in = shape.param_shapes()[name[:-1] + "W"][1]
        else:
            fan_in = s[1]
        bound = 1.0 / np.sqrt(fan_in)
        params[name] = rng.uniform(-bound, bound, size=s)
    return params


@dataclass(eq=False)
class GainNetwork:
    shape: NetShape
    params: dict[str, np.ndarray]
    seed: Optional[int] = None
    feature_mean: Optional[np.ndarray] = None
    feature_scale: Optional[np.ndarray] = None
    lineage: dict = field(default_factory=dict)

    @classmethod
    def create(cls, n: int, seed: int = 0, **shape_kw) -> "GainNetwork":
        shape = NetShape(n, **shape_kw)
        return cls(shape, init_params(shape, seed), seed)

    @property
    def n(self) -> int:
        return self.shape.n

    @property
    def names(self) -> list[str]:
        return list(self.shape.param_shapes())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in self.names])

    def set_flat(self, theta: np.ndarray) -> None:
        theta = np.asarray(theta, dtype=float)
        if theta.size != self.shape.param_count():
            raise DimMismatch(f"expected {self.shape.param_count()} parameters, got {theta.size}")
        pos = 0
        for k, s in self.shape.param_shapes().items():
            size = int(np.prod(s))
            self.params[k] = theta[pos : pos + size].reshape(s).copy()
            pos += size

    def copy(self) -> "GainNetwork":
        return GainNetwork(
            self.shape, {k: v.copy() for k, v in self.params.items()}, self.seed,
            None if self.feature_mean is None else self.feature_mean.copy(),
            None if self.feature_scale is None else self.feature_scale.copy(),
            dict(self.lineage),
        )

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def initial_hidden(self, batch: Optional[int] = None) -> list[np.ndarray]:
        H = self.shape.dims["gru"]
        shp = (H,) if batch is None else (batch, H)
        return [np.zeros(shp) for _ in range(self.shape.gru_layers)]

    def forward(self, features, hidden, cache: bool = False):
        """Gain vector and advanced hidden state for ``features`` of length 3N.

        Returns ``(gain, hidden', cache_or_None)``.
        """
        feat = np.asarray(features, dtype=float)
        if feat.shape[-1] != self.shape.dims["input"]:
            raise DimMismatch(f"feature length {feat.shape[-1]} != {self.shape.dims['input']}")
        if len(hidden) != self.shape.gru_layers or any(h.shape[-1] != self.shape.dims["gru"] for h in hidden):
            raise DimMismatch("hidden state does not match the GRU layout")
        single = feat.ndim == 1
        if single:
            feat = feat[None]
            hidden = [h[None] for h in hidden]
        p = self.params
        u = feat
        if self.feature_mean is not None:
            u = (u - self.feature_mean) / self.feature_scale
        a1 = u @ p["fc1.W"].T + p["fc1.b"]
        x = np.maximum(a1, 0.0)
        new_hidden, gru_caches = [], []
        for layer, h in enumerate(hidden):
            q = f"gru{layer}."
            h_new, gc = _gru_forward(x, h, p[q + "Wx"], p[q + "Wh"], p[q + "b"])
            new_hidden.append(h_new)
            gru_caches.append(gc)
            x = h_new
        a2 = x @ p["fc2.W"].T + p["fc2.b"]
        r2 = np.maximum(a2, 0.0)
        gain = r2 @ p["out.W"].T + p["out.b"]
        c = (u, a1, gru_caches, x, a2, r2) if cache else None
        if single:
            return gain[0], [h[0] for h in new_hidden], c
        return gain, new_hidden, c

    def step_backward(self, dgain, dhidden, cache, grads):
        """Backpropagate one forward step (batched caches only).

        ``dgain``: adjoint of the gain ``(B, N)``; ``dhidden``: adjoints of the
        new hidden states. Accumulates into ``grads`` and returns
        ``(dfeatures, dhidden_prev)``.
        """
        p = self.params
        u, a1, gru_caches, x_top, a2, r2 = cache
        grads["out.W"] += dgain.T @ r2
        grads["out.b"] += dgain.sum(axis=0)
        dr2 = dgain @ p["out.W"]
        da2 = dr2 * (a2 > 0)
        grads["fc2.W"] += da2.T @ x_top
        grads["fc2.b"] += da2.sum(axis=0)
        dx = da2 @ p["fc2.W"]
        dprev = [None] * len(gru_caches)
        for layer in reversed(range(len(gru_caches))):
            q = f"gru{layer}."
            dh_new = dx + dhidden[layer]
            dx, dprev[layer] = _gru_backward(dh_new, gru_caches[layer], p[q + "Wx"], p[q + "Wh"], grads, q)
        da1 = dx * (a1 > 0)
        grads["fc1.W"] += da1.T @ u
        grads["fc1.b"] += da1.sum(axis=0)
        dfeat = da1 @ p["fc1.W"]
        if self.feature_mean is not None:
            dfeat = dfeat / self.feature_scale
        return dfeat, dprev

    def sq_norm(self) -> float:
        return float(sum(np.sum(v * v) for v in self.params.values()))


def save_checkpoint(net: GainNetwork, path) -> None:
    """Binary layout: magic, u32 header length, JSON header, f8 payload, u32 CRC32."""
    extra = []
    if net.feature_mean is not None:
        extra = [net.feature_mean, net.feature_scale]
    header = json.dumps(
        {
            "version": CHECKPOINT_VERSION,
            "shape": net.shape.to_json(),
            "layer_dims": net.shape.dims,
            "params": {k: list(v) for k, v in net.shape.param_shapes().items()},
            "seed": net.seed,
            "lineage": net.lineage,
            "feature_norm": bool(extra),
        },
        sort_keys=True,
    ).encode()
    body = np.ascontiguousarray(np.concatenate([net.flat()] + [e.ravel() for e in extra]), dtype="<f8").tobytes()
    blob = _MAGIC + struct.pack("<I", len(header)) + header + body
    Path(path).write_bytes(blob + struct.pack("<I", zlib.crc32(blob)))


def load_checkpoint(path) -> GainNetwork:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != _MAGIC:
        raise FormatVersionMismatch(f"{path} is not a graphtrack checkpoint")
    blob, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(blob) != crc:
        raise ChecksumMismatch(f"{path}: CRC32 mismatch")
    (hlen,) = struct.unpack("<I", blob[4:8])
    header = json.loads(blob[8 : 8 + hlen])
    if header.get("version") != CHECKPOINT_VERSION:
        raise FormatVersionMismatch(f"checkpoint version {header.get('version')} != {CHECKPOINT_VERSION}")
    shape = NetShape(**header["shape"])
    payload = np.frombuffer(blob[8 + hlen :], dtype="<f8").astype(float)
    count = shape.param_count()
    net = GainNetwork(shape, {}, header.get("seed"), lineage=header.get("lineage", {}))
    net.set_flat(payload[:count])
    if header.get("feature_norm"):
        m = shape.dims["input"]
        net.feature_mean = payload[count : count + m].copy()
        net.feature_scale = payload[count + m : count + 2 * m].copy()
    return net
