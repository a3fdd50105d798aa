"""GSP-KalmanNet: GSP-EKF prediction with a learned graph-frequency gain.

Inference keeps no covariances. The gain network sees three frequency-domain
features per step:

    F1 = y~_t - h~(x~_{t|t-1})
    F2 = x~_{t-1} - x~_{t-2}
    F3 = x~_{t-1} - x~_{t-1|t-2}

with all history initialised to the GFT of x0, so F2 = F3 = 0 at t = 1.

Training differentiates the full unrolled recursion by hand (reverse sweep
over time, batch-parallel over trajectories).
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .dynamics import Dataset, NoiseProcess, StateSpaceModel
from .ekf import FreqModel, run_ekf, run_freq_ekf, to_frequency_model
from .errors import GraphNotRecorded, LineageViolation, NonFiniteLoss, NonFiniteState, ShapeMismatch
from .gsp import GspConfig, run_gsp_ekf
from .neural import GainNetwork

FILTER_KINDS = ("ekf", "freq-ekf", "gsp-ekf", "gsp-kalmannet")


@dataclass(frozen=True, eq=False)
class KNetState:
    """Frequency-domain history needed to form the features."""

    x_post: np.ndarray
    x_post_prev: np.ndarray
    x_pred_prev: np.ndarray
    t: int = 0


def knet_initial_state(fm: FreqModel, x0, batch: Optional[int] = None) -> KNetState:
    xf = fm.to_freq(x0)
    if batch is not None:
        xf = np.broadcast_to(xf, (batch, fm.n)).copy()
    return KNetState(xf, xf.copy(), xf.copy(), 0)


def knet_step(fm: FreqModel, net: GainNetwork, state: KNetState, hidden, yf, gain=None):
    """One inference step; returns ``(state', hidden', x_hat_vertex)``.

    ``gain`` bypasses the network with a given frequency-domain gain.
    """
    t = state.t + 1
    x_pred = fm.f(state.x_post)
    dy = np.asarray(yf, float) - fm.h(x_pred)
    if gain is None:
        feat = np.concatenate([dy, state.x_post - state.x_post_prev, state.x_post - state.x_pred_prev], axis=-1)
        gain, hidden, _ = net.forward(feat, hidden)
    x_post = x_pred + gain * dy
    if not np.all(np.isfinite(x_post)):
        raise NonFiniteState("GSP-KalmanNet estimate diverged", t=t)
    return KNetState(x_post, state.x_post, x_pred, t), hidden, fm.to_vertex(x_post)


def run_kalmannet(fm: FreqModel, net: GainNetwork, observations, x0=None, gains: Optional[Callable] = None) -> np.ndarray:
    """Vertex-domain estimates for ``(T, N)`` or ``(B, T, N)`` observations.

    ``gains(t, x_pred)`` may inject a gain per step instead of the network.
    """
    y = np.asarray(observations, dtype=float)
    single = y.ndim == 2
    if single:
        y = y[None]
    B, T, _ = y.shape
    x0 = fm.base.initial_state if x0 is None else np.asarray(x0, float)
    if np.ndim(x0) == 1:
        state = knet_initial_state(fm, x0, batch=B)
    else:
        xf = fm.to_freq(x0)
        state = KNetState(xf, xf, xf)
    hidden = net.initial_hidden(B) if net is not None else None
    yf = fm.to_freq(y)
    out = np.empty_like(y)
    for t in range(T):
        g = None if gains is None else gains(t, fm.f(state.x_post))
        state, hidden, out[:, t] = knet_step(fm, net, state, hidden, yf[:, t], g)
    return out[0] if single else out


def trajectory_mse(estimates, states) -> np.ndarray:
    """Per-trajectory time-mean of the squared error norm."""
    return np.mean(np.sum((np.asarray(estimates) - np.asarray(states)) ** 2, axis=-1), axis=-1)


def mse_to_db(mse: float) -> float:
    return 10.0 * math.log10(mse) if mse > 0 else -math.inf


def _db_or_none(mse: float) -> Optional[float]:
    db = mse_to_db(mse) if math.isfinite(mse) else math.inf
    return db if math.isfinite(db) else None


@dataclass
class Tape:
    """Everything the reverse sweep needs from one unrolled forward pass."""

    loss: float
    mse: float
    post: np.ndarray  # (T+2, B, N); slots 0, 1 hold x~0
    pred: np.ndarray  # (T+1, B, N); slot 0 holds x~0
    dy: np.ndarray  # (T, B, N)
    gains: np.ndarray  # (T, B, N)
    targets: np.ndarray  # (T, B, N), vertex domain
    l2: float
    window: Optional[int]
    caches: Optional[list] = None


def unrolled_loss(fm: FreqModel, net: GainNetwork, observations, states, x0, l2: float = 0.0, window: Optional[int] = None, record: bool = True) -> Tape:
    """Forward pass of the regularised training loss over a batch.

    ``observations``/``states`` are ``(B, T, N)`` vertex-domain arrays and
    ``x0`` is ``(B, N)`` or ``(N,)``. The loss is the batch mean of
    per-trajectory time-averaged squared errors plus ``l2 * ||theta||^2``.
    """
    y = np.asarray(observations, float)
    x = np.asarray(states, float)
    if y.ndim != 3 or y.shape != x.shape:
        raise ShapeMismatch(f"observations {y.shape} and states {x.shape} must be equal (B, T, N)")
    B, T, N = y.shape
    if N != fm.n or N != net.n:
        raise ShapeMismatch(f"data has N={N}, model N={fm.n}, network N={net.n}")
    x0f = np.broadcast_to(fm.to_freq(x0), (B, N))
    yf = np.swapaxes(fm.to_freq(y), 0, 1)
    post = np.empty((T + 2, B, N))
    pred = np.empty((T + 1, B, N))
    post[0] = post[1] = pred[0] = x0f
    dy = np.empty((T, B, N))
    gains = np.empty((T, B, N))
    caches = [] if record else None
    hidden = net.initial_hidden(B)
    for t in range(T):
        p_prev = post[t + 1]
        pred[t + 1] = fm.f(p_prev)
        dy[t] = yf[t] - fm.h(pred[t + 1])
        feat = np.concatenate([dy[t], p_prev - post[t], p_prev - pred[t]], axis=-1)
        gains[t], hidden, cache = net.forward(feat, hidden, cache=record)
        if record:
            caches.append(cache)
        post[t + 2] = pred[t + 1] + gains[t] * dy[t]
    targets = np.swapaxes(x, 0, 1)
    err = fm.to_vertex(post[2:]) - targets
    mse = float(np.sum(err * err) / (B * T))
    loss = mse + l2 * net.sq_norm()
    return Tape(loss, mse, post, pred, dy, gains, targets, l2, window, caches)


def backward(fm: FreqModel, net: GainNetwork, tape: Tape) -> dict[str, np.ndarray]:
    """Gradient of ``tape.loss`` with respect to every network parameter."""
    if tape.caches is None:
        raise GraphNotRecorded("forward pass was run with record=False")
    T, B, N = tape.dy.shape
    V = fm.V
    grads = net.zero_grads()
    g_postbuf = np.zeros_like(tape.post)
    g_predbuf = np.zeros_like(tape.pred)
    dh = [np.zeros_like(h) for h in net.initial_hidden(B)]
    scale = 2.0 / (B * T)
    for t in reversed(range(T)):
        start = (t // tape.window) * tape.window if tape.window else 0
        carry = t - 1 >= start
        g_postbuf[t + 2] += scale * (fm.to_vertex(tape.post[t + 2]) - tape.targets[t]) @ V
        g_post = g_postbuf[t + 2]
        g_pred = g_predbuf[t + 1]
        g_pred += g_post
        g_dy = g_post * tape.gains[t]
        dfeat, dh_prev = net.step_backward(g_post * tape.dy[t], dh, tape.caches[t], grads)
        f1, f2, f3 = dfeat[:, :N], dfeat[:, N : 2 * N], dfeat[:, 2 * N :]
        g_pred -= fm.vjp_h(tape.pred[t + 1], g_dy + f1)
        if carry:
            g_postbuf[t + 1] += f2 + f3 + fm.vjp_f(tape.post[t + 1], g_pred)
            g_predbuf[t] -= f3
            if t - 2 >= start:
                g_postbuf[t] -= f2
            dh = dh_prev
        else:
            dh = [np.zeros_like(h) for h in dh_prev]
    if tape.l2:
        for k, v in net.params.items():
            grads[k] += 2.0 * tape.l2 * v
    return grads


def loss_and_grad(fm, net, observations, states, x0, l2=0.0, window=None):
    tape = unrolled_loss(fm, net, observations, states, x0, l2, window)
    return tape.loss, backward(fm, net, tape)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 20
    batch_size: int = 32
    l2: float = 1e-4
    seed: int = 0
    optimizer: str = "adam"
    clip: Optional[float] = 10.0
    window: Optional[int] = None
    val_fraction: float = 0.1
    normalize_features: bool = False
    zero_output_init: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0 or self.epochs < 1 or self.batch_size < 1 or self.l2 < 0:
            raise ValueError("lr, epochs and batch_size must be positive and l2 nonnegative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.clip is not None and not self.clip > 0:
            raise ValueError("clip must be positive or None")
        if self.window is not None and self.window < 1:
            raise ValueError("window must be a positive integer or None")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")

    def to_json(self) -> dict:
        return asdict(self)


class _Adam:
    def __init__(self, params: dict, cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.k = 0

    def step(self, params: dict, grads: dict) -> None:
        c = self.cfg
        self.k += 1
        b1c = 1.0 - c.beta1**self.k
        b2c = 1.0 - c.beta2**self.k
        for name, g in grads.items():
            self.m[name] = c.beta1 * self.m[name] + (1 - c.beta1) * g
            self.v[name] = c.beta2 * self.v[name] + (1 - c.beta2) * g * g
            params[name] -= c.lr * (self.m[name] / b1c) / (np.sqrt(self.v[name] / b2c) + c.eps)


class _SGD:
    def __init__(self, params: dict, cfg: TrainConfig):
        self.lr = cfg.lr

    def step(self, params: dict, grads: dict) -> None:
        for name, g in grads.items():
            params[name] -= self.lr * g


@dataclass
class TrainResult:
    net: GainNetwork
    curve: list[dict]
    best_epoch: int
    config: TrainConfig
    train_hash: str
    val_hash: str
    train_seeds: list[int] = field(default_factory=list)


def _feature_stats(fm: FreqModel, data: Dataset, idx) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature mean/scale from a GSP-EKF pass (fixed before training)."""
    sub = data.subset(idx)
    xf_est = fm.to_freq(run_gsp_ekf(fm, sub.observations, x0=sub.x0[0]).estimates)
    x0f = fm.to_freq(sub.x0)[:, None, :]
    post = np.concatenate([x0f, x0f, xf_est], axis=1)
    pred = np.concatenate([x0f, fm.f(post[:, 1:-1])], axis=1)
    dy = fm.to_freq(sub.observations) - fm.h(pred[:, 1:])
    feats = np.concatenate([dy, post[:, 1:-1] - post[:, :-2], post[:, 1:-1] - pred[:, :-1]], axis=-1)
    feats = feats.reshape(-1, feats.shape[-1])
    return feats.mean(axis=0), feats.std(axis=0) + 1e-8


def _clip(grads: dict, cap: Optional[float]) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if cap is not None and norm > cap:
        s = cap / norm
        for g in grads.values():
            g *= s
    return norm


def train(dataset: Dataset, model: StateSpaceModel, config: Optional[TrainConfig] = None, net: Optional[GainNetwork] = None, log: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Supervised training of the gain network through the unrolled filter.

    ``model`` is the filter-side model (possibly mismatched). The pool is
    split 90/10 into train/validation; the network with the lowest
    validation MSE is returned.
    """
    config = config or TrainConfig()
    if dataset.n != model.n:
        raise ShapeMismatch(f"dataset N={dataset.n} but model N={model.n}")
    if dataset.D < 2:
        raise ShapeMismatch("need at least two trajectories to split train/validation")
    fm = to_frequency_model(model)
    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(dataset.D)
    n_val = min(dataset.D - 1, max(1, int(round(config.val_fraction * dataset.D))))
    val_idx, tr_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    train_set, val_set = dataset.subset(tr_idx), dataset.subset(val_idx)
    if net is None:
        net = GainNetwork.create(model.n, seed=int(rng.integers(2**31)))
        if config.zero_output_init:
            # start from the open-loop predictor: gain identically zero
            net.params["out.W"][:] = 0.0
            net.params["out.b"][:] = 0.0
    else:
        net = net.copy()
    if config.normalize_features:
        net.feature_mean, net.feature_scale = _feature_stats(fm, dataset, tr_idx)
    opt = (_Adam if config.optimizer == "adam" else _SGD)(net.params, config)

    def val_mse(n: GainNetwork) -> float:
        try:
            est = run_kalmannet(fm, n, val_set.observations, val_set.x0)
        except NonFiniteState:
            return math.inf
        return float(np.mean(trajectory_mse(est, val_set.states)))

    best, best_mse, best_epoch = net.copy(), val_mse(net), 0
    curve = [{"epoch": 0, "train_loss": None, "val_mse": best_mse, "val_mse_db": _db_or_none(best_mse), "theta_norm": math.sqrt(net.sq_norm())}]
    if log:
        log(curve[-1])
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(train_set.D)
        losses, norms = [], []
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start : start + config.batch_size]
            try:
                tape = unrolled_loss(fm, net, train_set.observations[idx], train_set.states[idx], train_set.x0[idx], config.l2, config.window)
            except NonFiniteState as exc:
                raise NonFiniteLoss(f"filter diverged in epoch {epoch}, batch {b}: {exc}", epoch=epoch, batch=b) from exc
            if not math.isfinite(tape.loss):
                raise NonFiniteLoss(f"loss is {tape.loss} in epoch {epoch}, batch {b}", epoch=epoch, batch=b)
            grads = backward(fm, net, tape)
            norms.append(_clip(grads, config.clip))
            opt.step(net.params, grads)
            losses.append(tape.loss * len(idx))
        vm = val_mse(net)
        row = {
            "epoch": epoch,
            "train_loss": float(sum(losses) / train_set.D),
            "val_mse": vm,
            "val_mse_db": _db_or_none(vm),
            "theta_norm": math.sqrt(net.sq_norm()),
            "grad_norm_median": float(np.median(norms)),
        }
        curve.append(row)
        if log:
            log(row)
        if vm < best_mse:
            best, best_mse, best_epoch = net.copy(), vm, epoch
    seeds = [int(s) for s in dataset.seeds]
    best.lineage = {"train_hash": dataset.hash(), "train_seeds": seeds, "config": config.to_json()}
    return TrainResult(best, curve, best_epoch, config, train_set.hash(), val_set.hash(), seeds)


@dataclass
class EvalReport:
    filter: str
    mse_linear: float
    mse_db: float
    per_trajectory: np.ndarray
    step_time: float
    trajectory_time: float
    dataset_hash: str

    def to_json(self) -> dict:
        return {
            "filter": self.filter,
            "mse_linear": self.mse_linear,
            "mse_db": self.mse_db if math.isfinite(self.mse_db) else None,
            "per_trajectory": [float(v) for v in self.per_trajectory],
            "dataset_hash": self.dataset_hash,
            "timing": {"step_time": self.step_time, "trajectory_time": self.trajectory_time},
        }


def _check_lineage(dataset: Dataset, exclude) -> None:
    seeds = set(int(s) for s in dataset.seeds)
    for other in exclude:
        if isinstance(other, Dataset):
            used = set(int(s) for s in other.seeds)
        elif isinstance(other, TrainResult):
            used = set(other.train_seeds)
        else:
            used = set(int(s) for s in other)
        overlap = seeds & used
        if overlap:
            raise LineageViolation(f"{len(overlap)} test trajectories also appear in training data")


def _runner(kind: str, model: StateSpaceModel, net: Optional[GainNetwork], gsp_config: Optional[GspConfig]):
    if kind == "ekf":
        return lambda y, x0: run_ekf(model, y, x0).estimates
    fm = to_frequency_model(model)
    if kind == "freq-ekf":
        return lambda y, x0: run_freq_ekf(fm, y, x0).estimates
    if kind == "gsp-ekf":
        return lambda y, x0: run_gsp_ekf(fm, y, x0, config=gsp_config).estimates
    if kind == "gsp-kalmannet":
        if net is None:
            raise ValueError("gsp-kalmannet evaluation needs a network")
        return lambda y, x0: run_kalmannet(fm, net, y, x0)
    raise ValueError(f"unknown filter {kind!r}; choose from {FILTER_KINDS}")


def evaluate(kind: str, dataset: Dataset, model: StateSpaceModel, net: Optional[GainNetwork] = None, exclude: Sequence = (), gsp_config: Optional[GspConfig] = None) -> EvalReport:
    """Empirical MSE of a filter over every trajectory of ``dataset``.

    Test data must not share trajectories with ``exclude`` or with the
    network's recorded training data.
    """
    exclude = list(exclude)
    if net is not None and net.lineage.get("train_seeds"):
        exclude.append(net.lineage["train_seeds"])
    _check_lineage(dataset, exclude)
    run = _runner(kind, model, net, gsp_config)
    x0 = dataset.x0
    run(dataset.observations[:1, : min(2, dataset.T)], x0[:1])  # warm-up, excluded from timing
    t0 = time.perf_counter()
    est = run(dataset.observations, x0)
    elapsed = time.perf_counter() - t0
    per = trajectory_mse(est, dataset.states)
    mse = float(np.mean(per))
    return EvalReport(kind, mse, mse_to_db(mse), per, elapsed / dataset.T, elapsed / dataset.D, dataset.hash())


def grid_search_variance(dataset: Dataset, model: StateSpaceModel, grid: Sequence[tuple[float, float]], meas_kind: str = "gaussian") -> tuple[float, float]:
    """Grid point ``(q2, r2)`` minimising GSP-EKF MSE; ties go to the lowest index."""
    if not grid:
        raise ValueError("grid must be nonempty")
    best, best_mse = None, math.inf
    for q2, r2 in grid:
        cand = model.with_noise(NoiseProcess("gaussian", float(q2)), NoiseProcess(meas_kind, float(r2)))
        try:
            mse = evaluate("gsp-ekf", dataset, cand).mse_linear
        except (NonFiniteState, ArithmeticError):
            mse = math.inf
        if best is None or mse < best_mse:
            best, best_mse = (float(q2), float(r2)), mse
    return best


def results_document(config: dict, graph_hash: str, dataset_hashes: dict, result: Optional[TrainResult], reports: Sequence[EvalReport]) -> dict:
    """Results JSON; timing lives under ``"timing"`` keys so it can be stripped for comparisons."""
    doc = {
        "config": config,
        "graph_hash": graph_hash,
        "dataset_hashes": dataset_hashes,
        "epochs": [] if result is None else result.curve,
        "best_epoch": None if result is None else result.best_epoch,
        "mse": {r.filter: {"linear": r.mse_linear, "db": r.mse_db if math.isfinite(r.mse_db) else None} for r in reports},
        "timing": {r.filter: {"step_time": r.step_time, "trajectory_time": r.trajectory_time} for r in reports},
    }
    return doc


def strip_timing(doc):
    """Drop every ``"timing"`` entry recursively (for reproducibility checks)."""
    if isinstance(doc, dict):
        return {k: strip_timing(v) for k, v in doc.items() if k != "timing"}
    if isinstance(doc, list):
        return [strip_timing(v) for v in doc]
    return doc


def digest(doc) -> str:
    return hashlib.sha256(json.dumps(strip_timing(doc), sort_keys=True).encode()).hexdigest()
