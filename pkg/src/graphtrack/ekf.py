"""Extended Kalman filter in the vertex domain and in the graph-frequency domain.

Every step function works on a single trajectory (state ``(N,)``, covariance
``(N, N)``) or on a batch (``(B, N)`` and ``(B, N, N)``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from .dynamics import StateSpaceModel
from .errors import DimMismatch, NonFiniteState, SingularInnovationCov

COND_LIMIT = 1e12


@dataclass(frozen=True, eq=False)
class FilterState:
    """Posterior moments after ``t`` updates.

    ``sigma_post`` is either a full covariance ``(..., N, N)`` or, for the
    structure-exploiting GSP path, the diagonal ``(..., N)`` of a covariance
    known to be diagonal.
    """

    x_post: np.ndarray
    sigma_post: np.ndarray
    t: int = 0

    @property
    def diagonal(self) -> bool:
        return self.sigma_post.ndim == self.x_post.ndim

    def covariance(self) -> np.ndarray:
        if self.diagonal:
            return self.sigma_post[..., :, None] * np.eye(self.x_post.shape[-1])
        return self.sigma_post


def initial_state(x0, sigma0=None, batch: Optional[int] = None) -> FilterState:
    x0 = np.asarray(x0, dtype=float)
    n = x0.shape[-1]
    sigma0 = np.eye(n) if sigma0 is None else np.asarray(sigma0, dtype=float)
    if batch is not None:
        x0 = np.broadcast_to(x0, (batch, n)).copy()
        sigma0 = np.broadcast_to(sigma0, (batch,) + sigma0.shape).copy()
    return FilterState(x0, sigma0, 0)


def _t(M: np.ndarray) -> np.ndarray:
    return np.swapaxes(M, -1, -2)


def _sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + _t(M))


def _solve_spd(S: np.ndarray, B: np.ndarray, t: int) -> np.ndarray:
    """Solve ``S X = B`` for symmetric positive definite ``S``."""
    try:
        if S.ndim == 2:
            c, low = scipy.linalg.cho_factor(S, check_finite=False)
            d = np.abs(np.diag(c))
        else:
            c = np.linalg.cholesky(S)
            d = np.abs(np.diagonal(c, axis1=-2, axis2=-1))
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
        raise SingularInnovationCov(f"innovation covariance not positive definite at t={t}") from exc
    # (max/min Cholesky pivot)^2 is a lower bound on cond(S)
    ratio = (np.max(d, axis=-1) / np.min(d, axis=-1)) ** 2
    if not np.all(np.isfinite(ratio)) or np.any(ratio > COND_LIMIT):
        raise SingularInnovationCov(f"innovation covariance ill conditioned at t={t}")
    if S.ndim == 2:
        return scipy.linalg.cho_solve((c, low), B, check_finite=False)
    return np.linalg.solve(S, B)


def _ekf_core(f, h, jac_f, jac_h, Q, R, state: FilterState, y, record=None):
    t = state.t + 1
    x, P = state.x_post, state.sigma_post
    if y.shape != x.shape:
        raise DimMismatch(f"observation shape {y.shape} != state shape {x.shape}")
    x_pred = f(x)
    F = jac_f(x)
    P_pred = F @ P @ _t(F) + Q
    y_pred = h(x_pred)
    H = jac_h(x_pred)
    HP = H @ P_pred
    S = HP @ _t(H) + R
    K = _t(_solve_spd(S, HP, t))
    x_post = x_pred + (K @ (y - y_pred)[..., None])[..., 0]
    A = np.eye(x.shape[-1]) - K @ H
    P_post = _sym(A @ P_pred @ _t(A) + K @ R @ _t(K))
    if not (np.all(np.isfinite(x_post)) and np.all(np.isfinite(P_post))):
        raise NonFiniteState("EKF state diverged", t=t)
    if record is not None:
        record.append({"gain": K, "sigma_pred": P_pred, "sigma_post": P_post, "x_pred": x_pred})
    return FilterState(x_post, P_post, t), x_post


def ekf_step(model: StateSpaceModel, state: FilterState, y, record=None):
    """One vertex-domain EKF recursion; returns ``(new_state, x_hat)``."""
    return _ekf_core(model.f, model.h, model.F, model.H, model.Q, model.R, state, np.asarray(y, float), record)


@dataclass(frozen=True, eq=False)
class FreqModel:
    """A state-space model rewritten in graph-frequency coordinates.

    ``f``/``h`` map frequency-domain states to frequency-domain outputs;
    ``F``/``H`` return dense frequency-domain Jacobians. ``F_diag``/``H_diag``
    are set only when the base model provides diagonal structure hints.
    """

    base: StateSpaceModel
    V: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    F_diag: Optional[Callable] = None
    H_diag: Optional[Callable] = None

    @property
    def n(self) -> int:
        return self.V.shape[0]

    @property
    def basis(self):
        return self.base.basis

    def to_freq(self, z):
        return np.asarray(z, dtype=float) @ self.V

    def to_vertex(self, zf):
        return np.asarray(zf, dtype=float) @ self.V.T

    def f(self, xf):
        return self.base.f(xf @ self.V.T) @ self.V

    def h(self, xf):
        return self.base.h(xf @ self.V.T) @ self.V

    def F(self, xf):
        return self.V.T @ self.base.F(xf @ self.V.T) @ self.V

    def H(self, xf):
        return self.V.T @ self.base.H(xf @ self.V.T) @ self.V

    def vjp_f(self, xf, g):
        """Row-vector product ``g @ dF/dx`` of the frequency-domain evolution."""
        J = self.base.F(xf @ self.V.T)
        return (np.einsum("...i,...ij->...j", g @ self.V.T, J)) @ self.V

    def vjp_h(self, xf, g):
        J = self.base.H(xf @ self.V.T)
        return (np.einsum("...i,...ij->...j", g @ self.V.T, J)) @ self.V

    def noise_diagonal(self, rtol: float = 1e-9) -> bool:
        return offdiag_mass(self.Q) <= rtol * max(np.trace(self.Q), 1e-300) and offdiag_mass(
            self.R
        ) <= rtol * max(np.trace(self.R), 1e-300)


def offdiag_mass(M: np.ndarray) -> float:
    M = np.asarray(M)
    return float(np.sum(np.abs(M)) - np.sum(np.abs(np.diagonal(M, axis1=-2, axis2=-1))))


def to_frequency_model(model: StateSpaceModel, exploit_structure: bool = True) -> FreqModel:
    """Congruence ``Q~ = V^T Q V``, ``R~ = V^T R V`` and wrapped model maps."""
    V = model.basis.V
    Qf = _sym(V.T @ model.Q @ V)
    Rf = _sym(V.T @ model.R @ V)
    return FreqModel(
        model,
        V,
        Qf,
        Rf,
        F_diag=model.freq_jac_f if exploit_structure else None,
        H_diag=model.freq_jac_h if exploit_structure else None,
    )


def freq_ekf_step(fm: FreqModel, state: FilterState, yf, record=None):
    """EKF on the frequency-domain model with the unconstrained (full) gain."""
    return _ekf_core(fm.f, fm.h, fm.F, fm.H, fm.Q, fm.R, state, np.asarray(yf, float), record)


@dataclass
class FilterRun:
    """Output of running a filter over whole trajectories (vertex domain)."""

    estimates: np.ndarray
    history: Optional[list] = None


def _as_batch(observations):
    y = np.asarray(observations, dtype=float)
    single = y.ndim == 2
    return (y[None] if single else y), single


def run_ekf(model: StateSpaceModel, observations, x0=None, sigma0=None, record=False) -> FilterRun:
    y, single = _as_batch(observations)
    x0 = model.initial_state if x0 is None else x0
    state = initial_state(x0, sigma0, batch=y.shape[0])
    hist = [] if record else None
    out = np.empty_like(y)
    for t in range(y.shape[1]):
        state, out[:, t] = ekf_step(model, state, y[:, t], hist)
    return FilterRun(out[0] if single else out, hist)


def run_freq_ekf(fm: FreqModel, observations, x0=None, sigma0=None, record=False) -> FilterRun:
    """Frequency-domain EKF; takes and returns vertex-domain signals."""
    y, single = _as_batch(observations)
    x0 = fm.base.initial_state if x0 is None else np.asarray(x0, float)
    state = initial_state(fm.to_freq(x0), sigma0, batch=y.shape[0])
    yf = fm.to_freq(y)
    hist = [] if record else None
    out = np.empty_like(y)
    for t in range(y.shape[1]):
        state, out[:, t] = freq_ekf_step(fm, state, yf[:, t], hist)
    est = fm.to_vertex(out)
    return FilterRun(est[0] if single else est, hist)
