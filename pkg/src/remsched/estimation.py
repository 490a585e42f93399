"""LTI process model, steady-state local Kalman covariance and the AoI -> MSE map.

A sensor running a steady-state Kalman filter leaves a posterior error
covariance ``Pbar``.  When the remote estimator last heard from the sensor
``tau`` slots ago its error covariance is ``f^tau(Pbar)`` with
``f(X) = A X A^T + W``, so the remote MSE is a deterministic function of the
age of information.  Rewards for both value iteration and the learning agents
are read from a precomputed table of these traces.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import ConvergenceError, ValidationError

REWARD_KINDS = ("sum_mse", "sum_aoi", "product_mse")


class AoIClampWarning(RuntimeWarning):
    """An AoI beyond the precomputed table was clamped to the table end."""


def _check_spd(name: str, X: np.ndarray) -> None:
    if X.ndim != 2 or X.shape[0] != X.shape[1]:
        raise ValidationError(f"{name} must be square, got shape {X.shape}")
    if not np.allclose(X, X.T, atol=1e-12, rtol=0.0):
        raise ValidationError(f"{name} must be symmetric")
    try:
        np.linalg.cholesky(X)
    except np.linalg.LinAlgError:
        raise ValidationError(f"{name} must be positive definite") from None


def spectral_radius(A: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(A))))


def kalman_cycle(P: np.ndarray, A: np.ndarray, C: np.ndarray,
                 W: np.ndarray, V: np.ndarray) -> np.ndarray:
    """One predict + update step of the covariance recursion."""
    prior = A @ P @ A.T + W
    S = C @ prior @ C.T + V
    K = np.linalg.solve(S.T, (prior @ C.T).T).T
    post = (np.eye(A.shape[0]) - K @ C) @ prior
    return 0.5 * (post + post.T)


def steady_state_covariance(A, C, W, V, tol: float = 1e-10,
                            max_iter: int = 100_000) -> np.ndarray:
    """Fixed point of the Kalman covariance recursion, iterated from ``P = W``.

    Returns the first iterate that one further predict/update cycle moves by
    at most ``tol`` in the sup-norm.  Convergence can oscillate (complex
    eigenvalues), so this is checked on the returned matrix itself.

    Raises
    ------
    ValidationError
        If ``W`` or ``V`` is not symmetric positive definite, or shapes disagree.
    ConvergenceError
        If the residual is still above ``tol`` after ``max_iter`` cycles.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    W = np.atleast_2d(np.asarray(W, dtype=float))
    V = np.atleast_2d(np.asarray(V, dtype=float))
    if tol <= 0:
        raise ValidationError("tol must be positive")
    _check_spd("W", W)
    _check_spd("V", V)
    l = A.shape[0]
    if A.shape != (l, l) or W.shape != (l, l) or C.shape[1] != l or V.shape[0] != C.shape[0]:
        raise ValidationError(
            f"inconsistent shapes A{A.shape} C{C.shape} W{W.shape} V{V.shape}")

    P = W.copy()
    residual = np.inf
    for it in range(1, max_iter + 1):
        P_next = kalman_cycle(P, A, C, W, V)
        residual = float(np.max(np.abs(P_next - P)))
        if residual <= tol:
            # the returned matrix is the one whose residual was measured
            return P
        P = P_next
    raise ConvergenceError("Riccati iteration did not converge", residual, max_iter)


@dataclass(frozen=True)
class MseTable:
    """``values[tau - 1] = Tr(f^tau(Pbar))`` for ``tau = 1..tau_max``."""

    values: np.ndarray

    @property
    def tau_max(self) -> int:
        return len(self.values)

    @classmethod
    def build(cls, A: np.ndarray, W: np.ndarray, Pbar: np.ndarray, tau_max: int) -> "MseTable":
        if tau_max < 1:
            raise ValidationError("tau_max must be >= 1")
        vals = np.empty(tau_max)
        X = Pbar
        # Traces grow like rho^(2 tau); overflow to inf is the intended
        # saturation for very long tables.
        with np.errstate(over="ignore", invalid="ignore"):
            for k in range(tau_max):
                X = A @ X @ A.T + W
                vals[k] = np.trace(X)
        vals.setflags(write=False)
        return cls(vals)


@dataclass(frozen=True)
class ProcessModel:
    A: np.ndarray
    C: np.ndarray
    W: np.ndarray
    V: np.ndarray
    Pbar: np.ndarray
    spectral_radius: float
    mse_table: MseTable = field(repr=False)

    @classmethod
    def from_matrices(cls, A, C, W, V, tau_max: int = 16, tol: float = 1e-10,
                      max_iter: int = 100_000) -> "ProcessModel":
        A = np.atleast_2d(np.asarray(A, dtype=float))
        C = np.atleast_2d(np.asarray(C, dtype=float))
        W = np.atleast_2d(np.asarray(W, dtype=float))
        V = np.atleast_2d(np.asarray(V, dtype=float))
        rho = spectral_radius(A)
        if not rho > 1.0:
            raise ValidationError(f"process must be unstable, spectral radius {rho:.4f} <= 1")
        Pbar = steady_state_covariance(A, C, W, V, tol=tol, max_iter=max_iter)
        for X in (A, C, W, V, Pbar):
            X.setflags(write=False)
        return cls(A, C, W, V, Pbar, rho, MseTable.build(A, W, Pbar, tau_max))

    @property
    def tau_max(self) -> int:
        return self.mse_table.tau_max

    def with_tau_max(self, tau_max: int) -> "ProcessModel":
        """Same process with the MSE table rebuilt to a different length."""
        return replace(self, mse_table=MseTable.build(self.A, self.W, self.Pbar, tau_max))

    def fixed_point_residual(self) -> float:
        P = kalman_cycle(self.Pbar, self.A, self.C, self.W, self.V)
        return float(np.max(np.abs(P - self.Pbar)))

    def to_dict(self) -> dict:
        return {"A": self.A.tolist(), "C": self.C.tolist(),
                "W": self.W.tolist(), "V": self.V.tolist()}


def aoi_error_trace(process: ProcessModel, tau: int) -> float:
    """Remote estimation MSE ``Tr(f^tau(Pbar))`` after ``tau`` slots without an update.

    AoI values past the table end are clamped to ``tau_max`` with an
    :class:`AoIClampWarning`.
    """
    tau = int(tau)
    if tau < 1:
        raise ValidationError(f"AoI must be >= 1, got {tau}")
    table = process.mse_table
    if tau > table.tau_max:
        warnings.warn(f"AoI {tau} clamped to table end {table.tau_max}", AoIClampWarning,
                      stacklevel=2)
        tau = table.tau_max
    return float(table.values[tau - 1])


def mse_matrix(processes: Sequence[ProcessModel], tau_max: int | None = None) -> np.ndarray:
    """Stack per-process MSE tables into an ``(N, tau_max)`` array."""
    if tau_max is None:
        tau_max = min(p.tau_max for p in processes)
    for p in processes:
        if p.tau_max < tau_max:
            raise ValidationError(f"process table too short ({p.tau_max} < {tau_max})")
    return np.stack([p.mse_table.values[:tau_max] for p in processes])


def reward_from_table(table: np.ndarray, tau: np.ndarray, kind: str) -> np.ndarray:
    """Vectorised reward for a batch of AoI vectors.

    ``table`` is the ``(N, tau_max)`` output of :func:`mse_matrix`; ``tau``
    has shape ``(..., N)``.  No range checking: callers guarantee it.
    """
    tau = np.asarray(tau)
    if kind == "sum_aoi":
        return -tau.sum(axis=-1).astype(float)
    n_idx = np.arange(table.shape[0])
    mse = table[n_idx, tau - 1]
    if kind == "sum_mse":
        return -mse.sum(axis=-1)
    if kind == "product_mse":
        return -mse.prod(axis=-1)
    raise ValidationError(f"unknown reward kind {kind!r}; expected one of {REWARD_KINDS}")


def reward(processes: Sequence[ProcessModel], tau, kind: str = "sum_mse") -> float:
    """Immediate reward of an AoI vector.

    ``sum_mse`` is the negative total remote MSE, ``sum_aoi`` the negative
    total age and ``product_mse`` the negative product of per-process MSEs.
    """
    if kind not in REWARD_KINDS:
        raise ValidationError(f"unknown reward kind {kind!r}; expected one of {REWARD_KINDS}")
    tau = np.asarray(tau, dtype=int)
    if tau.shape != (len(processes),):
        raise ValidationError(f"AoI vector of length {len(processes)} expected, got {tau.shape}")
    for n, (t, p) in enumerate(zip(tau, processes)):
        if t < 1 or t > p.tau_max:
            raise ValidationError(f"AoI of sensor {n} = {t} outside table range 1..{p.tau_max}")
    if kind == "sum_aoi":
        return float(-tau.sum())
    mse = np.array([p.mse_table.values[t - 1] for t, p in zip(tau, processes)])
    return float(-mse.sum()) if kind == "sum_mse" else float(-mse.prod())
