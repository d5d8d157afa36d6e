"""Stochastic ensemble Kalman filter algebra.

Ensembles are arrays of shape (state_dim, N) with one member per column.
The analysis equations use unnormalised anomaly products on both sides of
the gain, so the 1/(N-1) factors cancel.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg

log = logging.getLogger(__name__)

JITTER = 1e-8


@dataclass
class AnalysisResult:
    posterior: np.ndarray
    covariance: np.ndarray
    trace: float


def _as_ensemble(A) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    if A.ndim == 1:
        A = A[None, :]
    if A.ndim != 2:
        raise ValueError(f"ensemble must be 2-D (state_dim, N), got shape {A.shape}")
    if A.shape[1] < 2:
        raise ValueError("ensemble needs at least two members")
    return A


def ensemble_mean(A) -> np.ndarray:
    return np.asarray(A, dtype=float).mean(axis=1)


def anomalies(A) -> np.ndarray:
    """``A - A 1_N``: deviations of each member from the ensemble mean."""
    A = np.asarray(A, dtype=float)
    return A - A.mean(axis=1, keepdims=True)


def covariance_and_trace(A):
    """Sample covariance with the N-1 denominator, and its trace."""
    A = _as_ensemble(A)
    X = anomalies(A)
    P = X @ X.T / (A.shape[1] - 1)
    P = 0.5 * (P + P.T)
    return P, float(np.trace(P))


def propagate(A, forward_model, model_noise_std, rng, vectorized=False):
    """Push each member through ``forward_model`` and add Gaussian model noise.

    With ``vectorized=True`` the model receives the whole (state_dim, N)
    matrix at once; otherwise it is called column by column.
    """
    A = _as_ensemble(A)
    if vectorized:
        F = np.asarray(forward_model(A), dtype=float)
    else:
        F = np.column_stack([np.asarray(forward_model(A[:, j]), dtype=float)
                             for j in range(A.shape[1])])
    if F.shape != A.shape:
        raise ValueError(f"forward model changed ensemble shape {A.shape} -> {F.shape}")
    std = np.broadcast_to(np.asarray(model_noise_std, dtype=float), (A.shape[0],))
    if np.any(std < 0):
        raise ValueError("model noise std must be non-negative")
    if np.any(std > 0):
        F = F + std[:, None] * rng.standard_normal(A.shape)
    return F


def perturb_observations(d, noise_std, n_members, rng):
    """Perturbed observation matrix ``D`` and the perturbations ``Upsilon``."""
    if n_members < 2:
        raise ValueError("need at least two members")
    d = np.atleast_1d(np.asarray(d, dtype=float))
    std = np.broadcast_to(np.asarray(noise_std, dtype=float), d.shape)
    upsilon = std[:, None] * rng.standard_normal((d.size, n_members))
    return d[:, None] + upsilon, upsilon


def _solve_innovation(S, rhs):
    """Solve ``S x = rhs`` for symmetric PSD ``S``, adding jitter if needed."""
    S = 0.5 * (S + S.T)
    try:
        return linalg.cho_solve(linalg.cho_factor(S, check_finite=False), rhs, check_finite=False)
    except linalg.LinAlgError:
        pass
    tr = np.trace(S)
    jitter = JITTER * (tr if tr > 0 else 1.0)
    log.warning("innovation matrix not positive definite; adding jitter %.3g", jitter)
    S = S + jitter * np.eye(S.shape[0])
    return linalg.cho_solve(linalg.cho_factor(S, check_finite=False), rhs, check_finite=False)


def _analysis(A, HX, A_pred, D, upsilon):
    X = anomalies(A)
    S = HX @ HX.T + upsilon @ upsilon.T
    if not np.any(S):
        # degenerate ensemble with exact observations: no information either way
        post = A.copy()
    else:
        post = A + X @ HX.T @ _solve_innovation(S, D - A_pred)
    P, tr = covariance_and_trace(post)
    return AnalysisResult(post, P, tr)


def analysis_linear(A, D, upsilon, H) -> AnalysisResult:
    """EnKF update with a linear observation operator ``H``."""
    A = _as_ensemble(A)
    H = np.atleast_2d(np.asarray(H, dtype=float))
    D = np.atleast_2d(np.asarray(D, dtype=float))
    upsilon = np.atleast_2d(np.asarray(upsilon, dtype=float))
    if H.shape[1] != A.shape[0]:
        raise ValueError(f"H has {H.shape[1]} columns, state has {A.shape[0]} rows")
    if D.shape != (H.shape[0], A.shape[1]) or upsilon.shape != D.shape:
        raise ValueError("D and Upsilon must be (obs_dim, N)")
    HA = H @ A
    return _analysis(A, anomalies(HA), HA, D, upsilon)


def analysis_nonlinear(A, A_hat, D, upsilon) -> AnalysisResult:
    """EnKF update using predicted measurements ``A_hat`` as diagnostic variables."""
    A = _as_ensemble(A)
    A_hat = np.atleast_2d(np.asarray(A_hat, dtype=float))
    D = np.atleast_2d(np.asarray(D, dtype=float))
    upsilon = np.atleast_2d(np.asarray(upsilon, dtype=float))
    if A_hat.shape[1] != A.shape[1]:
        raise ValueError("A_hat must have one column per member")
    if D.shape != A_hat.shape or upsilon.shape != D.shape:
        raise ValueError("D and Upsilon must match A_hat in shape")
    return _analysis(A, anomalies(A_hat), A_hat, D, upsilon)


def selector(indices, dim) -> np.ndarray:
    """Row-selector observation matrix picking ``indices`` out of ``dim`` states."""
    H = np.zeros((len(indices), dim))
    H[np.arange(len(indices)), list(indices)] = 1.0
    return H
