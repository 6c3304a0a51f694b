"""Ensemble matrix algebra and the ensemble Kalman analysis update.

Ensembles are plain 2-D float arrays of shape ``(n, E)``: one column per
member.  The analysis is available both directly (``X -> X+``) and as an
``E x E`` right-multiplier ``M`` with ``X @ M == X+``, so an update derived
from one ensemble (states, predictions) can be carried over to any
co-evolving ensemble (parameters).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as la

__all__ = [
    "NoiseModel",
    "EnsembleSolveError",
    "as_ensemble",
    "deviations",
    "analyze",
    "update_matrix",
    "apply_update",
    "ensemble_stats",
    "perturbed_observations",
    "child_rng",
    "STREAM_INIT",
    "STREAM_OBS",
    "STREAM_SHUFFLE",
    "STREAM_REBALANCE",
    "STREAM_SPLIT",
]

# Fixed offsets for per-purpose random streams derived from one root seed.
STREAM_INIT = 0
STREAM_OBS = 1
STREAM_SHUFFLE = 2
STREAM_REBALANCE = 3
STREAM_SPLIT = 4

_JITTER_START = 1e-12
_JITTER_GROWTH = 10.0
_JITTER_RETRIES = 4


class EnsembleSolveError(ArithmeticError):
    """The innovation covariance could not be factorized."""


@dataclass(frozen=True)
class NoiseModel:
    """Observation tolerance ``R = r**2 I``.

    In ``adaptive`` mode ``r`` is the initial (and largest) tolerance and
    ``r_min`` its floor; ``adapt_kappa`` scales the ensemble spread into a
    tolerance (see :func:`kalman_learn.trainer.adapt_tolerance`).
    """

    r: float
    adapt_kappa: float = 1.0
    r_min: float = 0.0
    mode: str = "fixed"

    def __post_init__(self):
        if self.mode not in ("fixed", "adaptive"):
            raise ValueError(f"mode must be 'fixed' or 'adaptive', got {self.mode!r}")
        for name in ("r", "adapt_kappa", "r_min"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be a nonnegative finite number, got {value}")
        if self.mode == "adaptive" and self.r_min > self.r:
            raise ValueError(f"r_min ({self.r_min}) exceeds r ({self.r})")

    def covariance(self, m: int) -> np.ndarray:
        return self.r**2 * np.eye(m)

    def with_r(self, r: float) -> "NoiseModel":
        return NoiseModel(r=r, adapt_kappa=self.adapt_kappa, r_min=min(self.r_min, r), mode=self.mode)


def child_rng(seed: int, stream: int) -> np.random.Generator:
    """Independent generator for one purpose (init, observations, ...) of a run."""
    return np.random.default_rng([int(seed), int(stream)])


def as_ensemble(Q, name: str = "ensemble", min_members: int = 2) -> np.ndarray:
    """Validate and return ``Q`` as a float ``(n, E)`` array."""
    Q = np.asarray(Q, dtype=float)
    if Q.ndim != 2:
        raise ValueError(f"{name} must be 2-D (n, E), got shape {Q.shape}")
    if Q.shape[1] < min_members:
        raise ValueError(f"{name} needs at least {min_members} members, got {Q.shape[1]}")
    if not np.all(np.isfinite(Q)):
        raise ValueError(f"{name} contains non-finite entries")
    return Q


def deviations(Q) -> np.ndarray:
    """Remove the mean column from every column of ``Q``."""
    Q = as_ensemble(Q)
    return Q - Q.mean(axis=1, keepdims=True)


def _spd_solve(C: np.ndarray, B: np.ndarray, allow_jitter: bool) -> np.ndarray:
    """Solve ``C W = B`` for symmetric positive definite ``C``.

    On factorization failure a diagonal jitter (relative to the mean diagonal)
    is added, starting at 1e-12 and growing tenfold, at most four retries.
    """
    m = C.shape[0]
    scale = max(float(np.trace(C)) / m, np.finfo(float).tiny)
    jitter = 0.0
    for attempt in range(_JITTER_RETRIES + 1):
        try:
            factor = la.cho_factor(C + jitter * scale * np.eye(m), lower=True, check_finite=False)
        except la.LinAlgError:
            factor = None
        if factor is not None:
            pivots = np.abs(np.diag(factor[0]))
            # an r == 0 solve must fail loudly on a numerically singular matrix
            if allow_jitter or pivots.min() ** 2 > m * np.finfo(float).eps * scale:
                return la.cho_solve(factor, B, check_finite=False)
        if not allow_jitter:
            break
        jitter = _JITTER_START if attempt == 0 else jitter * _JITTER_GROWTH
    raise EnsembleSolveError(
        "innovation covariance is not positive definite"
        + (f" (jitter escalated to {jitter:.1e})" if allow_jitter else " and r == 0")
    )


def analyze(X, Z, Y, noise: NoiseModel, normalized: bool = False):
    """Ensemble Kalman analysis of ``X`` given predictions ``Z`` and observations ``Y``.

    Computes ``X+ = X + X~ Z~^T [Z~ Z~^T + R]^{-1} (Y - Z)`` with the
    deviation products left unnormalized.  With ``normalized=True`` both
    ``X~ Z~^T`` and ``Z~ Z~^T`` are divided by ``E - 1`` instead, which is
    the textbook sample-covariance gain.

    Parameters
    ----------
    X : array (n, E)
        Ensemble being estimated.
    Z : array (m, E)
        Predicted observations, one column per member.
    Y : array (m, E)
        Observation ensemble (perturbed or replicated).
    noise : NoiseModel
        Supplies ``R = r**2 I``.

    Returns
    -------
    X_plus : array (n, E)
    M : array (E, E)
        Update matrix with ``X @ M == X_plus``.

    Raises
    ------
    EnsembleSolveError
        If ``Z~ Z~^T + R`` cannot be factorized.
    """
    X = as_ensemble(X, "X")
    Z = as_ensemble(Z, "Z")
    Y = as_ensemble(Y, "Y")
    E = X.shape[1]
    if Z.shape[1] != E or Y.shape[1] != E:
        raise ValueError(f"ensemble sizes differ: X {X.shape}, Z {Z.shape}, Y {Y.shape}")
    if Z.shape != Y.shape:
        raise ValueError(f"Z {Z.shape} and Y {Y.shape} must have the same shape")

    Zd, W = _gain_terms(Z, Y, noise, normalized)
    Xd = X - X.mean(axis=1, keepdims=True)
    X_plus = X + Xd @ (Zd.T @ W)
    # Zd^T already has zero column sums, so the centring projector is implicit
    M = Zd.T @ W
    M[np.diag_indices(E)] += 1.0
    return X_plus, M


def _gain_terms(Z, Y, noise, normalized):
    E = Z.shape[1]
    Zd = Z - Z.mean(axis=1, keepdims=True)
    C = Zd @ Zd.T
    if normalized:
        C /= E - 1
    C += noise.covariance(Z.shape[0])
    W = _spd_solve(C, Y - Z, allow_jitter=noise.r > 0)
    if normalized:
        W /= E - 1
    return Zd, W


def update_matrix(Z, Y, noise: NoiseModel, normalized: bool = False) -> np.ndarray:
    """The ``E x E`` matrix ``M`` of :func:`analyze` without forming ``X+``."""
    Z = as_ensemble(Z, "Z")
    Y = as_ensemble(Y, "Y")
    if Z.shape != Y.shape:
        raise ValueError(f"Z {Z.shape} and Y {Y.shape} must have the same shape")
    Zd, W = _gain_terms(Z, Y, noise, normalized)
    M = Zd.T @ W
    M[np.diag_indices(Z.shape[1])] += 1.0
    return M


def apply_update(Q, M) -> np.ndarray:
    """Right-multiply an ensemble by an update matrix."""
    Q = np.asarray(Q, dtype=float)
    M = np.asarray(M, dtype=float)
    if Q.ndim != 2 or M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"expected Q (n, E) and square M, got {Q.shape} and {M.shape}")
    if Q.shape[1] != M.shape[0]:
        raise ValueError(f"Q has {Q.shape[1]} members but M is {M.shape[0]} x {M.shape[1]}")
    return Q @ M


def ensemble_stats(Q):
    """Per-row sample mean and unbiased variance."""
    Q = as_ensemble(Q)
    return Q.mean(axis=1), Q.var(axis=1, ddof=1)


def perturbed_observations(y, noise: NoiseModel, E: int, seed=None, rng=None) -> np.ndarray:
    """Replicate ``y`` into ``E`` columns with added ``N(0, r**2 I)`` noise.

    Pass either an integer ``seed`` or a ``numpy.random.Generator``.
    ``r == 0`` returns exact copies.
    """
    if E < 2:
        raise ValueError(f"E must be >= 2, got {E}")
    y = np.asarray(y, dtype=float).reshape(-1)
    Y = np.repeat(y[:, None], E, axis=1)
    if noise.r == 0:
        return Y
    if rng is None:
        rng = child_rng(0 if seed is None else seed, STREAM_OBS)
    return Y + noise.r * rng.standard_normal(Y.shape)
