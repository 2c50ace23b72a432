"""Exact Gaussian-process regression over acquisition feature vectors.

Small, dense, deterministic: targets are z-scored per fit (zero prior mean
in standardised space), the kernel matrix is Cholesky-factorised with an
escalating jitter, and predictions come back in raw target units.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .errors import DimensionMismatch, SingularKernel

JITTER_START = 1e-8
JITTER_MAX = 1e-2


def _pairwise_dists(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    a2 = (A * A).sum(axis=1)[:, None]
    b2 = (B * B).sum(axis=1)[None, :]
    sq = np.maximum(a2 + b2 - 2.0 * (A @ B.T), 0.0)
    return np.sqrt(sq)


def kernel_matrix(
    A: np.ndarray, B: np.ndarray, kind: str, lengthscale: float, signal_variance: float
) -> np.ndarray:
    r = _pairwise_dists(A, B) / lengthscale
    if kind == "rbf":
        return signal_variance * np.exp(-0.5 * r * r)
    if kind == "matern52":
        c = np.sqrt(5.0) * r
        return signal_variance * (1.0 + c + c * c / 3.0) * np.exp(-c)
    raise ValueError(f"unknown kernel {kind!r}")


def median_heuristic(X: np.ndarray) -> float:
    """Median pairwise distance; falls back to 1.0 for degenerate data."""
    n = X.shape[0]
    if n < 2:
        return 1.0
    d = _pairwise_dists(X, X)[np.triu_indices(n, k=1)]
    positive = d[d > 0]
    if positive.size == 0:
        return 1.0
    return float(np.median(positive))


@dataclass(frozen=True)
class GPModel:
    train_inputs: np.ndarray
    train_targets: np.ndarray
    kernel: str
    lengthscale: float
    signal_variance: float
    noise_variance: float
    y_mean: float
    y_std: float
    jitter: float
    chol: tuple = field(repr=False, default=None)
    alpha: np.ndarray = field(repr=False, default=None)

    @property
    def n_train(self) -> int:
        return self.train_inputs.shape[0]

    @property
    def prior_variance(self) -> float:
        """Prior predictive variance in raw target units."""
        return self.signal_variance * self.y_std**2


def fit_gp(
    X: np.ndarray,
    y: np.ndarray,
    kernel: str = "matern52",
    lengthscale: float | None = None,
    signal_variance: float = 1.0,
    noise_variance: float = 1e-4,
) -> GPModel:
    """Fit an exact GP; jitter escalates x10 from 1e-8 until the Cholesky
    factorisation succeeds, raising SingularKernel past 1e-2.

    Targets are standardised per fit (population std); with a single
    training point no centering or scaling is applied, so the textbook 1x1
    posterior algebra holds verbatim.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if X.shape[0] == 0:
        raise ValueError("need at least one training point")
    if X.shape[0] != y.shape[0]:
        raise DimensionMismatch(f"{X.shape[0]} inputs vs {y.shape[0]} targets")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("inputs must be sanitised upstream; found non-finite entries")

    if X.shape[0] >= 2:
        y_mean = float(y.mean())
        std = float(y.std())
        y_std = std if std > 0 else 1.0
    else:
        y_mean, y_std = 0.0, 1.0
    z = (y - y_mean) / y_std

    if lengthscale is None:
        lengthscale = median_heuristic(X)
    K = kernel_matrix(X, X, kernel, lengthscale, signal_variance)

    jitter = JITTER_START
    while True:
        try:
            chol = cho_factor(
                K + (noise_variance + jitter) * np.eye(X.shape[0]), lower=True
            )
            break
        except np.linalg.LinAlgError:
            jitter *= 10.0
            if jitter > JITTER_MAX:
                raise SingularKernel(
                    f"kernel matrix not positive definite up to jitter {JITTER_MAX}"
                ) from None
    alpha = cho_solve(chol, z)
    return GPModel(
        train_inputs=X,
        train_targets=y,
        kernel=kernel,
        lengthscale=float(lengthscale),
        signal_variance=float(signal_variance),
        noise_variance=float(noise_variance),
        y_mean=y_mean,
        y_std=y_std,
        jitter=jitter,
        chol=chol,
        alpha=alpha,
    )


def gp_predict(model: GPModel, X_star: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and (latent) variance at test inputs, raw target units.

    Variances are clamped at zero after the numerical subtraction.
    """
    X_star = np.atleast_2d(np.asarray(X_star, dtype=np.float64))
    if X_star.shape[1] != model.train_inputs.shape[1]:
        raise DimensionMismatch(
            f"test dim {X_star.shape[1]} vs train dim {model.train_inputs.shape[1]}"
        )
    K_star = kernel_matrix(
        X_star, model.train_inputs, model.kernel, model.lengthscale, model.signal_variance
    )
    mean_z = K_star @ model.alpha
    L = model.chol[0]
    v = solve_triangular(L, K_star.T, lower=True)
    var_z = model.signal_variance - (v * v).sum(axis=0)
    var_z = np.maximum(var_z, 0.0)
    mean = model.y_mean + model.y_std * mean_z
    var = var_z * model.y_std**2
    return mean, var
