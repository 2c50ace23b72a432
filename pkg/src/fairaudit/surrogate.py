"""Small differentiable scorer family over fixed feature vectors.

Two architectures: a logistic-linear scorer and a one-hidden-layer tanh
network with a sigmoid head. Parameters live in one flat float64 vector so
optimisers and serialisation stay trivial. Gradients are hand-derived and
checked against finite differences in the test suite.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit

from .errors import DimensionMismatch, InvalidArchitecture, NonDifferentiableObjective

SCORE_FLOOR = 1e-7  # scores clamped to [SCORE_FLOOR, 1 - SCORE_FLOOR]


@dataclass(frozen=True)
class Surrogate:
    """Scorer h_theta: architecture tag, input dimension, flat parameters."""

    arch: str  # "linear" or "mlp"
    d: int
    hidden: int  # 0 for linear
    params: np.ndarray

    def with_params(self, params: np.ndarray) -> "Surrogate":
        return replace(self, params=np.asarray(params, dtype=np.float64))


def param_count(arch: str, d: int, hidden: int = 0) -> int:
    if arch == "linear":
        return d + 1
    if arch == "mlp":
        return d * hidden + hidden + hidden + 1
    raise InvalidArchitecture(arch)


def parse_arch(spec: str) -> tuple[str, int]:
    """Parse an architecture spec string: "linear" or "mlp:<hidden>"."""
    if spec == "linear":
        return "linear", 0
    if spec.startswith("mlp"):
        _, _, width = spec.partition(":")
        h = int(width) if width else 16
        if h < 1:
            raise InvalidArchitecture(spec)
        return "mlp", h
    raise InvalidArchitecture(spec)


def init_surrogate(d: int, arch: str = "linear", seed: int = 0) -> Surrogate:
    """Deterministic seeded initialisation; linear weights scaled 1/sqrt(d)."""
    if d < 1:
        raise InvalidArchitecture(f"d must be >= 1, got {d}")
    kind, hidden = parse_arch(arch)
    rng = np.random.default_rng(seed)
    if kind == "linear":
        w = rng.standard_normal(d) / np.sqrt(d)
        params = np.concatenate([w, [0.0]])
    else:
        w1 = rng.standard_normal((hidden, d)) / np.sqrt(d)
        b1 = np.zeros(hidden)
        w2 = rng.standard_normal(hidden) / np.sqrt(hidden)
        b2 = np.zeros(1)
        params = np.concatenate([w1.ravel(), b1, w2, b2])
    return Surrogate(arch=kind, d=d, hidden=hidden, params=params)


def _unpack(h: Surrogate):
    p = h.params
    if h.arch == "linear":
        return p[: h.d], p[h.d]
    nh, d = h.hidden, h.d
    w1 = p[: nh * d].reshape(nh, d)
    b1 = p[nh * d : nh * d + nh]
    w2 = p[nh * d + nh : nh * d + 2 * nh]
    b2 = p[-1]
    return w1, b1, w2, b2


def _forward_cached(h: Surrogate, X: np.ndarray):
    """Batch forward pass returning clamped scores plus a backprop cache."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != h.d:
        raise DimensionMismatch(f"expected (n, {h.d}) features, got {X.shape}")
    if h.arch == "linear":
        w, b = _unpack(h)
        z = X @ w + b
        s = np.clip(expit(z), SCORE_FLOOR, 1.0 - SCORE_FLOOR)
        return s, (X, s)
    w1, b1, w2, b2 = _unpack(h)
    a = np.tanh(X @ w1.T + b1)
    z = a @ w2 + b2
    s = np.clip(expit(z), SCORE_FLOOR, 1.0 - SCORE_FLOOR)
    return s, (X, a, s)


def forward_batch(h: Surrogate, X: np.ndarray) -> np.ndarray:
    """Scores in (0, 1) for a feature matrix (n, d)."""
    return _forward_cached(h, X)[0]


def forward(h: Surrogate, features: np.ndarray) -> float:
    """Score a single feature vector."""
    x = np.asarray(features, dtype=np.float64).reshape(1, -1)
    return float(forward_batch(h, x)[0])


def _backprop(h: Surrogate, cache, g_scores: np.ndarray) -> np.ndarray:
    """Gradient of sum(g_scores * scores) with respect to the flat params."""
    if h.arch == "linear":
        X, s = cache
        gz = g_scores * s * (1.0 - s)
        return np.concatenate([gz @ X, [gz.sum()]])
    X, a, s = cache
    w1, b1, w2, b2 = _unpack(h)
    gz2 = g_scores * s * (1.0 - s)  # (n,)
    g_w2 = gz2 @ a
    g_b2 = gz2.sum()
    ga = np.outer(gz2, w2)  # (n, hidden)
    gz1 = ga * (1.0 - a * a)
    g_w1 = gz1.T @ X  # (hidden, d)
    g_b1 = gz1.sum(axis=0)
    return np.concatenate([g_w1.ravel(), g_b1, g_w2, [g_b2]])


def loss_and_grad(h: Surrogate, parts) -> tuple[float, np.ndarray]:
    """Value and exact parameter gradient of a composite objective.

    ``parts`` is either one ``(X, term)`` pair or a sequence of
    ``(X, term, weight)`` tuples, where each term exposes
    ``value_and_grad(scores) -> (value, d value / d scores)``. Terms are
    built from forward evaluations, smooth-AUC objectives and
    score-matching penalties.
    """
    if isinstance(parts, tuple) and len(parts) == 2 and not isinstance(parts[0], tuple):
        parts = [(parts[0], parts[1], 1.0)]
    total = 0.0
    grad = np.zeros_like(h.params)
    for entry in parts:
        if len(entry) == 2:
            X, term = entry
            weight = 1.0
        else:
            X, term, weight = entry
        if not hasattr(term, "value_and_grad"):
            raise NonDifferentiableObjective(
                f"objective term {type(term).__name__} lacks value_and_grad"
            )
        scores, cache = _forward_cached(h, X)
        val, g_scores = term.value_and_grad(scores)
        total += weight * val
        grad += weight * _backprop(h, cache, np.asarray(g_scores, dtype=np.float64))
    return float(total), grad


class ForwardObjective:
    """Sum of scores; useful for probing single-point gradients."""

    def value_and_grad(self, scores: np.ndarray) -> tuple[float, np.ndarray]:
        return float(scores.sum()), np.ones_like(scores)


# ---------------------------------------------------------------------------
# parameter snapshots


def save_params(h: Surrogate, path: str) -> None:
    """Flat parameter vector with an architecture header, for run resumption."""
    header = {"arch": h.arch, "d": h.d, "hidden": h.hidden}
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header) + "\n")
        for v in h.params:
            fh.write(repr(float(v)) + "\n")


def load_params(path: str) -> Surrogate:
    with open(path, "r", encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        params = np.array([float(line) for line in fh if line.strip()], dtype=np.float64)
    expected = param_count(header["arch"], header["d"], header["hidden"])
    if params.size != expected:
        raise InvalidArchitecture(
            f"parameter count {params.size} does not match header ({expected})"
        )
    return Surrogate(arch=header["arch"], d=header["d"], hidden=header["hidden"], params=params)


class Adam:
    """Minimal deterministic Adam optimiser over a flat parameter vector."""

    def __init__(self, n_params: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
        self.t += 1
        if mask is not None:
            grad = grad * mask
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        step = self.lr * mhat / (np.sqrt(vhat) + self.eps)
        if mask is not None:
            step = step * mask
        return params - step
