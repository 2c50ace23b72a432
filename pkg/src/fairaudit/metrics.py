"""Exact and smooth group-AUC gap estimators plus audit-evaluation metrics.

The exact estimator is the Mann-Whitney pair count with ties scored 0.5,
computed per protected group; the gap is ``delta = auc_g0 - auc_g1``.
The smooth variant replaces the pair indicator with a tempered sigmoid so
the gap becomes differentiable with respect to surrogate scores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

from .errors import (
    CurveTooShort,
    DegenerateGroup,
    EmptyPool,
    InvalidRange,
    InvertedInterval,
    MissingScore,
)
from .pool import AuditPool


@dataclass(frozen=True)
class GroupAUCResult:
    """Per-group AUCs and their difference; delta is None when either group
    has only one label class among the scored ids."""

    auc_g0: float | None
    auc_g1: float | None
    delta: float | None
    counts: dict[int, tuple[int, int]]  # group -> (positives m_g, negatives n_g)


@dataclass(frozen=True)
class ErrorCurve:
    """Absolute estimation error logged at strictly increasing query budgets."""

    points: tuple[tuple[int, float], ...]
    seed: int | None = None

    def __post_init__(self):
        qs = [q for q, _ in self.points]
        if any(b <= a for a, b in zip(qs, qs[1:])):
            raise ValueError("query budgets must be strictly increasing")


def auc_exact(pos_scores: np.ndarray, neg_scores: np.ndarray) -> float:
    """Mann-Whitney AUC with ties counted 0.5, via average ranks."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    m, n = pos.size, neg.size
    if m == 0 or n == 0:
        raise ValueError("need at least one positive and one negative")
    ranks = rankdata(np.concatenate([pos, neg]), method="average")
    u = ranks[:m].sum() - m * (m + 1) / 2.0
    return float(u / (m * n))


def group_auc(
    scores: Mapping[str, float], pool: AuditPool, ids: Sequence[str]
) -> GroupAUCResult:
    """Exact per-group AUC over the given id subset using the score map.

    Raises MissingScore if an id has no score. A group with only one label
    class yields an undefined AUC and a missing delta.
    """
    per_group: dict[int, tuple[list[float], list[float]]] = {0: ([], []), 1: ([], [])}
    for i in ids:
        if i not in scores:
            raise MissingScore(i)
        ex = pool.example(i)
        per_group[ex.group][0 if ex.label == 1 else 1].append(float(scores[i]))

    aucs: dict[int, float | None] = {}
    counts: dict[int, tuple[int, int]] = {}
    for g in (0, 1):
        pos, neg = per_group[g]
        counts[g] = (len(pos), len(neg))
        if len(pos) == 0 or len(neg) == 0:
            aucs[g] = None
        else:
            aucs[g] = auc_exact(np.array(pos), np.array(neg))
    delta = None
    if aucs[0] is not None and aucs[1] is not None:
        delta = aucs[0] - aucs[1]
    return GroupAUCResult(auc_g0=aucs[0], auc_g1=aucs[1], delta=delta, counts=counts)


def delta_auc_arrays(
    scores: np.ndarray, groups: np.ndarray, labels: np.ndarray
) -> float:
    """Exact delta over dense arrays; both groups must have both classes."""
    vals = []
    for g in (0, 1):
        mask = groups == g
        pos = scores[mask & (labels == 1)]
        neg = scores[mask & (labels == 0)]
        if pos.size == 0 or neg.size == 0:
            raise DegenerateGroup(g)
        vals.append(auc_exact(pos, neg))
    return vals[0] - vals[1]


# ---------------------------------------------------------------------------
# smooth (differentiable) delta AUC over score vectors


class GroupPairs:
    """Positive/negative index structure for one pool, reused across calls."""

    def __init__(self, groups: np.ndarray, labels: np.ndarray):
        self.idx: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        for g in (0, 1):
            mask = np.asarray(groups) == g
            pos = np.flatnonzero(mask & (np.asarray(labels) == 1))
            neg = np.flatnonzero(mask & (np.asarray(labels) == 0))
            if pos.size == 0 or neg.size == 0:
                raise DegenerateGroup(g)
            self.idx[g] = (pos, neg)


def smooth_delta_from_scores(
    scores: np.ndarray,
    pairs: GroupPairs,
    tau: float,
    want_grad: bool = False,
    dtype=np.float64,
) -> float | tuple[float, np.ndarray]:
    """Difference of per-group mean sigmoid((s+ - s-)/tau) over all
    within-group positive-negative pairs; optionally also d(delta)/d(scores).

    ``dtype`` controls the pairwise working precision; optimisation loops use
    float32 for speed while evaluation and tests stay at float64.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    work = np.asarray(scores, dtype=dtype)
    grad = np.zeros(work.shape[0], dtype=np.float64) if want_grad else None
    inv_tau = dtype(1.0 / tau)
    deltas = []
    for g, sign in ((0, 1.0), (1, -1.0)):
        pos, neg = pairs.idx[g]
        diff = (work[pos, None] - work[None, neg]) * inv_tau
        sig = expit(diff)
        mn = pos.size * neg.size
        deltas.append(sign * float(sig.mean(dtype=np.float64)))
        if want_grad:
            w = sig * (dtype(1.0) - sig)
            scale = sign / (tau * mn)
            # pos/neg index arrays are duplicate-free, so plain fancy
            # indexing accumulates correctly and avoids np.add.at overhead
            grad[pos] += w.sum(axis=1, dtype=np.float64) * scale
            grad[neg] -= w.sum(axis=0, dtype=np.float64) * scale
    value = float(deltas[0] + deltas[1])
    if want_grad:
        return value, grad
    return value


def smooth_delta_auc(h, pool: AuditPool, tau: float) -> float:
    """Smooth delta of a surrogate over the full pool (value only)."""
    from . import surrogate as sg

    scores = sg.forward_batch(h, pool.features)
    pairs = GroupPairs(pool.groups, pool.labels)
    return smooth_delta_from_scores(scores, pairs, tau)


class SmoothDeltaObjective:
    """Score-space objective term: sign * smooth delta over fixed strata.

    ``sign=+1`` gives the gap itself; ``sign=-1`` its negation (for
    maximisation via a minimiser). Exposes ``value_and_grad(scores)``.
    """

    def __init__(
        self,
        groups: np.ndarray,
        labels: np.ndarray,
        tau: float,
        sign: float = 1.0,
        dtype=np.float64,
    ):
        self.pairs = GroupPairs(groups, labels)
        self.tau = float(tau)
        self.sign = float(sign)
        self.dtype = dtype

    def value_and_grad(self, scores: np.ndarray) -> tuple[float, np.ndarray]:
        if self.dtype == np.float32:
            val, grad = self._fast_value_and_grad(scores)
        else:
            val, grad = smooth_delta_from_scores(
                scores, self.pairs, self.tau, want_grad=True, dtype=self.dtype
            )
        return self.sign * val, self.sign * grad

    def _fast_value_and_grad(self, scores: np.ndarray) -> tuple[float, np.ndarray]:
        """Buffered float32 pairwise pass; identical math, reused temporaries."""
        if not hasattr(self, "_buffers"):
            self._buffers = {}
            for g in (0, 1):
                pos, neg = self.pairs.idx[g]
                self._buffers[g] = (
                    np.empty((pos.size, neg.size), dtype=np.float32),
                    np.empty((pos.size, neg.size), dtype=np.float32),
                )
        s32 = np.asarray(scores, dtype=np.float32)
        inv_tau = np.float32(1.0 / self.tau)
        one = np.float32(1.0)
        grad = np.zeros(s32.shape[0], dtype=np.float64)
        value = 0.0
        for g, sign in ((0, 1.0), (1, -1.0)):
            pos, neg = self.pairs.idx[g]
            buf, tmp = self._buffers[g]
            np.subtract(s32[pos, None], s32[None, neg], out=buf)
            np.multiply(buf, inv_tau, out=buf)
            expit(buf, out=buf)
            mn = pos.size * neg.size
            value += sign * float(buf.sum(dtype=np.float64)) / mn
            # w = sig * (1 - sig), in place via the second buffer
            np.subtract(one, buf, out=tmp)
            np.multiply(buf, tmp, out=buf)
            scale = sign / (self.tau * mn)
            grad[pos] += buf.sum(axis=1, dtype=np.float64) * scale
            grad[neg] -= buf.sum(axis=0, dtype=np.float64) * scale
        return value, grad


class ScoreMatchObjective:
    """Mean squared difference between scores and fixed targets."""

    def __init__(self, targets: np.ndarray):
        self.targets = np.asarray(targets, dtype=np.float64)

    def value_and_grad(self, scores: np.ndarray) -> tuple[float, np.ndarray]:
        resid = scores - self.targets
        n = resid.size
        return float(resid @ resid / n), (2.0 / n) * resid


# ---------------------------------------------------------------------------
# audit-evaluation metrics


def auec(curve: ErrorCurve, t_max: int) -> float:
    """Cumulative mean error over budgets 1..t_max under step interpolation.

    Each logged point (q_i, e_i) holds from q_i until the next logged budget;
    the first value is extended back to t=1 (the seed batch arrives at once).
    Raises CurveTooShort when t_max exceeds the last logged budget.
    """
    if not curve.points:
        raise CurveTooShort("empty curve")
    qs = np.array([q for q, _ in curve.points], dtype=np.int64)
    es = np.array([e for _, e in curve.points], dtype=np.float64)
    if t_max > qs[-1]:
        raise CurveTooShort(f"curve ends at {qs[-1]} < t_max={t_max}")
    if t_max < 1:
        raise ValueError("t_max must be >= 1")
    total = 0.0
    for i, (q, e) in enumerate(zip(qs, es)):
        # right-continuous step: value e_i holds on [q_i, q_{i+1} - 1];
        # the first value also covers budgets before the first log.
        lo = 1 if i == 0 else int(q)
        hi = int(qs[i + 1]) - 1 if i + 1 < len(qs) else t_max
        hi = min(hi, t_max)
        if hi >= lo:
            total += e * (hi - lo + 1)
        if hi >= t_max:
            break
    return float(total)


def queries_to_epsilon(mean_curve: ErrorCurve, epsilon: float) -> int | None:
    """First logged budget at which the mean error is <= epsilon, else None."""
    if epsilon <= 0:
        raise InvalidRange("epsilon must be positive")
    for q, e in mean_curve.points:
        if e <= epsilon:
            return int(q)
    return None


def bound_violation(interval: tuple[float, float], truth: float) -> float:
    """Distance by which truth falls outside [mu_min, mu_max]; 0 if covered."""
    mu_min, mu_max = interval
    if mu_min > mu_max:
        raise InvertedInterval(f"[{mu_min}, {mu_max}]")
    return float(max(0.0, mu_min - truth, truth - mu_max))


def mcdiarmid_sample_size(
    epsilon: float, delta: float, balanced: bool = True
) -> int | Callable[[int, int], bool]:
    """Closed-form passive sample size for an epsilon-accurate gap estimate.

    Balanced case: ceil((8/eps^2) * ln(4/delta)) examples per group-label
    cell. Unbalanced case: returns a predicate checking
    m*n / (2*(m+n)) >= (2/eps^2) * ln(4/delta) for given per-group counts.
    """
    if not (0.0 < epsilon < 1.0) or not (0.0 < delta < 1.0):
        raise InvalidRange("epsilon and delta must lie in (0, 1)")
    log_term = math.log(4.0 / delta)
    if balanced:
        return int(math.ceil((8.0 / epsilon**2) * log_term))
    threshold = (2.0 / epsilon**2) * log_term

    def satisfies(m_g: int, n_g: int) -> bool:
        if m_g <= 0 or n_g <= 0:
            return False
        return (m_g * n_g) / (2.0 * (m_g + n_g)) >= threshold

    return satisfies


def mean_error_curve(curves: Sequence[ErrorCurve]) -> ErrorCurve:
    """Across-seed mean curve at the common logged budgets.

    All curves must be logged at identical budgets (same batch schedule);
    rounds where a seed's error is missing are skipped in that budget's mean.
    """
    if not curves:
        raise EmptyPool("no curves")
    budgets = [q for q, _ in curves[0].points]
    for c in curves[1:]:
        if [q for q, _ in c.points] != budgets:
            raise ValueError("curves are logged at different budgets")
    points = []
    for j, q in enumerate(budgets):
        vals = [c.points[j][1] for c in curves if not math.isnan(c.points[j][1])]
        points.append((q, float(np.mean(vals)) if vals else float("nan")))
    return ErrorCurve(points=tuple(points), seed=None)
