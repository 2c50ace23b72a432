"""Constrained empirical risk minimisation over the score-matching version
space: extremal hypotheses and the certificate interval for the group gap.

Each direction runs an augmented-Lagrangian loop: primal Adam steps on the
(sign-flipped) smooth gap over the full pool plus a squared-hinge penalty on
the per-example score-matching constraints |h(x_i) - s*_i| <= lambda, with
per-constraint multipliers updated by dual ascent at epoch boundaries. The
best feasible-so-far iterate wins (smallest max violation, ties broken by
the more extreme objective).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import surrogate as sg
from .errors import DegenerateGroup
from .metrics import GroupPairs, SmoothDeltaObjective, delta_auc_arrays, smooth_delta_from_scores
from .pool import AuditPool


@dataclass(frozen=True, eq=False)
class QueriedSet:
    """Ordered (id, black-box score) pairs with round boundary cut indices.

    ``features`` optionally carries the dense feature rows for the entries
    (one row per entry, in order) so the solver never re-indexes the pool.
    """

    entries: tuple[tuple[str, float], ...]
    round_cuts: tuple[int, ...] = ()
    features: np.ndarray | None = None

    def __post_init__(self):
        ids = [i for i, _ in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("queried set contains duplicate ids")
        for _, s in self.entries:
            if not (0.0 <= s <= 1.0):
                raise ValueError(f"score outside [0, 1]: {s}")
        if self.features is not None and self.features.shape[0] != len(self.entries):
            raise ValueError("features must have one row per entry")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(i for i, _ in self.entries)

    @property
    def scores(self) -> np.ndarray:
        return np.array([s for _, s in self.entries], dtype=np.float64)

    def extend(
        self, batch: Sequence[tuple[str, float]], batch_features: np.ndarray | None = None
    ) -> "QueriedSet":
        feats = None
        if self.features is not None and batch_features is not None:
            feats = np.vstack([self.features, batch_features])
        return QueriedSet(
            entries=self.entries + tuple(batch),
            round_cuts=self.round_cuts + (len(self.entries),),
            features=feats,
        )

    def score_map(self) -> dict[str, float]:
        return {i: s for i, s in self.entries}


def queried_set_from_pool(
    pool: AuditPool, ids: Sequence[str], scores: Sequence[float]
) -> QueriedSet:
    """Build a feature-carrying queried set for pool members."""
    rows = pool.rows(ids)
    return QueriedSet(
        entries=tuple(zip(ids, (float(s) for s in scores))),
        features=pool.features[rows],
    )


@dataclass(frozen=True)
class CermSettings:
    """Solver configuration; defaults follow the shipped audit recipe."""

    lambda_tol: float = 0.01
    tau: float = 0.05
    epochs: int = 8
    batch: int = 512
    arch: str = "mlp:32"
    learning_rate: float | None = None  # per-architecture default when None
    penalty_init: float = 10.0
    penalty_cap: float = 1e4
    warmup_epochs: int = 2   # seed-round score-match fit
    retrain_epochs: int = 4  # per-round score-match refresh before solving

    def resolve_lr(self) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        kind, _ = sg.parse_arch(self.arch)
        return 0.08 if kind == "linear" else 0.03


@dataclass(frozen=True)
class Certificate:
    """Extremal-hypothesis interval for the group gap at one audit round."""

    mu_min: float
    mu_max: float
    midpoint: float
    width: float
    feasibility_gap_min: float
    feasibility_gap_max: float
    round: int
    mu_min_exact: float = float("nan")
    mu_max_exact: float = float("nan")

    def __post_init__(self):
        if self.mu_min > self.mu_max:
            raise ValueError("mu_min must not exceed mu_max")


@dataclass(frozen=True)
class ExtremalResult:
    surrogate: sg.Surrogate
    mu: float
    gap: float
    mu_exact: float


@dataclass(frozen=True)
class CertificateOutcome:
    certificate: Certificate
    h_min: sg.Surrogate
    h_max: sg.Surrogate


def feasibility_check(h: sg.Surrogate, S: QueriedSet, lambda_tol: float) -> float:
    """max_i max(0, |h(x_i) - s*_i| - lambda); 0 means h is in the version
    space. The queried set must carry its feature rows."""
    if S.features is None:
        raise ValueError("queried set has no feature rows; build it via queried_set_from_pool")
    scores = sg.forward_batch(h, S.features)
    return float(np.max(np.maximum(0.0, np.abs(scores - S.scores) - lambda_tol), initial=0.0))


class _PenaltyTerm:
    """Squared-hinge score-matching penalty with folded-in multipliers."""

    def __init__(self, targets: np.ndarray, lambda_tol: float, rho: float, mults: np.ndarray):
        self.targets = targets
        self.lambda_tol = lambda_tol
        self.rho = rho
        self.mults = mults

    def value_and_grad(self, scores: np.ndarray) -> tuple[float, np.ndarray]:
        resid = scores - self.targets
        g = np.abs(resid) - self.lambda_tol
        shifted = np.maximum(0.0, g + self.mults / self.rho)
        val = 0.5 * self.rho * float(shifted @ shifted)
        grad = self.rho * shifted * np.sign(resid)
        return val, grad


def _score_match_steps(
    h: sg.Surrogate,
    X: np.ndarray,
    targets: np.ndarray,
    epochs: int,
    lr: float,
    mask: np.ndarray | None,
) -> sg.Surrogate:
    """Plain MSE fit of queried scores, used for warm starts only."""
    from .metrics import ScoreMatchObjective

    if epochs <= 0:
        return h
    term = ScoreMatchObjective(targets)
    opt = sg.Adam(h.params.size, lr=lr)
    params = h.params.copy()
    for _ in range(epochs):
        _, grad = sg.loss_and_grad(h.with_params(params), (X, term))
        params = opt.step(params, grad, mask)
    return h.with_params(params)


def solve_extremal(
    direction: str,
    S: QueriedSet,
    pool: AuditPool,
    settings: CermSettings,
    init: sg.Surrogate,
    seed: int = 0,
    trainable_mask: np.ndarray | None = None,
) -> ExtremalResult:
    """Extremise the smooth gap over hypotheses matching the queried scores.

    Returns the best feasible-so-far hypothesis (smallest max constraint
    violation; ties broken by the more extreme objective), its smooth gap
    evaluated over the full pool, the feasibility gap, and the exact-AUC
    evaluation of the same hypothesis. An infeasible start is not an error;
    the gap is simply reported.
    """
    if direction not in ("min", "max"):
        raise ValueError(f"direction must be 'min' or 'max', got {direction!r}")
    if len(S) == 0:
        raise ValueError("queried set must be non-empty")
    if settings.lambda_tol <= 0:
        raise ValueError("lambda must be positive")

    pairs = GroupPairs(pool.groups, pool.labels)  # raises DegenerateGroup
    sign = 1.0 if direction == "min" else -1.0
    # float32 pairwise work inside the optimisation loop; reported values
    # are recomputed at float64 on the final hypothesis
    objective = SmoothDeltaObjective(
        pool.groups, pool.labels, settings.tau, sign=sign, dtype=np.float32
    )
    X_S = S.features if S.features is not None else pool.features[pool.rows(S.ids)]
    targets = S.scores
    X_P = pool.features
    n_s = len(S)
    lr = settings.resolve_lr()

    rng = np.random.default_rng(seed)
    rho = settings.penalty_init
    mults = np.zeros(n_s)

    def constraint_gap(params: np.ndarray) -> tuple[np.ndarray, float]:
        s_q = sg.forward_batch(init.with_params(params), X_S)
        viol = np.abs(s_q - targets) - settings.lambda_tol
        return viol, float(np.max(np.maximum(0.0, viol), initial=0.0))

    params = init.params.copy()
    _, best_gap = constraint_gap(params)
    init_scores = sg.forward_batch(init.with_params(params), X_P)
    # best_obj holds the minimised quantity sign * smooth-gap
    best_obj = sign * smooth_delta_from_scores(init_scores, pairs, settings.tau, dtype=np.float32)
    best_params = params.copy()
    prev_gap = best_gap

    opt = sg.Adam(params.size, lr=lr)
    batch_size = max(1, min(settings.batch, n_s))
    for _epoch in range(settings.epochs):
        order = rng.permutation(n_s)
        last_obj = best_obj
        for start in range(0, n_s, batch_size):
            idx = order[start : start + batch_size]
            h_cur = init.with_params(params)
            obj_val, obj_grad = sg.loss_and_grad(h_cur, (X_P, objective))
            penalty = _PenaltyTerm(targets[idx], settings.lambda_tol, rho, mults[idx])
            scale = n_s / idx.size
            _, pen_grad = sg.loss_and_grad(h_cur, (X_S[idx], penalty))
            params = opt.step(params, obj_grad + scale * pen_grad, trainable_mask)
            last_obj = obj_val

        # epoch end: dual ascent on the full constraint set; the objective
        # value of the final step doubles as the tie-break proxy
        viol, gap = constraint_gap(params)
        better = gap < best_gap - 1e-12 or (
            gap <= best_gap + 1e-12 and last_obj < best_obj - 1e-12
        )
        if better:
            best_obj, best_gap, best_params = last_obj, gap, params.copy()
        mults = np.maximum(0.0, mults + rho * viol)
        # escalate the penalty when the gap fails to shrink 10% per epoch
        if gap > 0.9 * prev_gap and gap > 0:
            rho = min(2.0 * rho, settings.penalty_cap)
        prev_gap = gap

    best = init.with_params(best_params)
    pool_scores = sg.forward_batch(best, X_P)
    mu_final = smooth_delta_from_scores(pool_scores, pairs, settings.tau)
    mu_exact = delta_auc_arrays(pool_scores, pool.groups, pool.labels)
    return ExtremalResult(surrogate=best, mu=mu_final, gap=best_gap, mu_exact=mu_exact)


def certificate(
    S: QueriedSet,
    pool: AuditPool,
    settings: CermSettings,
    warm: tuple[sg.Surrogate, sg.Surrogate] | None = None,
    seed: int = 0,
    round_index: int = 0,
    trainable_mask: np.ndarray | None = None,
) -> CertificateOutcome:
    """Run both extremal solves and assemble the interval.

    ``warm`` carries the previous round's (min, max) solutions; fresh
    seeded surrogates (plus a short score-match warm-up) are used otherwise.
    Results are ordered so mu_min <= mu_max even when the non-convex solves
    cross; feasibility gaps ride along and are never hidden.
    """
    X_S = S.features if S.features is not None else pool.features[pool.rows(S.ids)]
    targets = S.scores
    lr = settings.resolve_lr()

    inits: dict[str, sg.Surrogate] = {}
    for j, direction in enumerate(("min", "max")):
        if warm is not None:
            h0 = warm[j]
            h0 = _score_match_steps(h0, X_S, targets, settings.retrain_epochs, lr, trainable_mask)
        else:
            h0 = sg.init_surrogate(pool.d, settings.arch, seed=seed * 2 + j)
            h0 = _score_match_steps(h0, X_S, targets, settings.warmup_epochs, lr, trainable_mask)
        inits[direction] = h0

    res_min = solve_extremal("min", S, pool, settings, inits["min"], seed=seed * 2, trainable_mask=trainable_mask)
    res_max = solve_extremal("max", S, pool, settings, inits["max"], seed=seed * 2 + 1, trainable_mask=trainable_mask)

    lo, hi = res_min, res_max
    if lo.mu > hi.mu:
        lo, hi = hi, lo
    cert = Certificate(
        mu_min=lo.mu,
        mu_max=hi.mu,
        midpoint=0.5 * (lo.mu + hi.mu),
        width=hi.mu - lo.mu,
        feasibility_gap_min=lo.gap,
        feasibility_gap_max=hi.gap,
        round=round_index,
        mu_min_exact=lo.mu_exact,
        mu_max_exact=hi.mu_exact,
    )
    return CertificateOutcome(certificate=cert, h_min=lo.surrogate, h_max=hi.surrogate)
