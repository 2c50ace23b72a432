"""Query-selection strategies: passive samplers plus the active scoring
pipeline (disagreement, GP-UCB mixing, distribution matching, MMR batches).

Everything here is deterministic given the caller's seed and selects only
unqueried ids; strategy state (schedules, the BO dataset) lives in the
harness and is threaded through per round.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit

from .errors import MissingScore, PoolExhausted, UnfittedGP
from .gp import GPModel, gp_predict
from .pool import AuditPool

EPS_DIV = 1e-6  # floor for queried-stratum proportions in ratio weights
Z_CLIP = 10.0  # logistic squash input clip


@dataclass(frozen=True)
class Schedule:
    """Warm-up-and-ramp schedule: zero before warmup, linear to max over
    ramp rounds, constant afterwards."""

    warmup_rounds: int
    ramp_rounds: int
    max_value: float

    def value(self, t: int) -> float:
        if t < self.warmup_rounds:
            return 0.0
        if self.ramp_rounds <= 0:
            return self.max_value
        frac = min(1.0, (t - self.warmup_rounds + 1) / self.ramp_rounds)
        return self.max_value * frac


@dataclass(frozen=True)
class SelectionScore:
    """Per-candidate informativeness with the regulariser breakdown."""

    id: str
    base: float
    acq01: float | None
    mix_weight: float
    dist_weight: float
    final: float
    phi: tuple[float, ...]


def _sanitize(values: np.ndarray) -> np.ndarray:
    return np.nan_to_num(np.asarray(values, dtype=np.float64), nan=0.0, posinf=0.0, neginf=0.0)


def unqueried_ids(pool: AuditPool, queried: Iterable[str]) -> list[str]:
    taken = set(queried)
    return [i for i in pool.ids if i not in taken]


# ---------------------------------------------------------------------------
# passive samplers


def select_random(pool: AuditPool, queried: Iterable[str], k: int, seed: int) -> list[str]:
    """Uniform without replacement from the unqueried ids."""
    candidates = unqueried_ids(pool, queried)
    if len(candidates) < k:
        raise PoolExhausted(f"need {k} unqueried ids, have {len(candidates)}")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(candidates), size=k, replace=False)
    return [candidates[i] for i in picks]


def proportional_quotas(sizes: Mapping, n: int) -> dict:
    """Ceil-proportional quotas over strata with largest-remainder trimming.

    Quotas start at ceil(n * size_s / total); if the ceils overshoot n, one
    is removed from each of the overshoot strata with the largest fractional
    remainder (ties broken by stratum key order).
    """
    total = sum(sizes.values())
    if total == 0 or n < 0:
        raise ValueError("need non-empty strata and n >= 0")
    keys = sorted(sizes.keys())
    exact = {s: n * sizes[s] / total for s in keys}
    quotas = {s: int(np.ceil(exact[s] - 1e-12)) for s in keys}
    overshoot = sum(quotas.values()) - n
    if overshoot > 0:
        fractional = [s for s in keys if exact[s] - np.floor(exact[s] + 1e-12) > 1e-12]
        fractional.sort(key=lambda s: (-(exact[s] - np.floor(exact[s])), keys.index(s)))
        for s in fractional[:overshoot]:
            quotas[s] -= 1
    return quotas


def select_stratified(
    pool: AuditPool,
    queried: Iterable[str],
    n: int,
    keys: str = "group_and_label",
    seed: int = 0,
) -> list[str]:
    """Proportional stratified sampling from the unqueried pool members.

    Quotas are computed on the full pool's stratum sizes; exhausted strata
    redistribute their deficit proportionally over the remaining strata.
    """
    taken = set(queried)
    if keys == "group":
        strata: dict = {0: [], 1: []}
        for ex in pool.examples:
            strata[ex.group].append(ex.id)
    elif keys == "group_and_label":
        strata = {s: list(ids) for s, ids in pool.strata_index.items() if ids}
    else:
        raise ValueError(f"unknown stratification keys {keys!r}")
    strata = {s: ids for s, ids in strata.items() if ids}
    available = {s: [i for i in ids if i not in taken] for s, ids in strata.items()}
    if sum(len(v) for v in available.values()) < n:
        raise PoolExhausted(f"need {n} unqueried ids")

    rng = np.random.default_rng(seed)
    allocation = {s: 0 for s in strata}
    eligible = {s: len(strata[s]) for s in strata}
    remaining = n
    while remaining > 0:
        quotas = proportional_quotas(eligible, remaining)
        progress = 0
        for s in sorted(quotas):
            cap = len(available[s]) - allocation[s]
            take = min(quotas[s], cap)
            allocation[s] += take
            progress += take
        remaining = n - sum(allocation.values())
        # Drop exhausted strata from the next proportional pass.
        eligible = {
            s: sz
            for s, sz in eligible.items()
            if len(available[s]) - allocation[s] > 0
        }
        if remaining > 0 and (progress == 0 or not eligible):
            raise PoolExhausted(f"strata exhausted with {remaining} ids outstanding")

    out: list[str] = []
    for s in sorted(allocation):
        ids = available[s]
        take = allocation[s]
        if take == 0:
            continue
        picks = rng.choice(len(ids), size=take, replace=False)
        out.extend(ids[i] for i in picks)
    return out


def select_power(
    pool: AuditPool,
    queried: Iterable[str],
    k: int,
    gamma_pow: float,
    scores_source: Mapping[str, float],
    seed: int,
) -> list[str]:
    """Weighted sampling without replacement with weights (p(1-p))^gamma.

    Zero-weight candidates are excluded unless every weight is zero, in
    which case the draw falls back to uniform.
    """
    if gamma_pow < 0:
        raise ValueError("gamma_pow must be >= 0")
    candidates = unqueried_ids(pool, queried)
    if len(candidates) < k:
        raise PoolExhausted(f"need {k} unqueried ids, have {len(candidates)}")
    p = _sanitize(np.array([scores_source[i] for i in candidates]))
    w = np.power(np.clip(p * (1.0 - p), 0.0, None), gamma_pow)
    if not np.any(w > 0):
        w = np.ones_like(w)
    else:
        keep = w > 0
        if keep.sum() < k:
            raise PoolExhausted(f"only {int(keep.sum())} candidates with positive weight")
        candidates = [c for c, m in zip(candidates, keep) if m]
        w = w[keep]
    # Exponential race: k smallest Exp(1)/w keys realise sequential
    # weighted sampling without replacement.
    rng = np.random.default_rng(seed)
    keys_ = rng.standard_exponential(len(candidates)) / w
    order = np.argsort(keys_, kind="stable")[:k]
    return [candidates[i] for i in order]


# ---------------------------------------------------------------------------
# active scoring


def score_disagreement(
    p_low: Mapping[str, float], p_up: Mapping[str, float], candidates: Sequence[str]
) -> dict[str, float]:
    """Absolute score gap between the two extremal hypotheses."""
    out = {}
    for c in candidates:
        if c not in p_low or c not in p_up:
            raise MissingScore(c)
        out[c] = abs(p_up[c] - p_low[c])
    return out


def build_features(dis: float, extra: Sequence | None = None) -> np.ndarray:
    """Acquisition feature vector [dis, extra...]; non-finite entries -> 0."""
    parts = [np.atleast_1d(np.asarray(dis, dtype=np.float64))]
    if extra is not None:
        for e in extra:
            parts.append(np.atleast_1d(np.asarray(e, dtype=np.float64)).ravel())
    return _sanitize(np.concatenate(parts))


def bo_combine(
    base: Mapping[str, float],
    gp: GPModel | None,
    phi: Mapping[str, np.ndarray],
    beta: float,
    schedule: Schedule,
    t: int,
) -> dict[str, float]:
    """Blend disagreement with a squashed GP-UCB acquisition score.

    acq = mean + beta * std is z-scored across the candidate pool, squashed
    through a clipped logistic into [0, 1], and mixed with the base signal
    using the warm-up-and-ramp weight for round t.
    """
    lam = schedule.value(t)
    ids = list(base.keys())
    if lam == 0.0:
        return {i: float(base[i]) for i in ids}
    if gp is None:
        raise UnfittedGP("BO mixing requested before any GP fit")
    X = np.vstack([phi[i] for i in ids])
    mean, var = gp_predict(gp, X)
    acq = _sanitize(mean + beta * np.sqrt(np.maximum(var, 0.0)))
    z = (acq - acq.mean()) / (acq.std() + 1e-8)
    acq01 = expit(np.clip(z, -Z_CLIP, Z_CLIP))
    out = {}
    for i, a in zip(ids, acq01):
        v = (1.0 - lam) * float(base[i]) + lam * float(a)
        out[i] = float(np.nan_to_num(v, nan=0.0, posinf=0.0, neginf=0.0))
    return out


def acquisition01(
    gp: GPModel, phi: Mapping[str, np.ndarray], ids: Sequence[str], beta: float
) -> dict[str, float]:
    """Squashed UCB acquisition alone (used by the sampling-only BO rule)."""
    X = np.vstack([phi[i] for i in ids])
    mean, var = gp_predict(gp, X)
    acq = _sanitize(mean + beta * np.sqrt(np.maximum(var, 0.0)))
    z = (acq - acq.mean()) / (acq.std() + 1e-8)
    return {i: float(a) for i, a in zip(ids, expit(np.clip(z, -Z_CLIP, Z_CLIP)))}


def distribution_weights(
    pool: AuditPool, queried: Sequence[str], alpha: float, cap: float = 5.0
) -> dict[tuple[int, int], float]:
    """Per-stratum multiplicative weights steering selection toward
    under-queried (g, y) cells: w = 1 + alpha * (clipped ratio - 1).

    The pool/queried proportion ratio is clipped to [1/cap, cap]; strata
    absent from the queried set get the maximum ratio.
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if cap < 1:
        raise ValueError("cap must be >= 1")
    n_pool = len(pool)
    n_q = len(queried)
    q_counts: dict[tuple[int, int], int] = {s: 0 for s in pool.strata_index}
    for i in queried:
        ex = pool.example(i)
        q_counts[(ex.group, ex.label)] += 1
    out = {}
    for s, ids in pool.strata_index.items():
        p_d = len(ids) / n_pool
        p_t = q_counts[s] / n_q if n_q > 0 else 0.0
        ratio = p_d / max(p_t, EPS_DIV)
        ratio = float(np.clip(ratio, 1.0 / cap, cap))
        out[s] = 1.0 + alpha * (ratio - 1.0)
    return out


def mmr_select(
    scores: Mapping[str, float],
    phi: Mapping[str, np.ndarray],
    k: int,
    gamma_div: float,
) -> list[str]:
    """Greedy maximal-marginal-relevance batch: each pick maximises
    score - gamma * max cosine similarity to the already selected items.

    Ties break by candidate order; zero feature vectors have similarity 0.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    ids = list(scores.keys())
    if len(ids) < k:
        raise PoolExhausted(f"need {k} candidates, have {len(ids)}")
    s = _sanitize(np.array([scores[i] for i in ids]))
    F = np.vstack([np.asarray(phi[i], dtype=np.float64) for i in ids])
    F = _sanitize(F)
    norms = np.linalg.norm(F, axis=1, keepdims=True)
    unit = np.divide(F, norms, out=np.zeros_like(F), where=norms > 0)

    selected: list[int] = []
    max_sim = np.zeros(len(ids))
    remaining = np.ones(len(ids), dtype=bool)
    for _ in range(k):
        adjusted = np.where(remaining, s - gamma_div * max_sim, -np.inf)
        pick = int(np.argmax(adjusted))  # argmax takes the first (id-order) tie
        selected.append(pick)
        remaining[pick] = False
        sim = unit @ unit[pick]
        max_sim = np.maximum(max_sim, sim)
    return [ids[i] for i in selected]


def top_k(scores: Mapping[str, float], k: int) -> list[str]:
    """Plain deterministic top-k by score; ties break by candidate order."""
    ids = list(scores.keys())
    if len(ids) < k:
        raise PoolExhausted(f"need {k} candidates, have {len(ids)}")
    vals = _sanitize(np.array([scores[i] for i in ids]))
    order = np.argsort(-vals, kind="stable")[:k]
    return [ids[i] for i in order]
