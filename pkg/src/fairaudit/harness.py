"""Audit loop, synthetic benchmark generator, multi-seed experiment runner.

A run is deterministic given (config, seed): every random draw comes from a
generator keyed by (purpose, round, seed), black-box scorers are
deterministic in their construction, and logs serialise floats with
shortest round-trip repr.
"""

from __future__ import annotations

import csv
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit, ndtri
from scipy.stats import pearsonr, spearmanr

from . import surrogate as sg
from .blackbox import (
    BlackBoxScorer,
    PlantedBiasConfig,
    PlantedBiasScorer,
    RemoteScorer,
    TableScorer,
    flip_direction,
)
from .cerm import CermSettings, QueriedSet, certificate, queried_set_from_pool
from .errors import ConfigError, InfeasibleCalibration, PoolExhausted
from .metrics import (
    ErrorCurve,
    auec,
    bound_violation,
    delta_auc_arrays,
    group_auc,
    mean_error_curve,
    queries_to_epsilon,
)
from .pool import AuditExample, AuditPool, build_pool, dump_pool, load_pool
from .selection import (
    Schedule,
    acquisition01,
    bo_combine,
    build_features,
    distribution_weights,
    mmr_select,
    score_disagreement,
    select_power,
    select_random,
    select_stratified,
    top_k,
    unqueried_ids,
)
from .gp import fit_gp

STRATEGIES = (
    "random",
    "stratified",
    "power",
    "cerm_stratified",
    "bafa_disagreement",
    "bafa_bo",
    "bo_only",
)
CERTIFICATE_STRATEGIES = ("cerm_stratified", "bafa_disagreement", "bafa_bo")


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class GeneratorSpec:
    """Synthetic pool + paired scorer recipe.

    Features are a Gaussian mixture with one mean per (g, y) cell: labels
    separate along a class direction (per-group separation ``class_sep``),
    groups along an orthogonal offset direction. The paired scorer is a
    sigmoid-linear scorer aligned with the class direction; its flip region
    lives on a third direction orthogonal to both, so a flipped fraction of
    a group degrades that group's ranking without moving its features.
    """

    n: int = 5000
    d: int = 8
    group_balance: float = 0.5
    label_rates: tuple[float, float] = (0.35, 0.35)
    seed: int = 2024
    class_sep: tuple[float, float] = (1.2, 1.2)
    group_offset: float = 3.0
    weight_scale: float = 2.5
    noise_scale: float = 0.0
    flip_prob_group0: float = 0.0
    flip_prob_group1: float | None = None  # None -> calibrate into target_band
    target_band: tuple[float, float] | None = (0.10, 0.18)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "d": self.d,
            "group_balance": self.group_balance,
            "label_rates": list(self.label_rates),
            "seed": self.seed,
            "class_sep": list(self.class_sep),
            "group_offset": self.group_offset,
            "weight_scale": self.weight_scale,
            "noise_scale": self.noise_scale,
            "flip_prob_group0": self.flip_prob_group0,
            "flip_prob_group1": self.flip_prob_group1,
            "target_band": list(self.target_band) if self.target_band else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        return cls(
            n=int(d["n"]),
            d=int(d["d"]),
            group_balance=float(d["group_balance"]),
            label_rates=tuple(d["label_rates"]),
            seed=int(d["seed"]),
            class_sep=tuple(d.get("class_sep", (1.2, 1.2))),
            group_offset=float(d.get("group_offset", 3.0)),
            weight_scale=float(d.get("weight_scale", 2.5)),
            noise_scale=float(d.get("noise_scale", 0.0)),
            flip_prob_group0=float(d.get("flip_prob_group0", 0.0)),
            flip_prob_group1=(
                None if d.get("flip_prob_group1") is None else float(d["flip_prob_group1"])
            ),
            target_band=(tuple(d["target_band"]) if d.get("target_band") else None),
        )


@dataclass(frozen=True)
class PoolSource:
    kind: str  # "csv" | "jsonl" | "synthetic"
    path: str | None = None
    generator: GeneratorSpec | None = None

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "path": self.path,
            "generator": self.generator.to_dict() if self.generator else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PoolSource":
        gen = d.get("generator")
        return cls(
            kind=d["kind"],
            path=d.get("path"),
            generator=GeneratorSpec.from_dict(gen) if gen else None,
        )


@dataclass(frozen=True)
class ScorerSpec:
    kind: str  # "planted" | "remote" | "cached"
    planted: PlantedBiasConfig | None = None
    endpoint: str | None = None
    scores_csv: str | None = None
    cache_path: str | None = None
    timeout: float = 30.0
    max_batch: int = 256
    retries: int = 1

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "planted": self.planted.to_dict() if self.planted else None,
            "endpoint": self.endpoint,
            "scores_csv": self.scores_csv,
            "cache_path": self.cache_path,
            "timeout": self.timeout,
            "max_batch": self.max_batch,
            "retries": self.retries,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScorerSpec":
        planted = d.get("planted")
        return cls(
            kind=d["kind"],
            planted=PlantedBiasConfig.from_dict(planted) if planted else None,
            endpoint=d.get("endpoint"),
            scores_csv=d.get("scores_csv"),
            cache_path=d.get("cache_path"),
            timeout=float(d.get("timeout", 30.0)),
            max_batch=int(d.get("max_batch", 256)),
            retries=int(d.get("retries", 1)),
        )


@dataclass(frozen=True)
class SelectionSettings:
    beta: float = 1.0
    gamma_div: float = 0.2
    gamma_pow: float = 1.0
    candidate_pool: int = 1000
    mix_schedule: Schedule = Schedule(warmup_rounds=3, ramp_rounds=5, max_value=0.5)
    alpha_schedule: Schedule = Schedule(warmup_rounds=1, ramp_rounds=3, max_value=2.0)
    ratio_cap: float = 5.0
    stratify_keys: str = "group_and_label"
    power_mode: str = "surrogate"  # "surrogate" | "oracle" (synthetic only)
    gp_kernel: str = "matern52"
    gp_noise: float = 1e-4
    bo_quantile: float | None = None  # optional high-disagreement gate, off by default
    include_example_features: bool = True

    def to_dict(self) -> dict:
        return {
            "beta": self.beta,
            "gamma_div": self.gamma_div,
            "gamma_pow": self.gamma_pow,
            "candidate_pool": self.candidate_pool,
            "mix_schedule": [self.mix_schedule.warmup_rounds, self.mix_schedule.ramp_rounds, self.mix_schedule.max_value],
            "alpha_schedule": [self.alpha_schedule.warmup_rounds, self.alpha_schedule.ramp_rounds, self.alpha_schedule.max_value],
            "ratio_cap": self.ratio_cap,
            "stratify_keys": self.stratify_keys,
            "power_mode": self.power_mode,
            "gp_kernel": self.gp_kernel,
            "gp_noise": self.gp_noise,
            "bo_quantile": self.bo_quantile,
            "include_example_features": self.include_example_features,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SelectionSettings":
        def sched(v):
            return Schedule(warmup_rounds=int(v[0]), ramp_rounds=int(v[1]), max_value=float(v[2]))

        kwargs = dict(d)
        if "mix_schedule" in kwargs:
            kwargs["mix_schedule"] = sched(kwargs["mix_schedule"])
        if "alpha_schedule" in kwargs:
            kwargs["alpha_schedule"] = sched(kwargs["alpha_schedule"])
        return cls(**kwargs)


@dataclass(frozen=True)
class AuditConfig:
    pool: PoolSource
    scorer: ScorerSpec
    strategy: str
    budget: int
    batch: int = 16
    seed_multiplier: int = 1
    cerm: CermSettings = CermSettings()
    selection: SelectionSettings = SelectionSettings()
    epsilon_targets: tuple[float, ...] = (0.02, 0.05)
    early_stop_epsilon: float | None = None
    error_budgets: tuple[int, ...] = (250,)
    seeds: tuple[int, ...] = (0,)

    def to_dict(self) -> dict:
        c = self.cerm
        return {
            "pool": self.pool.to_dict(),
            "scorer": self.scorer.to_dict(),
            "strategy": self.strategy,
            "budget": self.budget,
            "batch": self.batch,
            "seed_multiplier": self.seed_multiplier,
            "cerm": {
                "lambda_tol": c.lambda_tol,
                "tau": c.tau,
                "epochs": c.epochs,
                "batch": c.batch,
                "arch": c.arch,
                "learning_rate": c.learning_rate,
                "penalty_init": c.penalty_init,
                "penalty_cap": c.penalty_cap,
                "warmup_epochs": c.warmup_epochs,
                "retrain_epochs": c.retrain_epochs,
            },
            "selection": self.selection.to_dict(),
            "epsilon_targets": list(self.epsilon_targets),
            "early_stop_epsilon": self.early_stop_epsilon,
            "error_budgets": list(self.error_budgets),
            "seeds": list(self.seeds),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AuditConfig":
        try:
            return cls(
                pool=PoolSource.from_dict(d["pool"]),
                scorer=ScorerSpec.from_dict(d["scorer"]),
                strategy=d["strategy"],
                budget=int(d["budget"]),
                batch=int(d.get("batch", 16)),
                seed_multiplier=int(d.get("seed_multiplier", 1)),
                cerm=CermSettings(**d.get("cerm", {})),
                selection=SelectionSettings.from_dict(d.get("selection", {})),
                epsilon_targets=tuple(d.get("epsilon_targets", (0.02, 0.05))),
                early_stop_epsilon=d.get("early_stop_epsilon"),
                error_budgets=tuple(d.get("error_budgets", (250,))),
                seeds=tuple(d.get("seeds", (0,))),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad config document: {exc}") from None


def validate_config(config: AuditConfig, pool: AuditPool) -> None:
    if config.strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {config.strategy!r}; choose from {STRATEGIES}")
    if config.batch < 1:
        raise ConfigError("batch size k must be >= 1")
    n_strata = sum(1 for ids in pool.strata_index.values() if ids)
    seed_size = config.seed_multiplier * n_strata
    if config.seed_multiplier < 1:
        raise ConfigError("seed_multiplier must be >= 1")
    if config.budget < seed_size:
        raise ConfigError(f"budget {config.budget} < seed set size {seed_size}")
    if config.budget > len(pool):
        raise ConfigError(f"budget {config.budget} exceeds pool size {len(pool)}")
    if config.selection.candidate_pool < config.batch:
        raise ConfigError("candidate pool M must be >= batch size k")
    if config.selection.power_mode not in ("surrogate", "oracle"):
        raise ConfigError(f"unknown power_mode {config.selection.power_mode!r}")
    if config.selection.power_mode == "oracle" and config.scorer.kind == "remote":
        raise ConfigError("oracle power sampling needs a synthetic or cached scorer")


# ---------------------------------------------------------------------------
# synthetic benchmark generator


def _synthesize_geometry(spec: GeneratorSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray, PlantedBiasConfig]:
    """Directions (u class, r group) plus scorer config skeleton."""
    rng = np.random.default_rng([spec.seed, 11])
    u = rng.standard_normal(spec.d)
    u /= np.linalg.norm(u)
    w = spec.weight_scale * u
    config = PlantedBiasConfig(
        base_weights=tuple(w),
        flip_prob_group0=spec.flip_prob_group0,
        flip_prob_group1=spec.flip_prob_group1 if spec.flip_prob_group1 is not None else 0.0,
        noise_scale=spec.noise_scale,
        seed=spec.seed,
    )
    v = flip_direction(config)
    r = rng.standard_normal(spec.d)
    for basis in (u, v):
        r -= (r @ basis) * basis
    norm = np.linalg.norm(r)
    if norm < 1e-9:
        raise InfeasibleCalibration("degenerate geometry; increase d or change seed")
    r /= norm
    return u, r, v, config


def _sample_pool(spec: GeneratorSpec, u: np.ndarray, r: np.ndarray) -> AuditPool:
    n1 = int(round(spec.n * spec.group_balance))
    n0 = spec.n - n1
    cells: list[tuple[int, int, int]] = []
    for g, n_g in ((0, n0), (1, n1)):
        pos = int(round(n_g * spec.label_rates[g]))
        neg = n_g - pos
        if pos < 1 or neg < 1:
            raise ConfigError(f"group {g} needs non-empty label cells (got {pos}/{neg})")
        cells.append((g, 1, pos))
        cells.append((g, 0, neg))

    assignment = np.concatenate([[(g, y)] * c for g, y, c in cells]).reshape(-1, 2)
    rng = np.random.default_rng([spec.seed, 13])
    order = rng.permutation(spec.n)
    assignment = assignment[order]
    noise = rng.standard_normal((spec.n, spec.d))
    examples = []
    for i in range(spec.n):
        g, y = int(assignment[i, 0]), int(assignment[i, 1])
        mean = (2 * y - 1) * spec.class_sep[g] * u + (2 * g - 1) * (spec.group_offset / 2.0) * r
        examples.append(
            AuditExample(id=f"ID{i}", features=mean + noise[i], group=g, label=y)
        )
    return build_pool(examples)


def exact_pool_delta(pool: AuditPool, config: PlantedBiasConfig) -> float:
    """Ground-truth gap: exact group AUC difference under full scoring.

    Uses a fresh scorer instance so audit-side query accounting is untouched.
    """
    scorer = PlantedBiasScorer(config)
    records = scorer.score_batch(pool.examples)
    scores = np.array([rec.score for rec in records])
    return delta_auc_arrays(scores, pool.groups, pool.labels)


def build_synthetic_benchmark(
    spec: GeneratorSpec, out_path: str | None = None
) -> tuple[AuditPool, PlantedBiasConfig]:
    """Generate the pool and its paired scorer config, calibrating the
    group-1 flip probability by bisection when a target band is requested."""
    u, r, _v, config = _synthesize_geometry(spec)
    pool = _sample_pool(spec, u, r)

    if spec.flip_prob_group1 is None:
        if spec.target_band is None:
            raise ConfigError("flip_prob_group1 is None but no target_band given")
        lo_band, hi_band = spec.target_band
        target = 0.5 * (lo_band + hi_band)

        def delta_at(p1: float) -> float:
            return exact_pool_delta(pool, replace(config, flip_prob_group1=p1))

        lo_p, hi_p = 0.0, 1.0
        d_lo, d_hi = delta_at(lo_p), delta_at(hi_p)
        if not (min(d_lo, d_hi) <= target <= max(d_lo, d_hi)):
            raise InfeasibleCalibration(
                f"band {spec.target_band} unreachable: delta range [{d_lo:.4f}, {d_hi:.4f}]"
            )
        increasing = d_hi >= d_lo
        p1 = 0.5
        for _ in range(40):
            p1 = 0.5 * (lo_p + hi_p)
            d_mid = delta_at(p1)
            if lo_band <= d_mid <= hi_band:
                break
            if (d_mid < target) == increasing:
                lo_p = p1
            else:
                hi_p = p1
        else:
            raise InfeasibleCalibration(f"bisection failed to land in band {spec.target_band}")
        config = replace(config, flip_prob_group1=p1)

    if out_path is not None:
        dump_pool(pool, out_path)
    return pool, config


def generate_synthetic_pool(
    n: int,
    d: int,
    group_balance: float,
    label_rates: tuple[float, float],
    seed: int,
    out_path: str | None = None,
    **kwargs,
) -> tuple[AuditPool, PlantedBiasConfig]:
    """Spec-shaped wrapper over build_synthetic_benchmark."""
    spec = GeneratorSpec(
        n=n, d=d, group_balance=group_balance, label_rates=tuple(label_rates), seed=seed, **kwargs
    )
    return build_synthetic_benchmark(spec, out_path=out_path)


def build_pool_from_source(source: PoolSource) -> AuditPool:
    if source.kind in ("csv", "jsonl"):
        if not source.path:
            raise ConfigError("file pool source needs a path")
        return load_pool(source.path, source.kind)
    if source.kind == "synthetic":
        if source.generator is None:
            raise ConfigError("synthetic pool source needs a generator spec")
        pool, _ = build_synthetic_benchmark(source.generator)
        return pool
    raise ConfigError(f"unknown pool source kind {source.kind!r}")


def build_scorer(spec: ScorerSpec) -> BlackBoxScorer:
    if spec.kind == "planted":
        if spec.planted is None:
            raise ConfigError("planted scorer spec needs its config")
        return PlantedBiasScorer(spec.planted, cache_path=spec.cache_path)
    if spec.kind == "cached":
        if not spec.scores_csv:
            raise ConfigError("cached scorer spec needs scores_csv")
        return TableScorer(spec.scores_csv)
    if spec.kind == "remote":
        if not spec.endpoint:
            raise ConfigError("remote scorer spec needs an endpoint")
        return RemoteScorer(
            spec.endpoint,
            timeout=spec.timeout,
            max_batch=spec.max_batch,
            retries=spec.retries,
            cache_path=spec.cache_path,
        )
    raise ConfigError(f"unknown scorer kind {spec.kind!r}")


def ground_truth_delta(pool: AuditPool, spec: ScorerSpec) -> float | None:
    """Exact pool gap for synthetic/cached scorers; None for remote audits."""
    if spec.kind == "planted":
        return exact_pool_delta(pool, spec.planted)
    if spec.kind == "cached":
        scorer = TableScorer(spec.scores_csv)
        records = scorer.score_batch(pool.examples)
        scores = np.array([rec.score for rec in records])
        return delta_auc_arrays(scores, pool.groups, pool.labels)
    return None


# ---------------------------------------------------------------------------
# round log


@dataclass(frozen=True)
class RoundLog:
    round: int
    q: int
    batch_ids: tuple[str, ...]
    empirical_delta: float | None
    mu_min: float | None
    mu_max: float | None
    midpoint: float | None
    width: float | None
    gap_min: float | None
    gap_max: float | None
    mu_min_exact: float | None
    mu_max_exact: float | None
    estimate: float | None
    abs_error: float | None
    wall_time: float = 0.0  # telemetry only; excluded from the log CSV


_LOG_COLUMNS = (
    "round",
    "q",
    "batch_ids",
    "empirical_delta",
    "mu_min",
    "mu_max",
    "midpoint",
    "width",
    "gap_min",
    "gap_max",
    "mu_min_exact",
    "mu_max_exact",
    "estimate",
    "abs_error",
)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_round_logs(logs: list[RoundLog], path: str) -> None:
    """Deterministic per-round CSV; identical (config, seed) runs produce
    byte-identical files (wall-clock telemetry is deliberately left out)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_LOG_COLUMNS)
        for log in logs:
            writer.writerow(
                [
                    log.round,
                    log.q,
                    ";".join(log.batch_ids),
                    _fmt(log.empirical_delta),
                    _fmt(log.mu_min),
                    _fmt(log.mu_max),
                    _fmt(log.midpoint),
                    _fmt(log.width),
                    _fmt(log.gap_min),
                    _fmt(log.gap_max),
                    _fmt(log.mu_min_exact),
                    _fmt(log.mu_max_exact),
                    _fmt(log.estimate),
                    _fmt(log.abs_error),
                ]
            )


def read_round_logs(path: str) -> list[RoundLog]:
    def opt(v: str) -> float | None:
        return float(v) if v else None

    out = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != _LOG_COLUMNS:
            raise ConfigError(f"unexpected log header in {path}")
        for rec in reader:
            out.append(
                RoundLog(
                    round=int(rec[0]),
                    q=int(rec[1]),
                    batch_ids=tuple(rec[2].split(";")) if rec[2] else (),
                    empirical_delta=opt(rec[3]),
                    mu_min=opt(rec[4]),
                    mu_max=opt(rec[5]),
                    midpoint=opt(rec[6]),
                    width=opt(rec[7]),
                    gap_min=opt(rec[8]),
                    gap_max=opt(rec[9]),
                    mu_min_exact=opt(rec[10]),
                    mu_max_exact=opt(rec[11]),
                    estimate=opt(rec[12]),
                    abs_error=opt(rec[13]),
                )
            )
    return out


# ---------------------------------------------------------------------------
# the audit loop


def _seed_sample(pool: AuditPool, multiplier: int, seed: int) -> list[str]:
    """Fixed per-stratum seed draw: multiplier ids from every (g, y) cell."""
    rng = np.random.default_rng([1, 0, seed])
    out: list[str] = []
    for stratum in sorted(pool.strata_index):
        ids = pool.strata_index[stratum]
        if not ids:
            continue
        if len(ids) < multiplier:
            raise PoolExhausted(f"stratum {stratum} smaller than seed multiplier")
        picks = rng.choice(len(ids), size=multiplier, replace=False)
        out.extend(ids[i] for i in picks)
    return out


def _plugin_estimate(S: QueriedSet, pool: AuditPool) -> float | None:
    return group_auc(S.score_map(), pool, list(S.ids)).delta


class _RunState:
    """Per-run mutable strategy state threaded between rounds."""

    def __init__(self):
        self.warm = None  # (h_min, h_max) from the previous certificate
        self.cert = None  # latest CertificateOutcome
        self.bo_X: list[np.ndarray] = []
        self.bo_y: list[float] = []
        self.gp = None
        self.gp_size = 0
        self.pending_phi: list[np.ndarray] = []  # features of the last batch
        self.pilot = None  # pilot surrogate for power sampling
        self.truth_scorer = None  # oracle scorer for power_mode="oracle"
        self.prev_estimate: float | None = None


def _candidate_subsample(
    pool: AuditPool, queried: set[str], m: int, k: int, seed: int, round_index: int
) -> list[str]:
    candidates = unqueried_ids(pool, queried)
    if len(candidates) < k:
        raise PoolExhausted(f"need {k} unqueried ids, have {len(candidates)}")
    if len(candidates) <= m:
        return candidates
    rng = np.random.default_rng([2, round_index, seed])
    picks = rng.choice(len(candidates), size=m, replace=False)
    return [candidates[i] for i in sorted(picks)]


def _phi_features(
    pool: AuditPool, cid: str, dis: float | None, settings: SelectionSettings
) -> np.ndarray:
    ex = pool.example(cid)
    extras = []
    if settings.include_example_features:
        extras.append(ex.features)
        extras.append([float(ex.group)])
    if dis is None:
        return build_features(0.0, extras)[1:] if extras else np.zeros(1)
    return build_features(dis, extras)


def _select_batch(
    config: AuditConfig,
    pool: AuditPool,
    S: QueriedSet,
    state: _RunState,
    seed: int,
    round_index: int,
    scorer_spec: ScorerSpec,
) -> tuple[list[str], list[np.ndarray]]:
    """One round of query selection; returns chosen ids and their phi rows."""
    k = config.batch
    sel = config.selection
    strategy = config.strategy
    queried = set(S.ids)
    t = round_index - 1  # 0-based selection round for schedules

    if strategy == "random":
        rng = np.random.default_rng([3, round_index, seed])
        return select_random(pool, queried, k, int(rng.integers(2**31))), []
    if strategy in ("stratified", "cerm_stratified"):
        rng = np.random.default_rng([3, round_index, seed])
        ids = select_stratified(
            pool, queried, k, keys=sel.stratify_keys, seed=int(rng.integers(2**31))
        )
        return ids, []
    if strategy == "power":
        candidates = _candidate_subsample(pool, queried, sel.candidate_pool, k, seed, round_index)
        if sel.power_mode == "oracle":
            if state.truth_scorer is None:
                state.truth_scorer = build_scorer(scorer_spec)
            recs = state.truth_scorer.score_batch([pool.example(i) for i in candidates])
            p = {r.id: r.score for r in recs}
        else:
            p = {
                i: sg.forward(state.pilot, pool.example(i).features) for i in candidates
            }
        rng = np.random.default_rng([3, round_index, seed])
        sub = build_pool([pool.example(i) for i in candidates])
        return (
            select_power(sub, set(), k, sel.gamma_pow, p, int(rng.integers(2**31))),
            [],
        )

    candidates = _candidate_subsample(pool, queried, sel.candidate_pool, k, seed, round_index)
    alpha = sel.alpha_schedule.value(t)
    weights = distribution_weights(pool, list(S.ids), alpha, sel.ratio_cap)

    if strategy == "bo_only":
        phi = {i: _phi_features(pool, i, None, sel) for i in candidates}
        if state.gp is None:
            rng = np.random.default_rng([3, round_index, seed])
            ids = select_random(pool, queried | (set(pool.ids) - set(candidates)), k, int(rng.integers(2**31)))
            return ids, [phi[i] for i in ids]
        acq = acquisition01(state.gp, phi, candidates, sel.beta)
        final = {}
        for i in candidates:
            ex = pool.example(i)
            final[i] = acq[i] * weights[(ex.group, ex.label)]
        ids = mmr_select(final, phi, k, sel.gamma_div)
        return ids, [phi[i] for i in ids]

    # certificate-driven strategies
    outcome = state.cert
    p_low = {
        i: sg.forward(outcome.h_min, pool.example(i).features) for i in candidates
    }
    p_up = {
        i: sg.forward(outcome.h_max, pool.example(i).features) for i in candidates
    }
    dis = score_disagreement(p_low, p_up, candidates)
    phi = {i: _phi_features(pool, i, dis[i], sel) for i in candidates}

    if strategy == "bafa_disagreement":
        final = {}
        for i in candidates:
            ex = pool.example(i)
            final[i] = dis[i] * weights[(ex.group, ex.label)]
        ids = top_k(final, k)
        return ids, [phi[i] for i in ids]

    if strategy == "bafa_bo":
        lam = sel.mix_schedule.value(t)
        if lam > 0.0 and state.gp is not None:
            if sel.bo_quantile is not None:
                gate = float(np.quantile(np.array(list(dis.values())), sel.bo_quantile))
                hot = [i for i in candidates if dis[i] >= gate]
                comb = dict(dis)
                if hot:
                    comb.update(bo_combine({i: dis[i] for i in hot}, state.gp, phi, sel.beta, sel.mix_schedule, t))
            else:
                comb = bo_combine(dis, state.gp, phi, sel.beta, sel.mix_schedule, t)
        else:
            comb = dict(dis)
        final = {}
        for i in candidates:
            ex = pool.example(i)
            final[i] = comb[i] * weights[(ex.group, ex.label)]
        ids = mmr_select(final, phi, k, sel.gamma_div)
        return ids, [phi[i] for i in ids]

    raise ConfigError(f"unknown strategy {strategy!r}")


def run_audit(config: AuditConfig, seed: int) -> list[RoundLog]:
    """One audit run: seed round, then batched querying until the budget.

    Active strategies report the certificate midpoint as the estimate,
    passive strategies the empirical plug-in gap on the queried set.
    """
    pool = build_pool_from_source(config.pool)
    validate_config(config, pool)
    scorer = build_scorer(config.scorer)
    truth = ground_truth_delta(pool, config.scorer)
    uses_certificate = config.strategy in CERTIFICATE_STRATEGIES
    state = _RunState()
    logs: list[RoundLog] = []

    def log_round(
        round_index: int, S: QueriedSet, batch_ids: list[str], wall: float
    ) -> RoundLog:
        empirical = _plugin_estimate(S, pool)
        cert = state.cert.certificate if (uses_certificate and state.cert) else None
        if uses_certificate and cert is not None:
            estimate = cert.midpoint
        else:
            estimate = empirical
        abs_error = None
        if truth is not None and estimate is not None:
            abs_error = abs(estimate - truth)
        entry = RoundLog(
            round=round_index,
            q=len(S),
            batch_ids=tuple(batch_ids),
            empirical_delta=empirical,
            mu_min=cert.mu_min if cert else None,
            mu_max=cert.mu_max if cert else None,
            midpoint=cert.midpoint if cert else None,
            width=cert.width if cert else None,
            gap_min=cert.feasibility_gap_min if cert else None,
            gap_max=cert.feasibility_gap_max if cert else None,
            mu_min_exact=cert.mu_min_exact if cert else None,
            mu_max_exact=cert.mu_max_exact if cert else None,
            estimate=estimate,
            abs_error=abs_error,
        )
        return replace(entry, wall_time=wall)

    # seed round
    t0 = time.perf_counter()
    seed_ids = _seed_sample(pool, config.seed_multiplier, seed)
    records = scorer.score_batch([pool.example(i) for i in seed_ids])
    S = queried_set_from_pool(pool, seed_ids, [r.score for r in records])
    if uses_certificate:
        state.cert = certificate(
            S, pool, config.cerm, warm=None, seed=seed, round_index=0
        )
        state.warm = (state.cert.h_min, state.cert.h_max)
    if config.strategy == "power" and config.selection.power_mode == "surrogate":
        pilot = sg.init_surrogate(pool.d, config.cerm.arch, seed=seed + 101)
        from .cerm import _score_match_steps

        state.pilot = _score_match_steps(
            pilot, S.features, S.scores, epochs=40, lr=config.cerm.resolve_lr(), mask=None
        )
    logs.append(log_round(0, S, seed_ids, time.perf_counter() - t0))
    state.prev_estimate = logs[-1].estimate

    round_index = 0
    while len(S) + config.batch <= config.budget:
        round_index += 1
        t0 = time.perf_counter()
        batch_ids, batch_phi = _select_batch(
            config, pool, S, state, seed, round_index, config.scorer
        )
        records = scorer.score_batch([pool.example(i) for i in batch_ids])
        S = S.extend(
            [(r.id, r.score) for r in records],
            batch_features=pool.features[pool.rows(batch_ids)],
        )
        prev_width = state.cert.certificate.width if (uses_certificate and state.cert) else None
        if uses_certificate:
            state.cert = certificate(
                S, pool, config.cerm, warm=state.warm, seed=seed, round_index=round_index
            )
            state.warm = (state.cert.h_min, state.cert.h_max)

        entry = log_round(round_index, S, batch_ids, time.perf_counter() - t0)
        logs.append(entry)

        # feed the BO dataset with a per-query progress proxy
        if config.strategy == "bafa_bo" and prev_width is not None and batch_phi:
            y = (prev_width - state.cert.certificate.width) / config.batch
            for row in batch_phi:
                state.bo_X.append(row)
                state.bo_y.append(y)
        elif config.strategy == "bo_only" and batch_phi:
            prev_est = state.prev_estimate
            if prev_est is not None and entry.estimate is not None:
                y = abs(entry.estimate - prev_est) / config.batch
                for row in batch_phi:
                    state.bo_X.append(row)
                    state.bo_y.append(y)
        state.prev_estimate = entry.estimate

        # refit the GP whenever the BO dataset grew
        if config.strategy in ("bafa_bo", "bo_only") and len(state.bo_y) > state.gp_size:
            state.gp = fit_gp(
                np.vstack(state.bo_X),
                np.array(state.bo_y),
                kernel=config.selection.gp_kernel,
                noise_variance=config.selection.gp_noise,
            )
            state.gp_size = len(state.bo_y)

        if (
            config.early_stop_epsilon is not None
            and uses_certificate
            and state.cert.certificate.width / 2.0 <= config.early_stop_epsilon
        ):
            break

    assert scorer.query_count == len(S), "query accounting drifted"
    return logs


# ---------------------------------------------------------------------------
# experiments


@dataclass(frozen=True)
class ExperimentSummary:
    strategy: str
    seeds: tuple[int, ...]
    budgets: tuple[int, ...]
    mean_errors: tuple[float, ...]
    t_epsilon: dict[float, int | None]
    auec_raw: float
    auec_avg: float
    auec_t_max: int
    error_at: dict[int, tuple[float, float]]  # budget -> (mean, sample sd)
    coverage: float | None
    mean_violation: float | None
    pearson_width_error: float | None
    spearman_width_error: float | None
    final_errors: tuple[float, ...]
    truth: float | None


def _run_seed_job(args: tuple) -> list[RoundLog]:
    config, seed = args
    return run_audit(config, seed)


def error_curve_from_logs(logs: list[RoundLog], seed: int) -> ErrorCurve:
    points = []
    for log in logs:
        err = log.abs_error if log.abs_error is not None else float("nan")
        points.append((log.q, err))
    return ErrorCurve(points=tuple(points), seed=seed)


def run_experiment(
    config: AuditConfig,
    seeds: tuple[int, ...] | None = None,
    workers: int = 1,
    out_dir: str | None = None,
) -> ExperimentSummary:
    """Run one strategy over the seed set and aggregate the usual metrics:
    queries-to-epsilon on the mean curve, area under the error curve,
    error at fixed budgets, coverage/violation and width-error correlation.
    """
    seeds = tuple(seeds if seeds is not None else config.seeds)
    if not seeds:
        raise ConfigError("need at least one seed")
    jobs = [(config, s) for s in seeds]
    if workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool_exec:
            all_logs = list(pool_exec.map(_run_seed_job, jobs))
    else:
        all_logs = [_run_seed_job(j) for j in jobs]

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        for s, logs in zip(seeds, all_logs):
            write_round_logs(logs, os.path.join(out_dir, f"{config.strategy}_seed{s}.csv"))

    return summarize_experiment(config, seeds, all_logs, out_dir=out_dir)


def summarize_experiment(
    config: AuditConfig,
    seeds: tuple[int, ...],
    all_logs: list[list[RoundLog]],
    out_dir: str | None = None,
) -> ExperimentSummary:
    pool = build_pool_from_source(config.pool)
    truth = ground_truth_delta(pool, config.scorer)

    curves = [error_curve_from_logs(logs, s) for s, logs in zip(seeds, all_logs)]
    mean_curve = mean_error_curve(curves)
    budgets = tuple(q for q, _ in mean_curve.points)
    mean_errors = tuple(e for _, e in mean_curve.points)

    t_eps = {eps: queries_to_epsilon(mean_curve, eps) for eps in config.epsilon_targets}
    t_max = min(1000, budgets[-1]) if budgets else 0
    auec_raw = auec(mean_curve, t_max) if t_max >= 1 else float("nan")
    auec_avg = auec_raw / t_max if t_max >= 1 else float("nan")

    error_at: dict[int, tuple[float, float]] = {}
    for b in config.error_budgets:
        logged = [q for q in budgets if q <= b]
        if not logged:
            continue
        q_at = logged[-1]
        j = budgets.index(q_at)
        vals = [c.points[j][1] for c in curves if not math.isnan(c.points[j][1])]
        if vals:
            mean = float(np.mean(vals))
            sd = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
            error_at[b] = (mean, sd)

    coverage = mean_violation = pearson = spearman = None
    if truth is not None and config.strategy in CERTIFICATE_STRATEGIES:
        covered, total, violations, widths, errors = 0, 0, [], [], []
        for logs in all_logs:
            for log in logs:
                if log.round == 0 or log.mu_min is None:
                    continue
                total += 1
                feasible = (
                    log.gap_min <= config.cerm.lambda_tol
                    and log.gap_max <= config.cerm.lambda_tol
                )
                inside = log.mu_min <= truth <= log.mu_max
                if feasible and inside:
                    covered += 1
                violations.append(bound_violation((log.mu_min, log.mu_max), truth))
                if log.abs_error is not None:
                    widths.append(log.width)
                    errors.append(log.abs_error)
        if total:
            coverage = covered / total
            mean_violation = float(np.mean(violations))
        if len(widths) >= 2 and np.std(widths) > 0 and np.std(errors) > 0:
            pearson = float(pearsonr(widths, errors).statistic)
            spearman = float(spearmanr(widths, errors).statistic)

    final_errors = tuple(
        logs[-1].abs_error if logs[-1].abs_error is not None else float("nan")
        for logs in all_logs
    )
    summary = ExperimentSummary(
        strategy=config.strategy,
        seeds=seeds,
        budgets=budgets,
        mean_errors=mean_errors,
        t_epsilon=t_eps,
        auec_raw=auec_raw,
        auec_avg=auec_avg,
        auec_t_max=t_max,
        error_at=error_at,
        coverage=coverage,
        mean_violation=mean_violation,
        pearson_width_error=pearson,
        spearman_width_error=spearman,
        final_errors=final_errors,
        truth=truth,
    )
    if out_dir:
        write_summary_csv([summary], os.path.join(out_dir, "summary.csv"))
    return summary


def write_summary_csv(summaries: list[ExperimentSummary], path: str) -> None:
    eps = sorted({e for s in summaries for e in s.t_epsilon})
    budgets = sorted({b for s in summaries for b in s.error_at})
    cols = (
        ["strategy", "seeds", "truth"]
        + [f"t_eps_{e}" for e in eps]
        + ["auec_raw", "auec_avg", "auec_t_max"]
        + [f"err_at_{b}_mean" for b in budgets]
        + [f"err_at_{b}_sd" for b in budgets]
        + ["coverage", "mean_violation", "pearson_width_error", "spearman_width_error"]
    )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for s in summaries:
            row = [s.strategy, len(s.seeds), _fmt(s.truth)]
            for e in eps:
                v = s.t_epsilon.get(e)
                row.append("not-reached" if v is None else str(v))
            row += [_fmt(s.auec_raw), _fmt(s.auec_avg), str(s.auec_t_max)]
            for b in budgets:
                row.append(_fmt(s.error_at.get(b, (None, None))[0]))
            for b in budgets:
                row.append(_fmt(s.error_at.get(b, (None, None))[1]))
            row += [
                _fmt(s.coverage),
                _fmt(s.mean_violation),
                _fmt(s.pearson_width_error),
                _fmt(s.spearman_width_error),
            ]
            writer.writerow(row)


# ---------------------------------------------------------------------------
# benchmark presets


def benchmark_generator(variant: str = "default", n: int = 5000, gen_seed: int = 2024) -> GeneratorSpec:
    """Shipped synthetic benchmark variants.

    default   flip-planted disparity calibrated into [0.10, 0.18]
    wellspec  disparity from group-conditional class separation; the clean
              linear scorer is an exact member of the linear surrogate family
    misspec   wellspec plus heavy per-id score noise the surrogate cannot fit
    """
    if variant == "default":
        return GeneratorSpec(n=n, seed=gen_seed)
    if variant == "wellspec":
        return GeneratorSpec(
            n=n,
            seed=gen_seed,
            class_sep=(1.2, 0.65),
            flip_prob_group1=0.0,
            target_band=None,
        )
    if variant == "misspec":
        return GeneratorSpec(
            n=n,
            seed=gen_seed,
            class_sep=(1.2, 0.65),
            flip_prob_group1=0.0,
            target_band=None,
            noise_scale=1.0,
        )
    raise ConfigError(f"unknown benchmark variant {variant!r}")


def benchmark_config(
    variant: str = "default",
    strategy: str = "bafa_disagreement",
    n: int = 5000,
    budget: int = 600,
    batch: int = 16,
    gen_seed: int = 2024,
    seeds: tuple[int, ...] = tuple(range(10)),
) -> AuditConfig:
    """Ready-to-run audit config for a shipped benchmark variant."""
    gen = benchmark_generator(variant, n=n, gen_seed=gen_seed)
    _pool, scorer_config = build_synthetic_benchmark(gen)
    arch = "linear" if variant in ("wellspec", "misspec") else "mlp:32"
    return AuditConfig(
        pool=PoolSource(kind="synthetic", generator=gen),
        scorer=ScorerSpec(kind="planted", planted=scorer_config),
        strategy=strategy,
        budget=budget,
        batch=batch,
        cerm=CermSettings(arch=arch),
        seeds=seeds,
    )
