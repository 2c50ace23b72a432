"""Black-box scorer abstraction.

Three concrete scorers share a cache-and-accounting base:

* a synthetic planted-bias scorer with an exactly recomputable ground truth,
* a table scorer backed by a precomputed score CSV,
* a remote scorer speaking a small JSON-over-HTTP protocol.

Scores are deterministic given the scorer's construction, cached by example
id, and an id is never scored twice by the same instance.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit, ndtri

from .errors import (
    DimensionMismatch,
    InvalidProbability,
    MissingScore,
    RemoteProtocolError,
    RemoteTimeout,
)
from .pool import AuditExample

REMOTE_TOKEN_ENV = "FAIRAUDIT_REMOTE_TOKEN"


@dataclass(frozen=True)
class ScoreRecord:
    id: str
    score: float

    def __post_init__(self):
        if not np.isfinite(self.score) or not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score for {self.id!r} outside [0, 1]: {self.score}")


@dataclass(frozen=True)
class PlantedBiasConfig:
    """Synthetic scorer: sigmoid of a linear score with seeded per-id noise,
    and a seeded score flip (s -> 1 - s) for a group-conditional fraction of
    each group's examples."""

    base_weights: tuple[float, ...]
    flip_prob_group0: float
    flip_prob_group1: float
    noise_scale: float
    seed: int

    def __post_init__(self):
        for name in ("flip_prob_group0", "flip_prob_group1"):
            p = getattr(self, name)
            if not (0.0 <= p <= 1.0):
                raise InvalidProbability(f"{name}={p}")
        if self.noise_scale < 0:
            raise InvalidProbability(f"noise_scale={self.noise_scale}")
        object.__setattr__(self, "base_weights", tuple(float(w) for w in self.base_weights))

    def to_dict(self) -> dict:
        return {
            "base_weights": list(self.base_weights),
            "flip_prob_group0": self.flip_prob_group0,
            "flip_prob_group1": self.flip_prob_group1,
            "noise_scale": self.noise_scale,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PlantedBiasConfig":
        return cls(
            base_weights=tuple(d["base_weights"]),
            flip_prob_group0=float(d["flip_prob_group0"]),
            flip_prob_group1=float(d["flip_prob_group1"]),
            noise_scale=float(d["noise_scale"]),
            seed=int(d["seed"]),
        )


def _hash_unit(channel: str, seed: int, example_id: str) -> float:
    """Uniform in (0, 1) derived from a stable hash; order-independent."""
    digest = hashlib.blake2b(
        f"{channel}|{seed}|{example_id}".encode("utf-8"), digest_size=8
    ).digest()
    v = int.from_bytes(digest, "big")
    return (v + 0.5) / 2.0**64


def flip_direction(config: PlantedBiasConfig) -> np.ndarray:
    """Seeded unit vector, orthogonal to the base weights, that carves the
    flip region: an example is flipped when its projection exceeds the
    group's quantile threshold. Keeping the direction orthogonal to the
    scoring weights makes the flip region independent of the clean score."""
    w = np.asarray(config.base_weights, dtype=np.float64)
    d = w.size
    rng = np.random.default_rng([int(config.seed), 7919])
    v = rng.standard_normal(d)
    nw = np.linalg.norm(w)
    if nw > 0:
        v = v - (v @ w) / nw**2 * w
    norm = np.linalg.norm(v)
    if norm == 0:  # pathological seed; fall back to a fixed axis
        v = np.zeros(d)
        v[0] = 1.0
        return v
    return v / norm


class BlackBoxScorer:
    """Base scorer: per-id cache, query accounting, optional CSV sidecar."""

    def __init__(self, cache_path: str | None = None):
        self._cache: dict[str, float] = {}
        self._lock = threading.Lock()
        self._cache_path = cache_path
        if cache_path and os.path.exists(cache_path):
            with open(cache_path, "r", encoding="utf-8", newline="") as fh:
                reader = csv.reader(fh)
                header = next(reader, None)
                if header is not None and header != ["id", "score"]:
                    raise RemoteProtocolError(f"bad cache header in {cache_path}: {header}")
                for rec in reader:
                    self._cache[rec[0]] = float(rec[1])
        self._preloaded = set(self._cache)

    @property
    def query_count(self) -> int:
        """Number of distinct ids this instance has actually scored."""
        with self._lock:
            return len(self._cache) - len(self._preloaded & set(self._cache))

    @property
    def queried_ids(self) -> frozenset[str]:
        with self._lock:
            return frozenset(set(self._cache) - self._preloaded)

    def _score_uncached(self, examples: Sequence[AuditExample]) -> list[float]:
        raise NotImplementedError

    def score_batch(self, examples: Sequence[AuditExample]) -> list[ScoreRecord]:
        """Score a batch, order-preserving; cache hits are never re-scored."""
        if not examples:
            return []
        with self._lock:
            missing = [ex for ex in examples if ex.id not in self._cache]
            if missing:
                scores = self._score_uncached(missing)
                new_rows = []
                for ex, s in zip(missing, scores):
                    s = float(s)
                    if not (0.0 <= s <= 1.0):
                        raise RemoteProtocolError(
                            f"score for {ex.id!r} outside [0, 1]: {s}"
                        )
                    self._cache[ex.id] = s
                    new_rows.append((ex.id, s))
                if self._cache_path:
                    write_header = not os.path.exists(self._cache_path) or (
                        os.path.getsize(self._cache_path) == 0
                    )
                    with open(self._cache_path, "a", encoding="utf-8", newline="") as fh:
                        writer = csv.writer(fh, lineterminator="\n")
                        if write_header:
                            writer.writerow(["id", "score"])
                        writer.writerows((i, repr(s)) for i, s in new_rows)
            return [ScoreRecord(id=ex.id, score=self._cache[ex.id]) for ex in examples]


class PlantedBiasScorer(BlackBoxScorer):
    def __init__(self, config: PlantedBiasConfig, cache_path: str | None = None):
        super().__init__(cache_path)
        self.config = config
        self._w = np.asarray(config.base_weights, dtype=np.float64)
        self._v = flip_direction(config)
        # Per-group projection thresholds: the flip region covers the top
        # flip_prob mass of a standard normal projection.
        self._thresholds = {}
        for g, p in ((0, config.flip_prob_group0), (1, config.flip_prob_group1)):
            if p <= 0.0:
                self._thresholds[g] = np.inf
            elif p >= 1.0:
                self._thresholds[g] = -np.inf
            else:
                self._thresholds[g] = float(ndtri(1.0 - p))

    def _score_uncached(self, examples: Sequence[AuditExample]) -> list[float]:
        d = self._w.shape[0]
        for ex in examples:
            if ex.features.shape[0] != d:
                raise DimensionMismatch(
                    f"example {ex.id!r} has {ex.features.shape[0]} features, "
                    f"scorer expects {d}"
                )
        X = np.stack([ex.features for ex in examples])
        logits = X @ self._w
        if self.config.noise_scale > 0:
            units = np.array(
                [_hash_unit("noise", self.config.seed, ex.id) for ex in examples]
            )
            logits = logits + self.config.noise_scale * ndtri(units)
        scores = expit(logits)
        thresholds = np.array([self._thresholds[ex.group] for ex in examples])
        flip = (X @ self._v) > thresholds
        scores = np.where(flip, 1.0 - scores, scores)
        return [float(s) for s in scores]


def make_planted_bias_scorer(
    config: PlantedBiasConfig, cache_path: str | None = None
) -> PlantedBiasScorer:
    """Deterministic synthetic scorer with a known planted group disparity."""
    return PlantedBiasScorer(config, cache_path)


class TableScorer(BlackBoxScorer):
    """Scores served from a precomputed CSV with columns id,score."""

    def __init__(self, scores_csv: str):
        super().__init__(cache_path=None)
        self._table: dict[str, float] = {}
        with open(scores_csv, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["id", "score"]:
                raise RemoteProtocolError(f"bad score table header: {header}")
            for rec in reader:
                self._table[rec[0]] = float(rec[1])

    def _score_uncached(self, examples: Sequence[AuditExample]) -> list[float]:
        out = []
        for ex in examples:
            if ex.id not in self._table:
                raise MissingScore(ex.id)
            out.append(self._table[ex.id])
        return out


# ---------------------------------------------------------------------------
# remote protocol


def query_remote(
    endpoint: str,
    examples: Sequence[AuditExample],
    timeout: float = 30.0,
    retries: int = 1,
) -> list[ScoreRecord]:
    """POST one scoring request and validate the response contract.

    Request body: {"items": [{"id": str, "features": [f64], "text": str?}]}.
    Response body: {"items": [{"id": str, "score": f64}]} with every
    requested id present exactly once and scores inside [0, 1].
    """
    if not examples:
        return []
    items = []
    for ex in examples:
        item = {"id": ex.id, "features": [float(v) for v in ex.features]}
        if ex.text is not None:
            item["text"] = ex.text
        items.append(item)
    body = json.dumps({"items": items}).encode("utf-8")
    headers = {"Content-Type": "application/json"}
    token = os.environ.get(REMOTE_TOKEN_ENV)
    if token:
        headers["Authorization"] = f"Bearer {token}"

    last_exc: Exception | None = None
    for _attempt in range(retries + 1):
        req = urllib.request.Request(endpoint, data=body, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
            break
        except TimeoutError as exc:
            last_exc = RemoteTimeout(f"request to {endpoint} timed out after {timeout}s")
            continue
        except urllib.error.URLError as exc:
            if isinstance(exc.reason, TimeoutError):
                last_exc = RemoteTimeout(f"request to {endpoint} timed out after {timeout}s")
                continue
            last_exc = RemoteProtocolError(f"transport error: {exc}")
            continue
        except json.JSONDecodeError as exc:
            raise RemoteProtocolError(f"response is not valid JSON: {exc}") from None
    else:
        raise last_exc

    if not isinstance(payload, dict) or "items" not in payload:
        raise RemoteProtocolError("response missing 'items'")
    got: dict[str, float] = {}
    for item in payload["items"]:
        rid = item.get("id")
        if rid in got:
            raise RemoteProtocolError(f"duplicate id in response: {rid!r}")
        try:
            got[rid] = float(item["score"])
        except (KeyError, TypeError, ValueError):
            raise RemoteProtocolError(f"malformed item for id {rid!r}") from None
    requested = [ex.id for ex in examples]
    missing = [i for i in requested if i not in got]
    extra = [i for i in got if i not in set(requested)]
    if missing or extra:
        raise RemoteProtocolError(
            f"response id mismatch: missing={missing}, extra={extra}"
        )
    bad = {i: s for i, s in got.items() if not (np.isfinite(s) and 0.0 <= s <= 1.0)}
    if bad:
        raise RemoteProtocolError(f"out-of-range scores: {bad}")
    return [ScoreRecord(id=i, score=got[i]) for i in requested]


class RemoteScorer(BlackBoxScorer):
    """Caching wrapper around the remote scoring protocol."""

    def __init__(
        self,
        endpoint: str,
        timeout: float = 30.0,
        max_batch: int = 256,
        retries: int = 1,
        cache_path: str | None = None,
    ):
        super().__init__(cache_path)
        self.endpoint = endpoint
        self.timeout = timeout
        self.max_batch = max_batch
        self.retries = retries

    def _score_uncached(self, examples: Sequence[AuditExample]) -> list[float]:
        out: list[float] = []
        for start in range(0, len(examples), self.max_batch):
            chunk = examples[start : start + self.max_batch]
            records = query_remote(self.endpoint, chunk, self.timeout, self.retries)
            out.extend(r.score for r in records)
        return out


def score_batch(scorer: BlackBoxScorer, examples: Sequence[AuditExample]) -> list[ScoreRecord]:
    """Function-style alias for BlackBoxScorer.score_batch."""
    return scorer.score_batch(examples)
