"""Immutable audit-pool data model, ingestion and stratification.

A pool is an ordered collection of examples, each carrying a fixed-length
feature vector, a binary protected-group attribute and a binary label.
Pools are never reindexed after construction; everything downstream is
keyed by the string ids found in the input file.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    DuplicateId,
    EmptyPool,
    InconsistentDimension,
    NonBinaryField,
    ParseError,
)

STRATA = ((0, 0), (0, 1), (1, 0), (1, 1))


@dataclass(frozen=True, eq=False)
class AuditExample:
    """One pool row: id, feature vector, group g, label y, optional raw text."""

    id: str
    features: np.ndarray
    group: int
    label: int
    text: str | None = None

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(feats)):
            raise ValueError(f"example {self.id!r}: non-finite feature entry")
        if self.group not in (0, 1):
            raise ValueError(f"example {self.id!r}: group must be 0 or 1")
        if self.label not in (0, 1):
            raise ValueError(f"example {self.id!r}: label must be 0 or 1")
        object.__setattr__(self, "features", feats)
        feats.setflags(write=False)


@dataclass(frozen=True, eq=False)
class AuditPool:
    """Ordered, immutable collection of examples with a (g, y) stratum index."""

    examples: tuple[AuditExample, ...]
    d: int
    strata_index: Mapping[tuple[int, int], tuple[str, ...]]
    # Derived dense views, built once; read-only.
    ids: tuple[str, ...] = field(repr=False, default=())
    features: np.ndarray = field(repr=False, default=None)
    groups: np.ndarray = field(repr=False, default=None)
    labels: np.ndarray = field(repr=False, default=None)
    index_of: Mapping[str, int] = field(repr=False, default=None)

    def __len__(self) -> int:
        return len(self.examples)

    def example(self, example_id: str) -> AuditExample:
        return self.examples[self.index_of[example_id]]

    def rows(self, ids: Sequence[str]) -> np.ndarray:
        """Integer positions of the given ids, in the given order."""
        return np.array([self.index_of[i] for i in ids], dtype=np.intp)


def build_pool(examples: Iterable[AuditExample]) -> AuditPool:
    """Assemble a pool from examples, checking id uniqueness and dimensions."""
    examples = tuple(examples)
    if not examples:
        raise EmptyPool("cannot build a pool with no examples")
    d = examples[0].features.shape[0]
    seen: dict[str, int] = {}
    strata: dict[tuple[int, int], list[str]] = {s: [] for s in STRATA}
    for row, ex in enumerate(examples):
        if ex.id in seen:
            raise DuplicateId(ex.id)
        seen[ex.id] = row
        if ex.features.shape[0] != d:
            raise InconsistentDimension(row, d, ex.features.shape[0])
        strata[(ex.group, ex.label)].append(ex.id)

    feats = np.vstack([ex.features for ex in examples])
    feats.setflags(write=False)
    groups = np.array([ex.group for ex in examples], dtype=np.int8)
    labels = np.array([ex.label for ex in examples], dtype=np.int8)
    groups.setflags(write=False)
    labels.setflags(write=False)
    return AuditPool(
        examples=examples,
        d=d,
        strata_index={s: tuple(v) for s, v in strata.items()},
        ids=tuple(ex.id for ex in examples),
        features=feats,
        groups=groups,
        labels=labels,
        index_of=seen,
    )


def _parse_binary(value: str, row: int, name: str) -> int:
    v = value.strip()
    if v not in ("0", "1"):
        raise NonBinaryField(row, name, value)
    return int(v)


def _load_csv(path: str) -> list[AuditExample]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(1, "empty file") from None
        if header[:3] != ["id", "group", "label"]:
            raise ParseError(1, f"header must start with id,group,label; got {header[:3]}")
        rest = header[3:]
        has_text = bool(rest) and rest[-1] == "text"
        feat_cols = rest[:-1] if has_text else rest
        d = len(feat_cols)
        expected = [f"f{i}" for i in range(d)]
        if feat_cols != expected:
            raise ParseError(1, f"feature columns must be f0..f{d - 1}; got {feat_cols}")
        if d == 0:
            raise ParseError(1, "no feature columns")

        out: list[AuditExample] = []
        for row, rec in enumerate(reader):
            line = row + 2
            width = 3 + d + (1 if has_text else 0)
            if len(rec) != width:
                # Distinguish a wrong feature count from general malformedness.
                if len(rec) >= 3:
                    raise InconsistentDimension(row, d, len(rec) - 3 - (1 if has_text else 0))
                raise ParseError(line, f"expected {width} fields, got {len(rec)}")
            g = _parse_binary(rec[1], row, "group")
            y = _parse_binary(rec[2], row, "label")
            try:
                feats = np.array([float(v) for v in rec[3 : 3 + d]], dtype=np.float64)
            except ValueError as exc:
                raise ParseError(line, f"bad feature value ({exc})") from None
            if not np.all(np.isfinite(feats)):
                raise ParseError(line, "non-finite feature value")
            text = rec[3 + d] if has_text else None
            out.append(AuditExample(id=rec[0], features=feats, group=g, label=y, text=text))
    return out


def _load_jsonl(path: str) -> list[AuditExample]:
    out: list[AuditExample] = []
    d: int | None = None
    with open(path, "r", encoding="utf-8") as fh:
        for row, raw in enumerate(fh):
            line = row + 1
            raw = raw.strip()
            if not raw:
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ParseError(line, f"bad json ({exc.msg})") from None
            try:
                rid = str(rec["id"])
                group = rec["group"]
                label = rec["label"]
                feats_raw = rec["features"]
            except KeyError as exc:
                raise ParseError(line, f"missing field {exc.args[0]!r}") from None
            if group not in (0, 1):
                raise NonBinaryField(row, "group", str(group))
            if label not in (0, 1):
                raise NonBinaryField(row, "label", str(label))
            feats = np.asarray(feats_raw, dtype=np.float64).reshape(-1)
            if d is None:
                d = feats.shape[0]
            elif feats.shape[0] != d:
                raise InconsistentDimension(row, d, feats.shape[0])
            if not np.all(np.isfinite(feats)):
                raise ParseError(line, "non-finite feature value")
            out.append(
                AuditExample(
                    id=rid, features=feats, group=int(group), label=int(label),
                    text=rec.get("text"),
                )
            )
    return out


def load_pool(path: str, format: str = "csv") -> AuditPool:
    """Load a pool from ``csv`` or ``jsonl``; deterministic in the file bytes.

    CSV column order is fixed as ``id,group,label,f0..f{d-1}[,text]``;
    JSONL records use the named fields ``id``, ``group``, ``label``,
    ``features`` and optionally ``text``.
    """
    if format == "csv":
        examples = _load_csv(path)
    elif format == "jsonl":
        examples = _load_jsonl(path)
    else:
        raise ValueError(f"unknown pool format {format!r}")
    if not examples:
        raise EmptyPool(f"{path}: no examples")
    return build_pool(examples)


def dump_pool(pool: AuditPool, path: str) -> None:
    """Write a pool as CSV so that a reload reproduces it field-for-field.

    Floats are written with shortest round-trip repr, so dump -> load -> dump
    is byte-stable.
    """
    has_text = any(ex.text is not None for ex in pool.examples)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        cols = ["id", "group", "label"] + [f"f{i}" for i in range(pool.d)]
        if has_text:
            cols.append("text")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for ex in pool.examples:
            rec = [ex.id, str(ex.group), str(ex.label)] + [repr(float(v)) for v in ex.features]
            if has_text:
                rec.append(ex.text if ex.text is not None else "")
            writer.writerow(rec)


def stratum_proportions(
    pool: AuditPool, keys: str = "group_and_label"
) -> dict[tuple[int, int], float] | dict[int, float]:
    """Empirical stratum proportions over the pool.

    ``keys`` selects the partition: ``"group"`` or ``"group_and_label"``.
    Proportions sum to 1 (up to 1e-12) and equal stratum size / pool size.
    """
    if len(pool) == 0:
        raise EmptyPool("cannot compute proportions of an empty pool")
    n = float(len(pool))
    if keys == "group":
        out_g: dict[int, float] = {0: 0.0, 1: 0.0}
        for (g, _), ids in pool.strata_index.items():
            out_g[g] += len(ids) / n
        return out_g
    if keys == "group_and_label":
        return {s: len(ids) / n for s, ids in pool.strata_index.items()}
    raise ValueError(f"unknown stratification keys {keys!r}")
