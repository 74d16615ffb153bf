"""Datasets with partially observed labels, sampling designs and folds.

A unit is the triplet ``(X, L, LY)``: covariates, a label indicator and an
outcome that is only observed on labeled units. Missing outcomes are stored
as ``NaN`` in a float array.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import (
    ConsistencyError,
    DataError,
    DegenerateDesignError,
    InvalidFoldError,
    ParseError,
    SchemaError,
)

MISSING_TOKENS = frozenset({"", "NA", "na", "NaN", "nan"})


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Covariates ``features`` (n x d), labels ``label`` and outcomes ``outcome``.

    ``outcome[i]`` is NaN exactly when ``label[i] == 0``.
    """

    features: np.ndarray
    label: np.ndarray
    outcome: np.ndarray
    feature_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        X = np.array(self.features, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2:
            raise DataError("features must be a 2-d array")
        L = np.asarray(self.label)
        if L.ndim != 1 or L.shape[0] != X.shape[0]:
            raise DataError("label must be a vector with one entry per row")
        if not np.all((L == 0) | (L == 1)):
            raise DataError("label entries must be 0 or 1")
        L = L.astype(np.int8)
        Y = np.array(self.outcome, dtype=np.float64)
        if Y.shape != L.shape:
            raise DataError("outcome must be a vector with one entry per row")
        present = ~np.isnan(Y)
        if np.any(present != (L == 1)):
            raise ConsistencyError("outcome must be present exactly on labeled rows")
        if not np.all((Y[present] == 0) | (Y[present] == 1)):
            raise DataError("observed outcomes must be 0 or 1")
        if L.sum() == 0 or L.sum() == L.size:
            raise DataError("need at least one labeled and one unlabeled unit")
        if not np.all(np.isfinite(X)):
            raise DataError("features must be finite")
        names = tuple(self.feature_names) or tuple(f"X{j + 1}" for j in range(X.shape[1]))
        if len(names) != X.shape[1]:
            raise DataError("feature_names length does not match the number of columns")
        object.__setattr__(self, "features", _readonly(X))
        object.__setattr__(self, "label", _readonly(L))
        object.__setattr__(self, "outcome", _readonly(Y))
        object.__setattr__(self, "feature_names", names)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def labeled(self) -> np.ndarray:
        """Boolean mask of labeled units."""
        return self.label == 1

    def outcome_filled(self) -> np.ndarray:
        """Outcome with unlabeled entries replaced by 0 (``L * Y``)."""
        return np.where(self.labeled, self.outcome, 0.0)

    def take(self, index: np.ndarray) -> Dataset:
        return Dataset(self.features[index], self.label[index], self.outcome[index], self.feature_names)

    def equals(self, other: Dataset) -> bool:
        return (
            self.feature_names == other.feature_names
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.label, other.label)
            and np.array_equal(self.outcome, other.outcome, equal_nan=True)
        )


def _parse_float(text: str, row: int, col: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"row {row}: column {col!r} is not numeric: {text!r}") from None
    if not math.isfinite(value):
        raise ParseError(f"row {row}: column {col!r} is not finite: {text!r}")
    return value


def load_csv(
    path: str | Path,
    feature_cols: Sequence[str] | None = None,
    label_col: str = "L",
    outcome_col: str = "Y",
) -> Dataset:
    """Read a dataset from a CSV file with a header row.

    When ``feature_cols`` is None every column other than the label and
    outcome columns is used as a feature, in file order. Empty cells and the
    literal ``NA`` mark a missing outcome.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        for col in (label_col, outcome_col):
            if col not in header:
                raise SchemaError(f"{path}: missing column {col!r}")
        if feature_cols is None:
            feature_cols = [h for h in header if h not in (label_col, outcome_col)]
        missing = [c for c in feature_cols if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing feature columns {missing}")
        if not feature_cols:
            raise SchemaError(f"{path}: no feature columns")
        pos = {h: i for i, h in enumerate(header)}
        fidx = [pos[c] for c in feature_cols]
        X, L, Y = [], [], []
        for r, cells in enumerate(reader, start=2):
            if not cells or all(not c.strip() for c in cells):
                continue
            if len(cells) != len(header):
                raise ParseError(f"row {r}: expected {len(header)} cells, got {len(cells)}")
            lab = cells[pos[label_col]].strip()
            if lab not in ("0", "1", "0.0", "1.0"):
                raise ParseError(f"row {r}: label must be 0 or 1, got {lab!r}")
            lab_v = int(float(lab))
            out = cells[pos[outcome_col]].strip()
            if out in MISSING_TOKENS:
                if lab_v == 1:
                    raise ConsistencyError(f"row {r}: labeled row has no outcome")
                y = math.nan
            else:
                if lab_v == 0:
                    raise ConsistencyError(f"row {r}: unlabeled row carries an outcome")
                y = _parse_float(out, r, outcome_col)
                if y not in (0.0, 1.0):
                    raise ParseError(f"row {r}: outcome must be 0 or 1, got {out!r}")
            X.append([_parse_float(cells[i].strip(), r, header[i]) for i in fidx])
            L.append(lab_v)
            Y.append(y)
    if not X:
        raise DataError(f"{path}: no data rows")
    return Dataset(np.array(X), np.array(L), np.array(Y), tuple(feature_cols))


def write_csv(dataset: Dataset, path: str | Path, label_col: str = "L", outcome_col: str = "Y") -> None:
    """Write ``dataset`` so that :func:`load_csv` reproduces it exactly."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*dataset.feature_names, label_col, outcome_col])
        for x, lab, y in zip(dataset.features, dataset.label, dataset.outcome):
            w.writerow([*(repr(float(v)) for v in x), int(lab), "" if np.isnan(y) else int(y)])


@dataclass(frozen=True)
class SamplingDesign:
    """Random sampling, or matched-cohort sampling with ``k`` labeled per unlabeled unit."""

    kind: str = "random"
    k: int | None = None

    def __post_init__(self):
        if self.kind not in ("random", "matched"):
            raise ValueError(f"unknown design kind {self.kind!r}")
        if self.kind == "matched" and (self.k is None or int(self.k) != self.k or self.k < 1):
            raise ValueError("matched-cohort design needs an integer k >= 1")

    @classmethod
    def random(cls) -> SamplingDesign:
        return cls("random")

    @classmethod
    def matched(cls, k: int) -> SamplingDesign:
        return cls("matched", k)

    @classmethod
    def parse(cls, text: str) -> SamplingDesign:
        """Parse ``"random"`` or ``"matched:k"``."""
        text = text.strip().lower()
        if text == "random":
            return cls.random()
        if text.startswith("matched:"):
            try:
                k = int(text.split(":", 1)[1])
            except ValueError:
                raise ValueError(f"bad design {text!r}") from None
            return cls.matched(k)
        raise ValueError(f"bad design {text!r}; expected 'random' or 'matched:k'")

    def __str__(self) -> str:
        return "random" if self.kind == "random" else f"matched:{self.k}"


def estimate_rho(dataset: Dataset, design: SamplingDesign) -> float:
    """Probability of being labeled: ``k/(k+1)`` by design, else the labeled fraction."""
    if design.kind == "matched":
        return design.k / (design.k + 1)
    n_lab = int(dataset.label.sum())
    if n_lab == 0 or n_lab == dataset.n:
        raise DegenerateDesignError("all units share the same label; rho is degenerate")
    return n_lab / dataset.n


@dataclass(frozen=True, eq=False)
class FoldAssignment:
    """``fold_of[i]`` is the (0-based) validation fold containing unit ``i``."""

    fold_of: np.ndarray
    J: int

    def __post_init__(self):
        f = np.asarray(self.fold_of, dtype=np.int64)
        if f.ndim != 1 or f.size == 0 or f.min() < 0 or f.max() >= self.J:
            raise InvalidFoldError("fold indices must lie in 0..J-1")
        object.__setattr__(self, "fold_of", _readonly(f))

    @property
    def n(self) -> int:
        return self.fold_of.size

    def validation(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of == j)

    def training(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of != j)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.fold_of, minlength=self.J)


def make_folds(
    n: int,
    J: int,
    rng: np.random.Generator | int | None = None,
    strata: np.ndarray | None = None,
) -> FoldAssignment:
    """Randomly partition ``range(n)`` into ``J`` folds of near-equal size.

    With ``strata`` the units of each stratum are spread evenly over the folds
    while the overall fold sizes still differ by at most one.
    """
    if J < 2 or J > n:
        raise InvalidFoldError(f"need 2 <= J <= n, got J={J}, n={n}")
    rng = np.random.default_rng(rng)
    if strata is None:
        order = rng.permutation(n)
    else:
        strata = np.asarray(strata)
        if strata.shape != (n,):
            raise InvalidFoldError("strata must have one entry per unit")
        order = np.concatenate([rng.permutation(np.flatnonzero(strata == s)) for s in np.unique(strata)])
    labels = rng.permutation(J)
    fold_of = np.empty(n, dtype=np.int64)
    fold_of[order] = labels[np.arange(n) % J]
    return FoldAssignment(fold_of, J)
