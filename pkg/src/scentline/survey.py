"""Questionnaire scoring: reverse coding, factor means, alpha, correlation.

Sample statistics use the n-1 denominator throughout; Cronbach's alpha is
sensitive to that choice, so it is fixed here rather than configurable.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class InsufficientDataError(ValueError):
    pass


class UndefinedCorrelationError(ValueError):
    pass


class UnknownItemError(KeyError):
    def __init__(self, item: str, known: list[str]):
        super().__init__(f"unknown item id {item!r}; matrix has: {', '.join(known)}")
        self.item = item


def reverse_code(x: float, scale_min: float, scale_max: float) -> float:
    """Flip a rating so higher always means better; involutive."""
    if not scale_min <= x <= scale_max:
        raise ValueError(f"rating {x} outside scale [{scale_min}, {scale_max}]")
    return scale_min + scale_max - x


@dataclass
class ResponseMatrix:
    """Respondents x items ratings; NaN marks a missing answer."""

    items: list[str]
    values: np.ndarray
    scale_min: float = 1.0
    scale_max: float = 7.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.items):
            raise ValueError("values must be respondents x items")
        present = self.values[~np.isnan(self.values)]
        if present.size and (
            present.min() < self.scale_min or present.max() > self.scale_max
        ):
            raise ValueError("ratings outside the declared scale range")

    @property
    def n_respondents(self) -> int:
        return self.values.shape[0]

    def columns(self, items: list[str]) -> np.ndarray:
        indices = []
        for item in items:
            if item not in self.items:
                raise UnknownItemError(item, self.items)
            indices.append(self.items.index(item))
        return self.values[:, indices]

    @classmethod
    def from_csv(
        cls, path: str | Path, scale_min: float = 1.0, scale_max: float = 7.0
    ) -> "ResponseMatrix":
        """Header row of item ids, one row per respondent, blank = missing."""
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = [c.strip() for c in next(reader)]
            rows = []
            for row in reader:
                if not any(cell.strip() for cell in row):
                    continue
                rows.append(
                    [float(c) if c.strip() else math.nan for c in row[: len(header)]]
                )
        return cls(
            items=header,
            values=np.array(rows, dtype=np.float64).reshape(-1, len(header)),
            scale_min=scale_min,
            scale_max=scale_max,
        )


@dataclass(frozen=True)
class ScaleDef:
    """One questionnaire scale: its items, reverse-coded set, factor groups."""

    name: str
    items: tuple[str, ...]
    reverse_coded: frozenset[str] = frozenset()
    factors: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        stray = self.reverse_coded - set(self.items)
        if stray:
            raise ValueError(f"reverse_coded ids not in scale: {sorted(stray)}")
        for factor, members in self.factors.items():
            missing = set(members) - set(self.items)
            if missing:
                raise ValueError(
                    f"factor {factor!r} references ids not in scale: {sorted(missing)}"
                )


def complete_rows(values: np.ndarray) -> tuple[np.ndarray, int]:
    """Drop respondents with any missing rating; returns (clean, n_dropped)."""
    values = np.asarray(values, dtype=np.float64)
    keep = ~np.isnan(values).any(axis=1)
    return values[keep], int((~keep).sum())


def cronbach_alpha(values: np.ndarray) -> float:
    """k/(k-1) * (1 - sum of item variances / variance of row sums).

    Expects a complete respondents x items matrix (use ``complete_rows``
    first); needs at least 2 items and 2 respondents.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise InsufficientDataError("need a respondents x items matrix")
    n, k = values.shape
    if k < 2 or n < 2:
        raise InsufficientDataError(
            f"alpha needs >= 2 items and >= 2 respondents, got {n}x{k}"
        )
    if np.isnan(values).any():
        raise InsufficientDataError("matrix contains missing ratings; drop rows first")
    item_variances = values.var(axis=0, ddof=1)
    total_variance = values.sum(axis=1).var(ddof=1)
    if total_variance == 0:
        raise InsufficientDataError("row sums have zero variance")
    return (k / (k - 1)) * (1.0 - item_variances.sum() / total_variance)


def pearson_r(x: np.ndarray, y: np.ndarray) -> float:
    """Product-moment correlation; raises when undefined."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-d arrays of equal length")
    if len(x) < 3:
        raise InsufficientDataError("correlation needs at least 3 points")
    dx = x - x.mean()
    dy = y - y.mean()
    ssx = float(dx @ dx)
    ssy = float(dy @ dy)
    if ssx == 0 or ssy == 0:
        raise UndefinedCorrelationError("zero variance in one of the inputs")
    r = float(dx @ dy) / math.sqrt(ssx * ssy)
    return min(1.0, max(-1.0, r))


def zscores(x: np.ndarray) -> np.ndarray:
    """Standardize to mean 0, sd 1 (sample sd, n-1)."""
    x = np.asarray(x, dtype=np.float64)
    sd = x.std(ddof=1)
    if sd == 0:
        raise UndefinedCorrelationError("zero variance; z-scores undefined")
    return (x - x.mean()) / sd


@dataclass
class ScaleScores:
    """Per-respondent factor means plus the across-respondent summary."""

    scale: str
    factors: list[str]
    per_respondent: dict[str, np.ndarray]  # factor -> array (NaN = not scorable)
    summary: dict[str, dict]  # factor -> {mean, n}
    alpha: float | None
    alpha_rows_dropped: int


def score_scales(
    matrix: ResponseMatrix, scale: ScaleDef, min_answered_fraction: float = 0.5
) -> ScaleScores:
    """Factor means with reverse-coded items flipped first.

    A respondent scores a factor only when they answered at least
    ``min_answered_fraction`` of its items (available-item mean); otherwise
    that factor score is absent (NaN). Scale alpha is computed over
    complete rows of the full item set.
    """
    oriented = matrix.columns(list(scale.items)).copy()
    for j, item in enumerate(scale.items):
        if item in scale.reverse_coded:
            column = oriented[:, j]
            present = ~np.isnan(column)
            column[present] = matrix.scale_min + matrix.scale_max - column[present]

    factors = scale.factors or {scale.name: scale.items}
    per_respondent: dict[str, np.ndarray] = {}
    summary: dict[str, dict] = {}
    for factor, members in factors.items():
        indices = [scale.items.index(item) for item in members]
        block = oriented[:, indices]
        answered = (~np.isnan(block)).sum(axis=1)
        needed = max(1, math.ceil(len(members) * min_answered_fraction))
        with np.errstate(invalid="ignore"):
            means = np.nanmean(
                np.where(np.isnan(block), np.nan, block), axis=1
            )
        means[answered < needed] = np.nan
        per_respondent[factor] = means
        scored = means[~np.isnan(means)]
        summary[factor] = {
            "mean": float(scored.mean()) if scored.size else None,
            "n": int(scored.size),
        }

    clean, dropped = complete_rows(oriented)
    try:
        alpha = cronbach_alpha(clean)
    except InsufficientDataError:
        alpha = None
    return ScaleScores(
        scale=scale.name,
        factors=list(factors),
        per_respondent=per_respondent,
        summary=summary,
        alpha=alpha,
        alpha_rows_dropped=dropped,
    )


def score_correlations(scores: ScaleScores) -> dict[str, float]:
    """Pairwise Pearson r between factor score columns (complete pairs only)."""
    out: dict[str, float] = {}
    names = scores.factors
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            xa = scores.per_respondent[a]
            xb = scores.per_respondent[b]
            ok = ~(np.isnan(xa) | np.isnan(xb))
            if ok.sum() < 3:
                continue
            try:
                out[f"{a}~{b}"] = pearson_r(xa[ok], xb[ok])
            except (InsufficientDataError, UndefinedCorrelationError):
                continue
    return out
