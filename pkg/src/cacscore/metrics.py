"""Agreement statistics between reference and predicted calcium scores."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .refscore import CATEGORIES, category_index


class DegenerateAgreementError(ValueError):
    """Raised when a statistic is undefined for the given inputs."""


def _pair(a, b, min_n=1):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    if len(a) < min_n:
        raise ValueError(f"need at least {min_n} paired values, got {len(a)}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("scores must be finite")
    return a, b


def anova_two_way(ratings: np.ndarray) -> tuple[float, float, float]:
    """Mean squares (rows, columns, residual) of an n-subjects by k-raters table."""
    y = np.asarray(ratings, dtype=np.float64)
    n, k = y.shape
    grand = y.mean()
    ss_rows = k * np.sum((y.mean(axis=1) - grand) ** 2)
    ss_cols = n * np.sum((y.mean(axis=0) - grand) ** 2)
    ss_err = np.sum((y - grand) ** 2) - ss_rows - ss_cols
    msr = ss_rows / (n - 1)
    msc = ss_cols / (k - 1)
    mse = max(ss_err, 0.0) / ((n - 1) * (k - 1))
    return msr, msc, mse


def icc_2_1_table(ratings, alpha: float = 0.05) -> tuple[float, tuple[float, float]]:
    """ICC(2,1) with its F-based confidence interval for an (n, k) ratings table.

    Two-way random effects, absolute agreement, single measure. The
    interval is the McGraw & Wong (1996) construction, which uses
    Satterthwaite degrees of freedom for the denominator.
    """
    y = np.asarray(ratings, dtype=np.float64)
    if y.ndim != 2 or y.shape[0] < 2 or y.shape[1] < 2:
        raise ValueError("ratings must be an (n >= 2, k >= 2) table")
    if not np.all(np.isfinite(y)):
        raise ValueError("ratings must be finite")
    n, k = y.shape
    if np.all(y == y[:, :1]):
        # raters agree on every subject; covers the variance-free case too
        return 1.0, (1.0, 1.0)
    msr, msc, mse = anova_two_way(y)
    denom = msr + (k - 1) * mse + k * (msc - mse) / n
    if denom <= 0:
        raise DegenerateAgreementError("ICC undefined: zero total variance with disagreeing raters")
    icc = (msr - mse) / denom

    if mse == 0 or icc >= 1:
        return float(icc), (float(icc), float(icc))
    a = k * icc / (n * (1 - icc))
    b = 1 + k * icc * (n - 1) / (n * (1 - icc))
    v_num = (a * msc + b * mse) ** 2
    v_den = (a * msc) ** 2 / (k - 1) + (b * mse) ** 2 / ((n - 1) * (k - 1))
    v = v_num / v_den if v_den > 0 else math.inf
    c = k * msc + (k * n - k - n) * mse
    with np.errstate(divide="ignore", invalid="ignore"):
        fl = stats.f.ppf(1 - alpha / 2, n - 1, v)
        fu = stats.f.ppf(1 - alpha / 2, v, n - 1)
        lo = n * (msr - fl * mse) / (fl * c + n * msr)
        hi = n * (fu * msr - mse) / (c + n * fu * msr)
    # strongly negative ICCs can leave no Satterthwaite degrees of freedom
    lo = max(lo, -1.0) if math.isfinite(lo) else -1.0
    hi = min(hi, 1.0) if math.isfinite(hi) else 1.0
    return float(icc), (float(min(lo, icc)), float(max(hi, icc)))


def icc_2_1(a, b, alpha: float = 0.05) -> tuple[float, tuple[float, float]]:
    """Two-rater ICC(2,1) between score vectors ``a`` and ``b``.

    Identical vectors give 1.0 (also when constant). Tables with no
    subject or rater variance but nonzero residual (``[0, 1]`` against
    ``[1, 0]``) have no defined ICC and raise
    :class:`DegenerateAgreementError`.
    """
    a, b = _pair(a, b, min_n=2)
    if np.array_equal(a, b):
        return 1.0, (1.0, 1.0)
    return icc_2_1_table(np.column_stack([a, b]), alpha)


def confusion_matrix(a, b, k: int = len(CATEGORIES)) -> np.ndarray:
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    if len(a) == 0:
        raise ValueError("no categories given")
    for v in (a, b):
        if not np.issubdtype(v.dtype, np.integer) or v.min() < 0 or v.max() >= k:
            raise ValueError(f"categories must be integers in [0, {k})")
    m = np.zeros((k, k), dtype=np.int64)
    np.add.at(m, (a, b), 1)
    return m


def weighted_kappa_linear(a, b, k: int = len(CATEGORIES)) -> float:
    """Cohen's kappa with agreement weights ``1 - |i - j| / (k - 1)``.

    Chance agreement reaches 1 only when both raters put every subject in
    one shared category; kappa is then taken as 1.0.
    """
    if k < 2:
        raise ValueError("need at least two categories")
    obs = confusion_matrix(a, b, k)
    n = obs.sum()
    idx = np.arange(k)
    w = 1.0 - np.abs(idx[:, None] - idx[None, :]) / (k - 1)
    p_o = float(np.sum(w * obs)) / n
    p_e = float(np.sum(w * np.outer(obs.sum(axis=1), obs.sum(axis=0)))) / n**2
    if p_e >= 1.0:
        return 1.0
    return (p_o - p_e) / (1.0 - p_e)


def accuracy(a, b) -> float:
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    if len(a) == 0:
        raise ValueError("accuracy of an empty set")
    return float(np.mean(a == b))


def mae(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


@dataclass(frozen=True)
class AgreementStats:
    """Agreement of one variant. Volume scores have no risk classes, so
    ``kappa_linear`` and ``accuracy`` are None for them."""

    icc: float
    icc_ci95: tuple[float, float]
    kappa_linear: float | None
    accuracy: float | None
    mae: float
    n: int

    def __post_init__(self):
        vals = [self.icc, *self.icc_ci95, self.mae]
        vals += [v for v in (self.kappa_linear, self.accuracy) if v is not None]
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("agreement statistics must be finite")
        lo, hi = self.icc_ci95
        if not lo <= self.icc <= hi:
            raise ValueError("ICC lies outside its confidence interval")


def agreement(reference, predicted, categorical: bool = True) -> AgreementStats:
    """ICC, MAE and (for Agatston scores) risk-category agreement."""
    ref, pred = _pair(reference, predicted, min_n=2)
    icc, ci = icc_2_1(ref, pred)
    kappa = acc = None
    if categorical:
        ca, cb = category_index(ref), category_index(np.maximum(pred, 0.0))
        kappa = weighted_kappa_linear(ca, cb)
        acc = accuracy(ca, cb)
    return AgreementStats(icc, ci, kappa, acc, mae(ref, pred), len(ref))


EVAL_FIELDS = ("variant", "target_kind", "icc", "ci_lo", "ci_hi", "kappa", "accuracy", "mae")


def _cell(v) -> str:
    return "" if v is None else repr(float(v))


def evaluation_table_csv(rows) -> str:
    """CSV of ``(variant, target_kind, AgreementStats)`` triples, one line each."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EVAL_FIELDS)
    for variant, target, st in rows:
        w.writerow([variant, target, _cell(st.icc), _cell(st.icc_ci95[0]), _cell(st.icc_ci95[1]),
                    _cell(st.kappa_linear), _cell(st.accuracy), _cell(st.mae)])
    return buf.getvalue()
