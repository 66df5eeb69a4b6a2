"""Prediction metrics, latent-recovery scoring, and paired significance.

The Wilcoxon signed-rank test drops zero differences, mid-ranks ties, and
reports the sum of positive-difference ranks as W. The two-sided p-value is
exact by enumeration of the sign-flip distribution for n <= 20, and uses a
normal approximation with tie and continuity corrections above that.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (ArgumentError, CorrelationUndefined, InsufficientData)

DROUGHT_THRESHOLD = 0.6


@dataclass(frozen=True)
class EvalSeries:
    """An observed/predicted pair with a unit tag."""

    y: np.ndarray
    y_hat: np.ndarray
    unit: str = ""

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64)
        y_hat = np.asarray(self.y_hat, dtype=np.float64)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "y_hat", y_hat)
        if y.shape != y_hat.shape:
            raise ArgumentError(
                f"series lengths differ: {y.shape} vs {y_hat.shape}")
        if y.size == 0:
            raise ArgumentError("empty series")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(y_hat))):
            raise ArgumentError("series contain non-finite entries")


def _series(y, y_hat=None, unit=""):
    if isinstance(y, EvalSeries):
        return y
    return EvalSeries(y=y, y_hat=y_hat, unit=unit)


def rmse(y, y_hat=None):
    s = _series(y, y_hat)
    return float(np.sqrt(np.mean((s.y - s.y_hat) ** 2)))


def mae(y, y_hat=None):
    s = _series(y, y_hat)
    return float(np.mean(np.abs(s.y - s.y_hat)))


def cc(y, y_hat=None):
    """Pearson correlation; undefined for constant series."""
    s = _series(y, y_hat)
    if s.y.size < 2:
        raise ArgumentError("correlation needs at least two points")
    dy = s.y - s.y.mean()
    dh = s.y_hat - s.y_hat.mean()
    denom = np.sqrt(np.sum(dy * dy) * np.sum(dh * dh))
    if denom == 0.0:
        raise CorrelationUndefined("constant series has no correlation")
    return float(np.sum(dy * dh) / denom)


def r2(y, y_hat=None):
    """Coefficient of determination, 1 - SS_res / SS_tot."""
    s = _series(y, y_hat)
    if s.y.size < 2:
        raise ArgumentError("r2 needs at least two points")
    ss_tot = float(np.sum((s.y - s.y.mean()) ** 2))
    if ss_tot == 0.0:
        raise CorrelationUndefined("r2 undefined for constant observations")
    ss_res = float(np.sum((s.y - s.y_hat) ** 2))
    return 1.0 - ss_res / ss_tot


def rmspe(y, y_hat=None):
    """Root mean square percentage error in percent.

    Zero observations are excluded; returns (value, n_excluded).
    """
    s = _series(y, y_hat)
    keep = s.y != 0.0
    n_excluded = int(np.sum(~keep))
    if not np.any(keep):
        raise ArgumentError("rmspe: all observations are zero")
    rel = (s.y[keep] - s.y_hat[keep]) / s.y[keep]
    return float(np.sqrt(np.mean(rel * rel)) * 100.0), n_excluded


def _midranks(values):
    """Average ranks (1-based) with ties sharing their midrank."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _exact_two_sided_p(ranks, w_plus):
    """Exact tail probability of W+ under random sign flips.

    Dynamic programming over doubled ranks (midranks are half-integers, so
    doubling makes them integers). The null distribution of 2*W+ lives on
    0..total and is symmetric around total/2; the two-sided p-value is the
    probability of a deviation at least as large as the observed one.
    """
    doubled = np.rint(2.0 * ranks).astype(np.int64)
    total = int(doubled.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:total + 1 - r]
        counts = counts + shifted
    center = total / 2.0
    observed_dev = abs(2.0 * w_plus - center)
    support = np.arange(total + 1)
    mask = np.abs(support - center) >= observed_dev - 1e-9
    p = float(counts[mask].sum() / 2.0 ** len(ranks))
    return min(1.0, p)


@dataclass(frozen=True)
class WilcoxonResult:
    w: float
    p: float
    n_effective: int
    method: str


def wilcoxon_signed_rank(a, b):
    """Two-sided paired Wilcoxon signed-rank test.

    W is the positive-rank sum. Zero differences are dropped (Wilcoxon's
    treatment); fewer than five effective pairs is an error.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ArgumentError(f"paired samples differ in length: {a.shape} vs {b.shape}")
    d = a - b
    d = d[d != 0.0]
    n = d.size
    if n < 5:
        raise InsufficientData(
            f"need >= 5 nonzero differences, got {n}")
    ranks = _midranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if n <= 20:
        p = _exact_two_sided_p(ranks, w_plus)
        method = "exact"
    else:
        mu = n * (n + 1) / 4.0
        sigma2 = n * (n + 1) * (2 * n + 1) / 24.0
        _, tie_counts = np.unique(np.abs(d), return_counts=True)
        sigma2 -= float(np.sum(tie_counts ** 3 - tie_counts)) / 48.0
        dev = w_plus - mu
        correction = 0.5 * np.sign(dev)
        z = (dev - correction) / math.sqrt(sigma2)
        p = min(1.0, math.erfc(abs(z) / math.sqrt(2.0)))
        method = "normal"
    return WilcoxonResult(w=w_plus, p=p, n_effective=n, method=method)


def drought_days(fw_series, threshold=DROUGHT_THRESHOLD):
    """Number of days with the stress factor strictly below the threshold."""
    return int(np.sum(np.asarray(fw_series) < threshold))


LATENT_NAMES = ("lai", "par", "rue", "fw")


@dataclass
class LatentRecovery:
    rmspe_pct: float
    rmspe_excluded: int
    cc: Optional[float]
    note: str = ""


def latent_recovery(pred, truth, threshold=DROUGHT_THRESHOLD):
    """Score predicted latents against ground truth, per variable.

    ``pred`` and ``truth`` map variable name -> dict of location -> series
    (or a single 1-D series). The stress factor additionally gets per-location
    drought-day counts at the given threshold.
    """
    report = {}
    for name in LATENT_NAMES:
        if name not in pred or name not in truth:
            continue
        p_all, t_all = _flatten_aligned(pred[name], truth[name], name)
        value, excluded = rmspe(t_all, p_all)
        try:
            corr = cc(t_all, p_all)
            note = ""
        except CorrelationUndefined as err:
            corr = None
            note = str(err)
        report[name] = LatentRecovery(rmspe_pct=value, rmspe_excluded=excluded,
                                      cc=corr, note=note)
    drought = {}
    if "fw" in pred and "fw" in truth and isinstance(pred["fw"], dict):
        for loc in sorted(pred["fw"]):
            if loc not in truth["fw"]:
                raise ArgumentError(f"no ground-truth stress series for {loc}")
            drought[loc] = {
                "pred": drought_days(pred["fw"][loc], threshold),
                "truth": drought_days(truth["fw"][loc], threshold),
            }
    return report, drought


def _flatten_aligned(pred, truth, name):
    if isinstance(pred, dict) != isinstance(truth, dict):
        raise ArgumentError(f"{name}: prediction/truth structures differ")
    if isinstance(pred, dict):
        if sorted(pred) != sorted(truth):
            raise ArgumentError(f"{name}: location sets differ")
        p_parts, t_parts = [], []
        for loc in sorted(pred):
            p = np.asarray(pred[loc], dtype=np.float64)
            t = np.asarray(truth[loc], dtype=np.float64)
            if p.shape != t.shape:
                raise ArgumentError(f"{name}/{loc}: series lengths differ")
            p_parts.append(p)
            t_parts.append(t)
        return np.concatenate(p_parts), np.concatenate(t_parts)
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise ArgumentError(f"{name}: series lengths differ")
    return p, t


@dataclass
class SignificanceEntry:
    comparison: str
    w: float
    p: float
    n: int
    method: str


@dataclass
class EvalReport:
    """Metrics, latent recovery, and significance results for one run."""

    model_kind: str = ""
    metrics: dict = field(default_factory=dict)       # group -> {metric: value}
    latent: dict = field(default_factory=dict)        # variable -> LatentRecovery
    drought: dict = field(default_factory=dict)       # location -> counts
    significance: list = field(default_factory=list)  # SignificanceEntry
    notes: list = field(default_factory=list)

    def to_dict(self):
        return {
            "model_kind": self.model_kind,
            "metrics": self.metrics,
            "latent": {
                name: {
                    "rmspe_pct": rec.rmspe_pct,
                    "rmspe_excluded": rec.rmspe_excluded,
                    "cc": rec.cc,
                    "note": rec.note,
                }
                for name, rec in self.latent.items()
            },
            "drought": self.drought,
            "significance": [
                {"comparison": s.comparison, "w": s.w, "p": s.p,
                 "n": s.n, "method": s.method}
                for s in self.significance
            ],
            "notes": self.notes,
        }

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def csv_rows(self):
        """Flat plot-ready rows: metric,variable,treatment,value."""
        rows = []
        for group, values in sorted(self.metrics.items()):
            for metric, value in sorted(values.items()):
                variable, _, treatment = group.partition("/")
                rows.append((metric, variable, treatment or "all", value))
        for name, rec in sorted(self.latent.items()):
            rows.append(("rmspe_pct", name, "all", rec.rmspe_pct))
            if rec.cc is not None:
                rows.append(("cc", name, "all", rec.cc))
        return rows

    def to_csv(self, path):
        lines = ["metric,variable,treatment,value"]
        for metric, variable, treatment, value in self.csv_rows():
            lines.append(f"{metric},{variable},{treatment},{repr(float(value))}")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
