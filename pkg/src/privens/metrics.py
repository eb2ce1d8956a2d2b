"""Horizon-based AUROC, AUROC-adapted accuracy loss, and significance testing.

Prediction horizons mark the steps inside a window before sepsis onset as
positives and all earlier steps as negatives; steps from onset onwards are
excluded because only the first episode is evaluated. Non-sepsis patients
contribute every step as a negative. Scores pooled over patients give one ROC
per horizon (micro-averaging); a per-patient macro average is available but
carries no correctness claim.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats as scipy_stats

from .cohort import PatientRecord
from .errors import ConfigError, DegenerateBaselineError, UndefinedAurocError

log = logging.getLogger(__name__)

SIGNIFICANCE_ALPHA = 0.05
STEPS_PER_HOUR = 2  # 30-minute grid


@dataclass(frozen=True)
class HorizonSpec:
    """A point horizon (h hours before onset) or an interval (h1-h2 hours before)."""

    kind: str  # "point" | "interval"
    hours: tuple

    def __post_init__(self):
        if self.kind == "point":
            if len(self.hours) != 1 or self.hours[0] <= 0:
                raise ConfigError(f"point horizon needs one positive hour value, got {self.hours}")
        elif self.kind == "interval":
            if len(self.hours) != 2 or not 0 < self.hours[0] < self.hours[1]:
                raise ConfigError(f"interval horizon needs 0 < h1 < h2, got {self.hours}")
        else:
            raise ConfigError(f"unknown horizon kind {self.kind!r}")

    @classmethod
    def point(cls, hours: float) -> "HorizonSpec":
        return cls("point", (float(hours),))

    @classmethod
    def interval(cls, near_hours: float, far_hours: float) -> "HorizonSpec":
        return cls("interval", (float(near_hours), float(far_hours)))

    @classmethod
    def parse(cls, text: str) -> "HorizonSpec":
        """Parse "4h" or "12h-8h" (far-near order, as in results tables)."""
        parts = text.strip().lower().split("-")
        try:
            if len(parts) == 1:
                return cls.point(float(parts[0].rstrip("h")))
            if len(parts) == 2:
                far, near = (float(p.rstrip("h")) for p in parts)
                return cls.interval(near, far)
        except ValueError:
            pass
        raise ConfigError(f"cannot parse horizon {text!r}")

    @property
    def name(self) -> str:
        def fmt(h):
            return f"{h:g}h"

        if self.kind == "point":
            return fmt(self.hours[0])
        return f"{fmt(self.hours[1])}-{fmt(self.hours[0])}"

    def window_steps(self) -> tuple[int, int]:
        """(far, near) offsets from onset, in steps; positives are [onset-far, onset-near)."""
        if self.kind == "point":
            return int(round(self.hours[0] * STEPS_PER_HOUR)), 0
        near, far = self.hours
        return int(round(far * STEPS_PER_HOUR)), int(round(near * STEPS_PER_HOUR))


DEFAULT_HORIZONS = (
    HorizonSpec.point(4),
    HorizonSpec.point(8),
    HorizonSpec.point(12),
    HorizonSpec.interval(8, 12),
    HorizonSpec.interval(12, 24),
)


def horizon_labels(record: PatientRecord, spec: HorizonSpec):
    """Steps considered and their binary labels for one record, or None if skipped.

    Sepsis records whose horizon window starts before admission are skipped
    with a warning (not enough pre-onset history).
    """
    n_steps = record.n_steps
    if not record.is_sepsis:
        return np.arange(n_steps), np.zeros(n_steps, dtype=np.int8)

    far, near = spec.window_steps()
    lo = record.onset_step - far
    hi = record.onset_step - near
    if lo < 0:
        log.warning(
            "patient %s skipped for horizon %s: window starts %d steps before admission",
            record.patient_id, spec.name, -lo,
        )
        return None
    hi_clamped = min(hi, n_steps)  # exclude steps at/after onset and past discharge
    steps = np.arange(hi_clamped)
    labels = (steps >= lo).astype(np.int8)
    return steps, labels


def pooled_horizon_scores(records, score_fn, spec: HorizonSpec):
    """Pool (scores, labels) over records for one horizon; score_fn maps record -> series."""
    scores, labels = [], []
    for record in records:
        considered = horizon_labels(record, spec)
        if considered is None:
            continue
        steps, step_labels = considered
        if steps.size == 0:
            continue
        scores.append(np.asarray(score_fn(record))[steps])
        labels.append(step_labels)
    if not scores:
        return np.empty(0), np.empty(0, dtype=np.int8)
    return np.concatenate(scores), np.concatenate(labels)


def _midranks(values: np.ndarray) -> np.ndarray:
    """1-based average ranks with midrank tie handling; exact half-integers."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j + 2) / 2.0  # average of ranks i+1 .. j+1
        i = j + 1
    return ranks


def auroc(scores, labels) -> float:
    """Rank-statistic AUROC with midrank tie handling.

    Equals P(score_pos > score_neg) + 0.5 P(tie) over all positive-negative
    pairs, and the trapezoidal area under the ROC curve.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAurocError(f"need both classes, got {n_pos} positives / {n_neg} negatives")
    ranks = _midranks(scores)
    u_stat = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u_stat) / (n_pos * n_neg)


@dataclass
class RocCurve:
    thresholds: np.ndarray  # descending score cut-points
    fpr: np.ndarray
    tpr: np.ndarray
    auroc: float


def roc_curve(scores, labels) -> RocCurve:
    """ROC curve over all distinct thresholds, with trapezoidal area."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAurocError(f"need both classes, got {n_pos} positives / {n_neg} negatives")
    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    tp = np.cumsum(pos[order])
    fp = np.cumsum(~pos[order])
    distinct = np.flatnonzero(np.diff(sorted_scores, append=-np.inf))
    tpr = np.concatenate([[0.0], tp[distinct] / n_pos])
    fpr = np.concatenate([[0.0], fp[distinct] / n_neg])
    thresholds = np.concatenate([[np.inf], sorted_scores[distinct]])
    area = float(np.trapezoid(tpr, fpr))
    return RocCurve(thresholds=thresholds, fpr=fpr, tpr=tpr, auroc=area)


def accuracy_loss(auroc_private: float, auroc_nonprivate: float) -> float:
    """1 - (2 * AUROC_private - 1) / (2 * AUROC_nonprivate - 1)."""
    if auroc_nonprivate <= 0.5:
        raise DegenerateBaselineError(
            f"non-private AUROC must exceed 0.5, got {auroc_nonprivate}"
        )
    return float(1.0 - (2.0 * auroc_private - 1.0) / (2.0 * auroc_nonprivate - 1.0))


class TTestResult(tuple):
    """(statistic, p_value) pair with attribute access."""

    __slots__ = ()

    def __new__(cls, statistic, p_value):
        return super().__new__(cls, (statistic, p_value))

    @property
    def statistic(self):
        return self[0]

    @property
    def p_value(self):
        return self[1]


def two_sample_t(a, b) -> TTestResult:
    """Welch two-sample t-test, two-sided.

    Zero variance in both samples gives p = 1 for equal means and p = 0
    otherwise (the statistic degenerates to +-inf).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise ConfigError("each sample needs at least two observations")
    mean_a, mean_b = a.mean(), b.mean()
    var_a, var_b = a.var(ddof=1), b.var(ddof=1)
    se_sq = var_a / a.size + var_b / b.size
    if se_sq == 0.0:
        if mean_a == mean_b:
            return TTestResult(0.0, 1.0)
        return TTestResult(math.copysign(float("inf"), mean_a - mean_b), 0.0)
    t_stat = (mean_a - mean_b) / np.sqrt(se_sq)
    df = se_sq**2 / (
        (var_a / a.size) ** 2 / (a.size - 1) + (var_b / b.size) ** 2 / (b.size - 1)
    )
    p_value = 2.0 * float(scipy_stats.t.sf(abs(t_stat), df))
    return TTestResult(float(t_stat), min(p_value, 1.0))
