"""Laplace output perturbation for weighted-average predictions.

Releasing the weighted average of N bounded component outputs has
l1-sensitivity bound * max_i w_i at patient-level neighboring (one component
model added or removed), so adding Laplace noise of scale sensitivity/epsilon
makes each released value (epsilon, 0)-differentially private. Uniform
weights minimize the sensitivity, shrinking the noise scale by 1/N relative
to a single model.

Negative weights void the sensitivity bound and are refused here, even
though the accuracy path tolerates them.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .ensemble import WeightVector, combine
from .errors import BudgetExhaustedError, ConfigError, NegativeWeightError, ShapeError


@dataclass(frozen=True)
class PrivacyParams:
    """Per-query privacy budget; delta is fixed at 0 (pure DP)."""

    epsilon: float
    bound: float = 4.0
    delta: float = 0.0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if self.delta != 0.0:
            raise ConfigError("only (epsilon, 0)-differential privacy is supported")
        if self.bound <= 0:
            raise ConfigError("bound must be positive")


@dataclass
class QueryRecord:
    timestamp: int  # logical clock: query index, keeps exports deterministic
    epsilon: float
    scale: float


@dataclass
class PrivacyAccountant:
    """Sequential-composition budget ledger: charges sum, refusal on overdraft."""

    total_budget: float
    spent: float = 0.0
    query_log: list = field(default_factory=list)

    def remaining(self) -> float:
        return self.total_budget - self.spent

    def charge(self, epsilon: float, scale: float = math.nan) -> None:
        """Record an epsilon charge, refusing (and charging nothing) on overdraft."""
        if epsilon <= 0:
            raise ConfigError(f"charge must be positive, got {epsilon}")
        if self.spent + epsilon > self.total_budget:
            raise BudgetExhaustedError(
                f"query needs epsilon={epsilon}, only {self.remaining()} of "
                f"{self.total_budget} left"
            )
        self.spent += epsilon
        self.query_log.append(QueryRecord(len(self.query_log), epsilon, scale))

    def export_log(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["timestamp", "epsilon", "scale"])
            for q in self.query_log:
                writer.writerow([q.timestamp, repr(q.epsilon), repr(q.scale)])


def sensitivity(weights: WeightVector, bound: float) -> float:
    """l1-sensitivity of the weighted average: bound * max weight."""
    w = weights.values
    if np.any(w < 0):
        raise NegativeWeightError(
            "negative weights void the sensitivity bound; the privacy path refuses them"
        )
    return float(bound * w.max())


def laplace_sample(scale: float, rng: np.random.Generator, size=None):
    """Draw Laplace(0, scale) noise by inverse CDF from a uniform variate.

    With u uniform on (-1/2, 1/2) the draw is -scale * sign(u) * ln(1 - 2|u|);
    variance is 2 * scale^2. Deterministic in the generator state.
    """
    if scale <= 0:
        raise ConfigError(f"scale must be > 0, got {scale}")
    if size is None:
        u = rng.random() - 0.5
        while u == -0.5:  # open interval: ln(0) is unreachable
            u = rng.random() - 0.5
        return -scale * math.copysign(1.0, u) * math.log1p(-2.0 * abs(u)) if u != 0 else 0.0
    u = rng.random(size) - 0.5
    bad = u == -0.5
    while np.any(bad):
        u[bad] = rng.random(int(bad.sum())) - 0.5
        bad = u == -0.5
    return -scale * np.sign(u) * np.log1p(-2.0 * np.abs(u))


def noise_scale(weights: WeightVector, params: PrivacyParams) -> float:
    return sensitivity(weights, params.bound) / params.epsilon


def private_predict(
    outputs,
    weights: WeightVector,
    params: PrivacyParams,
    accountant: PrivacyAccountant,
    rng: np.random.Generator,
    clip_output: bool = False,
) -> float:
    """Release one noised weighted average, charging epsilon to the accountant.

    Component outputs are defensively clipped to [0, bound] before averaging
    so the sensitivity bound holds unconditionally. The released value is not
    re-clipped unless `clip_output` is set: post-noise clipping is mere
    post-processing (still private) but changes the error distribution, so it
    is opt-in.
    """
    outputs = np.asarray(outputs, dtype=float)
    if outputs.shape != (len(weights),):
        raise ShapeError(f"{outputs.shape} outputs vs {len(weights)} weights")
    clipped = np.clip(outputs, 0.0, params.bound)
    scale = sensitivity(weights, params.bound) / params.epsilon
    accountant.charge(params.epsilon, scale)  # charge-then-release, never the reverse
    value = combine(clipped, weights) + laplace_sample(scale, rng)
    if clip_output:
        value = float(np.clip(value, 0.0, params.bound))
    return value
