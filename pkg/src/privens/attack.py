"""Loss-threshold membership inference and the privacy-leakage protocol.

The attacker queries the target for a patient's per-step scores, computes the
patient's mean squared error against the expert labels, and declares the
patient a training member iff that loss falls strictly below the target's
average training loss. Privacy leakage is TPR - FPR: the false-positive rate
comes from the fixed non-member (test) group, while the true-positive rate is
re-estimated over many equal-size draws from the member group to get error
bars.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .cohort import PatientRecord
from .ensemble import Ensemble, ensemble_scores, history_ensemble_scores
from .errors import ConfigError
from .models import ComponentModel, predict
from .privacy import PrivacyAccountant, PrivacyParams, laplace_sample, sensitivity

log = logging.getLogger(__name__)

DEFAULT_RESAMPLES = 1000

LEAKAGE_HEADER = (
    "epsilon",
    "tpr_median",
    "fpr",
    "leakage_q25",
    "leakage_median",
    "leakage_q75",
    "target_kind",
)


@dataclass
class AttackSample:
    patient_id: str
    step_losses: np.ndarray
    mean_loss: float
    is_member: bool


@dataclass
class LeakageReport:
    epsilon: float | None  # None for an unwrapped (non-private) target
    tpr: float  # median TPR over resamples
    fpr: float
    leakage: float  # tpr - fpr
    resample_quantiles: tuple  # (q25, median, q75) of leakage over resamples
    tpr_samples: np.ndarray | None = None  # raw per-resample TPRs, for pooling


class ModelTarget:
    """Attack surface of a single component model."""

    kind = "full"

    def __init__(self, model: ComponentModel):
        self.model = model
        self.avg_train_loss = model.avg_train_loss

    def scores(self, record: PatientRecord) -> np.ndarray:
        return predict(self.model, record)


class EnsembleTarget:
    """Attack surface of a weighted-average ensemble.

    Only the combined output is exposed, never member-model internals. The
    threshold is the ensemble prediction's pooled per-step MSE over the
    patients whose data entered the training pool, supplied by the caller.
    """

    kind = "ensemble"

    def __init__(self, ens: Ensemble, avg_train_loss: float, history_weighting: bool = False):
        self.ens = ens
        self.avg_train_loss = avg_train_loss
        self.history_weighting = history_weighting

    def scores(self, record: PatientRecord) -> np.ndarray:
        if self.history_weighting:
            return history_ensemble_scores(self.ens, record)
        return ensemble_scores(self.ens, record)


class PrivateTarget:
    """Privacy wrapper: fresh Laplace noise on every released score.

    Each of a record's T per-step scores is one private query; the batch is
    charged as T * epsilon under sequential composition before release.
    """

    def __init__(self, base, weights, params: PrivacyParams,
                 accountant: PrivacyAccountant, rng: np.random.Generator):
        self.base = base
        self.weights = weights
        self.params = params
        self.accountant = accountant
        self.rng = rng
        self.kind = base.kind
        self.avg_train_loss = base.avg_train_loss

    def scores(self, record: PatientRecord) -> np.ndarray:
        raw = np.clip(self.base.scores(record), 0.0, self.params.bound)
        scale = sensitivity(self.weights, self.params.bound) / self.params.epsilon
        self.accountant.charge(self.params.epsilon * raw.size, scale)
        return raw + laplace_sample(scale, self.rng, size=raw.size)


def membership_infer(sample_loss: float, avg_train_loss: float) -> bool:
    """Member iff the sample's loss is strictly below the average training loss."""
    return sample_loss < avg_train_loss


def attack_sample(target, record: PatientRecord, is_member: bool) -> AttackSample:
    step_losses = (target.scores(record) - record.labels) ** 2
    return AttackSample(
        patient_id=record.patient_id,
        step_losses=step_losses,
        mean_loss=float(step_losses.mean()),
        is_member=is_member,
    )


def privacy_leakage(
    target,
    members: list[PatientRecord],
    nonmembers: list[PatientRecord],
    resamples: int = DEFAULT_RESAMPLES,
    rng: np.random.Generator | None = None,
    epsilon: float | None = None,
) -> LeakageReport:
    """Run the membership attack and summarize leakage over TPR resamples.

    The non-member group is fixed and yields a single FPR; `resamples` draws
    of size len(nonmembers) from the member group (with replacement iff the
    member group is smaller) each yield a TPR.
    """
    if resamples < 1:
        raise ConfigError(f"resamples must be >= 1, got {resamples}")
    if not members or not nonmembers:
        raise ConfigError("both member and non-member groups must be non-empty")
    if rng is None:
        rng = np.random.default_rng()

    threshold = target.avg_train_loss
    member_hits = np.array(
        [membership_infer(attack_sample(target, r, True).mean_loss, threshold) for r in members],
        dtype=float,
    )
    nonmember_hits = np.array(
        [membership_infer(attack_sample(target, r, False).mean_loss, threshold) for r in nonmembers],
        dtype=float,
    )
    fpr = float(nonmember_hits.mean())

    draw_size = len(nonmembers)
    replace = draw_size > len(members)
    if replace:
        log.warning(
            "member group (%d) smaller than the fixed group (%d); resampling with replacement",
            len(members), draw_size,
        )
    tprs = np.empty(resamples)
    for i in range(resamples):
        idx = rng.choice(len(members), size=draw_size, replace=replace)
        tprs[i] = member_hits[idx].mean()

    leakages = tprs - fpr
    q25, q50, q75 = np.percentile(leakages, [25.0, 50.0, 75.0])
    tpr_median = float(np.median(tprs))
    return LeakageReport(
        epsilon=epsilon,
        tpr=tpr_median,
        fpr=fpr,
        leakage=tpr_median - fpr,
        resample_quantiles=(float(q25), float(q50), float(q75)),
        tpr_samples=tprs,
    )


def write_leakage_csv(reports: list[tuple[str, LeakageReport]], path) -> None:
    """Write (target_kind, report) rows in the sweep output layout."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(LEAKAGE_HEADER)
        for target_kind, r in reports:
            writer.writerow([
                "" if r.epsilon is None else repr(r.epsilon),
                repr(r.tpr),
                repr(r.fpr),
                repr(r.resample_quantiles[0]),
                repr(r.resample_quantiles[1]),
                repr(r.resample_quantiles[2]),
                target_kind,
            ])
