"""Greedy ensemble growing with the misfit-covariance admission inequality.

A candidate joins the ensemble iff, over the shared validation sample,

    (2N + 1) * MSE[ensemble] > 2 * sum_i E[m_new m_i] + E[m_new^2]

with N current members and expectations realized as sample means. Under
uniform weights this inequality is exactly the condition that admitting the
candidate strictly lowers the ensemble's validation MSE, so the growth loop
asserts per-step monotonicity and fails loudly if it ever breaks.

Sepsis-patient models are scanned before non-sepsis models; the pool is
consumed in non-decreasing MSE order and the prioritized scan restarts after
every admission, until a full scan admits nothing.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .ensemble import Ensemble, eval_set_fingerprint, uniform_weights
from .errors import AlignmentError, EmptyPoolError, GrowthInvariantError
from .models import ComponentModel, MisfitVector

GROWTH_LOG_HEADER = (
    "step",
    "model_id",
    "is_sepsis",
    "candidate_mse",
    "ensemble_mse_before",
    "ensemble_mse_after",
    "lhs",
    "rhs",
)


@dataclass
class PoolEntry:
    model: ComponentModel
    misfit: MisfitVector
    mse: float
    is_sepsis: bool


@dataclass
class CandidatePool:
    """Candidate models split by training-patient sepsis status, MSE-sorted."""

    sepsis: list[PoolEntry]
    nonsepsis: list[PoolEntry]

    @classmethod
    def build(cls, entries: list[PoolEntry]) -> "CandidatePool":
        key = lambda e: (e.mse, e.model.model_id)
        return cls(
            sepsis=sorted((e for e in entries if e.is_sepsis), key=key),
            nonsepsis=sorted((e for e in entries if not e.is_sepsis), key=key),
        )

    @property
    def size(self) -> int:
        return len(self.sepsis) + len(self.nonsepsis)


@dataclass
class GrowthStep:
    step: int
    model_id: str
    is_sepsis: bool
    candidate_mse: float
    ensemble_mse_before: float | None  # None for the initialization step
    ensemble_mse_after: float
    lhs: float | None
    rhs: float | None


@dataclass
class GrowthResult:
    ensemble: Ensemble
    steps: list[GrowthStep]
    eval_fingerprint: str | None


def _check_alignment(candidate: MisfitVector, members: list[MisfitVector]) -> None:
    for member in members:
        if member.sample_index != candidate.sample_index:
            raise AlignmentError(
                f"candidate {candidate.model_id} and member {member.model_id} "
                "were evaluated on different sample sets"
            )


def admission_terms(
    candidate: MisfitVector, members: list[MisfitVector], current_mse: float
) -> tuple[float, float]:
    """(lhs, rhs) of the admission inequality for one candidate."""
    if not members:
        raise EmptyPoolError("admission test needs at least one current member")
    _check_alignment(candidate, members)
    n = candidate.values.size
    member_sum = np.sum([m.values for m in members], axis=0)
    cross = float(candidate.values @ member_sum) / n
    self_term = float(candidate.values @ candidate.values) / n
    lhs = (2 * len(members) + 1) * current_mse
    rhs = 2.0 * cross + self_term
    return lhs, rhs


def admission_test(
    candidate: MisfitVector, members: list[MisfitVector], current_mse: float
) -> bool:
    """True iff the strict admission inequality holds."""
    lhs, rhs = admission_terms(candidate, members, current_mse)
    return lhs > rhs


def grow(pool: CandidatePool, validation=None) -> GrowthResult:
    """Run the greedy growing loop; returns the ensemble with uniform weights.

    Initialization takes the lowest-MSE sepsis model, falling back to the
    lowest-MSE model overall when no sepsis models exist.
    """
    if pool.size == 0:
        raise EmptyPoolError("cannot grow an ensemble from an empty pool")
    sepsis = list(pool.sepsis)
    nonsepsis = list(pool.nonsepsis)

    source = sepsis if sepsis else nonsepsis
    seed_entry = source.pop(0)
    for entry in sepsis + nonsepsis:
        _check_alignment(entry.misfit, [seed_entry.misfit])

    members = [seed_entry]
    misfit_sum = seed_entry.misfit.values.astype(float).copy()
    n = misfit_sum.size
    self_term = {
        e.model.model_id: float(e.misfit.values @ e.misfit.values) / n
        for e in [seed_entry] + sepsis + nonsepsis
    }
    current_mse = float(np.mean(misfit_sum**2))
    steps = [
        GrowthStep(0, seed_entry.model.model_id, seed_entry.is_sepsis, seed_entry.mse,
                   None, current_mse, None, None)
    ]

    while True:
        admitted = None
        lhs = (2 * len(members) + 1) * current_mse
        for queue in (sepsis, nonsepsis):
            for idx, entry in enumerate(queue):
                cross = float(entry.misfit.values @ misfit_sum) / n
                rhs = 2.0 * cross + self_term[entry.model.model_id]
                if lhs > rhs:
                    admitted = (queue, idx, entry, lhs, rhs)
                    break
            if admitted:
                break
        if not admitted:
            break
        queue, idx, entry, lhs, rhs = admitted
        queue.pop(idx)
        members.append(entry)
        misfit_sum += entry.misfit.values
        new_mse = float(np.mean((misfit_sum / len(members)) ** 2))
        if new_mse > current_mse * (1.0 + 1e-12) + 1e-15:
            raise GrowthInvariantError(
                f"validation MSE rose from {current_mse} to {new_mse} when admitting "
                f"{entry.model.model_id}; admission inequality violated"
            )
        steps.append(
            GrowthStep(len(members) - 1, entry.model.model_id, entry.is_sepsis,
                       entry.mse, current_mse, new_mse, lhs, rhs)
        )
        current_mse = new_mse

    ensemble = Ensemble(
        members=[e.model for e in members],
        weights=uniform_weights(len(members)),
        bound=members[0].model.output_bound,
    )
    fingerprint = eval_set_fingerprint(validation) if validation is not None else None
    return GrowthResult(ensemble=ensemble, steps=steps, eval_fingerprint=fingerprint)


def write_growth_log(steps: list[GrowthStep], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(GROWTH_LOG_HEADER)
        for s in steps:
            writer.writerow([
                s.step,
                s.model_id,
                int(s.is_sepsis),
                repr(s.candidate_mse),
                "" if s.ensemble_mse_before is None else repr(s.ensemble_mse_before),
                repr(s.ensemble_mse_after),
                "" if s.lhs is None else repr(s.lhs),
                "" if s.rhs is None else repr(s.rhs),
            ])
