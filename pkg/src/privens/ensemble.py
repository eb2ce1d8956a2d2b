"""Weighted-average ensembles: covariance estimation, weights, combination.

The mean squared error of a weighted-average ensemble is the quadratic form
w' C w of its weight vector with the misfit covariance matrix C, where
C_ij = (1/n) m_i' m_j over a shared evaluation sample. That identity drives
everything here: the closed-form optimal weights (C^-1 1) / (1' C^-1 1), the
uniform scheme used on the privacy path, and the history-based scheme that
re-weights members by how well they tracked a patient's past expert labels.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .cohort import PatientRecord
from .errors import AlignmentError, ConfigError, EmptyPoolError, ShapeError, SingularMatrixError
from .models import ComponentModel, MisfitVector, predict

WEIGHT_SCHEMES = ("uniform", "optimal", "history")
_SUM_TOL = 1e-12
_COND_LIMIT = 1e12


@dataclass
class CovarianceMatrix:
    """Misfit covariance over a shared evaluation sample; exactly symmetric."""

    values: np.ndarray
    n_samples: int
    model_ids: tuple

    @property
    def n_models(self) -> int:
        return self.values.shape[0]


@dataclass
class WeightVector:
    values: np.ndarray
    scheme: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.scheme not in WEIGHT_SCHEMES:
            raise ConfigError(f"unknown weight scheme {self.scheme!r}")
        if self.values.ndim != 1 or self.values.size == 0:
            raise ShapeError("weights must be a non-empty 1-d vector")
        if abs(float(self.values.sum()) - 1.0) > _SUM_TOL:
            raise ConfigError(f"weights must sum to 1, got {self.values.sum()!r}")
        if self.scheme != "optimal" and np.any(self.values < 0):
            raise ConfigError(f"{self.scheme} weights must be non-negative")

    def __len__(self) -> int:
        return self.values.size


@dataclass
class Ensemble:
    members: list[ComponentModel]
    weights: WeightVector
    bound: float

    def __post_init__(self):
        if len(self.members) != len(self.weights):
            raise ShapeError(f"{len(self.members)} members vs {len(self.weights)} weights")
        for m in self.members:
            if m.output_bound != self.bound:
                raise ConfigError(
                    f"member {m.model_id} bound {m.output_bound} != ensemble bound {self.bound}"
                )

    @property
    def size(self) -> int:
        return len(self.members)


def estimate_covariance(misfit_vectors: list[MisfitVector]) -> CovarianceMatrix:
    """C_ij = (1/n) m_i' m_j over the shared sample index."""
    if not misfit_vectors:
        raise EmptyPoolError("need at least one misfit vector")
    index = misfit_vectors[0].sample_index
    for mv in misfit_vectors[1:]:
        if mv.sample_index != index:
            raise AlignmentError(
                f"misfit vectors {misfit_vectors[0].model_id} and {mv.model_id} "
                "were computed on different evaluation sets"
            )
    stacked = np.vstack([mv.values for mv in misfit_vectors])
    n = stacked.shape[1]
    if n < 1:
        raise AlignmentError("empty evaluation sample")
    raw = stacked @ stacked.T / n
    upper = np.triu(raw)
    values = upper + np.triu(raw, 1).T  # mirror the upper triangle: exact symmetry
    return CovarianceMatrix(values=values, n_samples=n,
                            model_ids=tuple(mv.model_id for mv in misfit_vectors))


def ensemble_mse(cov: CovarianceMatrix, weights: WeightVector) -> float:
    """MSE of the weighted-average ensemble: w' C w."""
    if len(weights) != cov.n_models:
        raise ShapeError(f"{len(weights)} weights vs {cov.n_models} models")
    w = weights.values
    return float(w @ cov.values @ w)


def uniform_weights(n: int) -> WeightVector:
    if n < 1:
        raise EmptyPoolError("uniform weights need at least one model")
    return WeightVector(np.full(n, 1.0 / n), scheme="uniform")


def default_ridge(cov: CovarianceMatrix) -> float:
    return 1e-8 * float(np.trace(cov.values)) / cov.n_models


def optimal_weights(cov: CovarianceMatrix, ridge: float | None = None) -> WeightVector:
    """Closed-form minimum-MSE weights (C + ridge I)^-1 1, normalized to sum 1.

    With ridge 0 and invertible C this is the exact optimum; the default
    ridge of 1e-8 tr(C)/N only stabilizes near-singular estimates. Note the
    result may contain negative entries for strongly correlated models.
    """
    if ridge is None:
        ridge = default_ridge(cov)
    if ridge < 0:
        raise ConfigError("ridge must be >= 0")
    system = cov.values + ridge * np.eye(cov.n_models)
    if np.linalg.cond(system) > _COND_LIMIT:
        raise SingularMatrixError(
            f"covariance matrix numerically singular (cond > {_COND_LIMIT:.0e}); "
            "pass a larger ridge"
        )
    ones = np.ones(cov.n_models)
    solution = np.linalg.solve(system, ones)
    total = float(solution.sum())
    if total == 0.0:
        raise SingularMatrixError("degenerate solution (1' C^-1 1 = 0); pass a larger ridge")
    return WeightVector(solution / total, scheme="optimal")


def history_weights(past_preds: np.ndarray, past_labels: np.ndarray) -> WeightVector:
    """Weights proportional to sum_t 1 / (1 + |y_t_model - y_t|^2) over the history.

    `past_preds` has shape (n_models, history); an empty history yields
    uniform weights (the minimal-sensitivity fallback).
    """
    past_preds = np.atleast_2d(np.asarray(past_preds, dtype=float))
    past_labels = np.asarray(past_labels, dtype=float)
    n_models = past_preds.shape[0]
    if past_preds.shape[1] != past_labels.size:
        raise ShapeError(
            f"history length mismatch: {past_preds.shape[1]} predictions vs {past_labels.size} labels"
        )
    if past_labels.size == 0:
        return WeightVector(np.full(n_models, 1.0 / n_models), scheme="history")
    scores = (1.0 / (1.0 + (past_preds - past_labels) ** 2)).sum(axis=1)
    return WeightVector(scores / scores.sum(), scheme="history")


def combine(outputs, weights: WeightVector) -> float:
    """Weighted sum of per-model outputs at one step."""
    outputs = np.asarray(outputs, dtype=float)
    if outputs.shape != (len(weights),):
        raise ShapeError(f"{outputs.shape} outputs vs {len(weights)} weights")
    return float(outputs @ weights.values)


def member_scores(ensemble: Ensemble, record: PatientRecord) -> np.ndarray:
    """Stacked member predictions, shape (n_members, n_steps)."""
    return np.vstack([predict(m, record) for m in ensemble.members])


def ensemble_scores(ensemble: Ensemble, record: PatientRecord) -> np.ndarray:
    """Per-step ensemble prediction under the ensemble's static weights."""
    return ensemble.weights.values @ member_scores(ensemble, record)


def history_ensemble_scores(ensemble: Ensemble, record: PatientRecord) -> np.ndarray:
    """Per-step prediction with weights recomputed from past expert labels.

    At step t the weights are derived from steps 0..t-1 of the record's
    expert-label stream (uniform at t=0), mirroring an online setting where
    yesterday's labels are available when scoring today.
    """
    preds = member_scores(ensemble, record)
    accuracy = 1.0 / (1.0 + (preds - record.labels) ** 2)
    cumulative = np.cumsum(accuracy, axis=1)
    n_models, n_steps = preds.shape
    out = np.empty(n_steps)
    out[0] = float(preds[:, 0].mean())
    if n_steps > 1:
        totals = cumulative[:, :-1]
        weights = totals / totals.sum(axis=0, keepdims=True)
        out[1:] = (weights * preds[:, 1:]).sum(axis=0)
    return out


def eval_set_fingerprint(eval_set: list[PatientRecord]) -> str:
    """Stable digest of the evaluation points a covariance was estimated on."""
    h = hashlib.sha256()
    for r in eval_set:
        h.update(f"{r.patient_id}:{r.n_steps};".encode("utf-8"))
    return h.hexdigest()[:16]


def save_manifest(ensemble: Ensemble, path, provenance: dict | None = None) -> None:
    data = {
        "model_ids": [m.model_id for m in ensemble.members],
        "scheme": ensemble.weights.scheme,
        "weights": [float(w) for w in ensemble.weights.values],
        "bound": ensemble.bound,
        "covariance_provenance": provenance or {},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=1)


def load_manifest(path, models_by_id: dict | None = None):
    """Return the manifest dict; with a model lookup, also rebuild the Ensemble."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if models_by_id is None:
        return data, None
    members = [models_by_id[mid] for mid in data["model_ids"]]
    weights = WeightVector(np.array(data["weights"]), scheme=data["scheme"])
    return data, Ensemble(members=members, weights=weights, bound=float(data["bound"]))
