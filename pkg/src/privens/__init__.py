"""Differentially private weighted-average ensembles for clinical time series.

Per-patient regressors are combined by weighted averaging; the misfit
covariance matrix drives closed-form weight optimization and greedy ensemble
growing, and the combined output is released through a Laplace mechanism
whose sensitivity shrinks as 1/N under uniform weights. An evaluation
harness measures membership-inference leakage and AUROC-based accuracy loss
across privacy budgets.
"""

from .cohort import (
    FeatureCatalog,
    PartitionAssignment,
    PatientRecord,
    RawTimeline,
    carry_forward_fill,
    filter_cohort,
    ingest_csv,
    partition,
    resolve_onset,
    standardize,
)
from .ensemble import (
    CovarianceMatrix,
    Ensemble,
    WeightVector,
    combine,
    ensemble_mse,
    estimate_covariance,
    history_weights,
    optimal_weights,
    uniform_weights,
)
from .growing import CandidatePool, PoolEntry, admission_test, grow
from .metrics import HorizonSpec, RocCurve, accuracy_loss, auroc, horizon_labels, two_sample_t
from .models import ComponentModel, MisfitVector, RegressorConfig, misfits, predict, train_component
from .privacy import PrivacyAccountant, PrivacyParams, laplace_sample, private_predict, sensitivity
from .attack import LeakageReport, membership_infer, privacy_leakage
from .pipeline import RunConfig, run_all
from .synth import CohortSpec, synthesize_cohort

__version__ = "0.1.0"
