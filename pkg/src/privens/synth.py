"""Synthetic patient cohort generation.

Stands in for a real ICU extraction. Each patient belongs to a latent
subgroup with its own baseline physiology and oscillatory dynamics, carries a
persistent patient-specific feature offset (an identifying "fingerprint") and
a habitual severity level of 0 or 1 that is statistically independent of the
observable dynamics. Sepsis patients additionally drift along a shared
feature signature in the hours before onset, with expert labels escalating
through 2..4 from the onset window on.

The habitual level is deliberately unlearnable except by memorizing which
fingerprint belongs to which patient; this is what makes pooled models
vulnerable to membership inference while diluted ensembles are not.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .cohort import FeatureCatalog, LabelWindow, RawTimeline
from .errors import ConfigError

FIRST_WINDOW_MIN = 1440.0  # initial 24h labeling window
SHORT_WINDOW_MIN = 360.0  # subsequent 6h windows


@dataclass(frozen=True)
class CohortSpec:
    """Parameters of the synthetic cohort generator."""

    n_sepsis: int
    n_nonsepsis: int
    n_features: int = 24
    n_groups: int = 3
    stay_log_mean_hours: float = math.log(90.0)
    stay_log_sd: float = 0.55
    min_stay_hours: float = 18.0
    max_stay_hours: float = 400.0
    onset_log_mean_hours: float = math.log(110.0)
    onset_log_sd: float = 0.45
    min_onset_hours: float = 30.0
    post_onset_margin_hours: float = 24.0
    obs_interval_min: float = 60.0
    noise_sd: float = 0.3
    heterogeneity: float = 1.0
    drift_hours: float = 48.0
    drift_scale: float = 2.5
    drift_jitter: float = 0.5  # per-patient rotation of the deterioration signature
    label_flip_prob: float = 0.05

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CohortSpec":
        return cls(**d)


def make_catalog(n_features: int) -> FeatureCatalog:
    """Catalog for synthetic cohorts: generic names, default 0 (the z-score mean)."""
    return FeatureCatalog.from_defaults(np.zeros(n_features))


def _validate(spec: CohortSpec) -> None:
    if spec.n_sepsis < 0 or spec.n_nonsepsis < 0 or spec.n_sepsis + spec.n_nonsepsis == 0:
        raise ConfigError(f"patient counts must be non-negative and sum > 0, got {spec.n_sepsis}/{spec.n_nonsepsis}")
    if spec.n_features <= 0 or spec.n_groups <= 0:
        raise ConfigError("n_features and n_groups must be positive")
    if spec.obs_interval_min <= 0 or spec.noise_sd < 0 or spec.heterogeneity < 0:
        raise ConfigError("observation interval must be positive, noise levels non-negative")
    if spec.min_stay_hours <= 0 or spec.max_stay_hours < spec.min_stay_hours:
        raise ConfigError("invalid stay-length bounds")


def _label_window_bounds(stay_min: float) -> list[tuple[float, float]]:
    """One 24h window, then 6h windows, truncated at discharge."""
    bounds = []
    start = 0.0
    while start < stay_min:
        width = FIRST_WINDOW_MIN if start == 0.0 else SHORT_WINDOW_MIN
        end = min(start + width, stay_min)
        bounds.append((start, end))
        start = end
    return bounds


class _GlobalStructure:
    """Population-level latent structure shared by all patients of a cohort."""

    def __init__(self, spec: CohortSpec, rng: np.random.Generator):
        G, F = spec.n_groups, spec.n_features
        self.base = rng.normal(0.0, 0.5, size=(G, F))
        directions = rng.normal(size=(G, F))
        self.osc_dir = directions / np.linalg.norm(directions, axis=1, keepdims=True)
        self.osc_amp = rng.uniform(0.3, 0.8, size=G)
        self.osc_period_min = rng.uniform(360.0, 1080.0, size=G)
        drift = rng.normal(size=F)
        self.drift_dir = drift / np.linalg.norm(drift)


def _latent(spec, structure, group, phase, fingerprint, drift_dir, drift_anchor_min, times_min):
    """Latent feature matrix (len(times), F) at the given minutes."""
    osc = np.sin(2.0 * np.pi * times_min / structure.osc_period_min[group] + phase)
    values = (
        structure.base[group]
        + structure.osc_amp[group] * osc[:, None] * structure.osc_dir[group]
        + fingerprint
    )
    if drift_anchor_min is not None:
        drift_start = drift_anchor_min - spec.drift_hours * 60.0
        # quadratic ramp: slow far from onset, steep close to it
        ramp = np.clip((times_min - drift_start) / (spec.drift_hours * 60.0), 0.0, 1.0) ** 2
        values = values + spec.drift_scale * ramp[:, None] * drift_dir
    return values


def _synthesize_patient(spec, structure, patient_id, is_sepsis, rng) -> RawTimeline:
    group = int(rng.integers(spec.n_groups))
    phase = rng.uniform(0.0, 2.0 * np.pi)
    fingerprint = rng.normal(0.0, spec.heterogeneity, size=spec.n_features)
    # stable inter-patient variation lives orthogonal to the acute signature,
    # so baseline differences cannot mask deterioration
    fingerprint -= (fingerprint @ structure.drift_dir) * structure.drift_dir
    # each patient manifests the shared signature with an individual rotation
    jitter = rng.normal(size=spec.n_features) / np.sqrt(spec.n_features)
    drift_dir = structure.drift_dir + spec.drift_jitter * jitter
    drift_dir = drift_dir / np.linalg.norm(drift_dir)
    habitual = int(rng.integers(2))

    stay_h = float(np.clip(rng.lognormal(spec.stay_log_mean_hours, spec.stay_log_sd),
                           spec.min_stay_hours, spec.max_stay_hours))
    onset_anchor_min = None
    onset_target_min = None
    if is_sepsis:
        onset_h = max(rng.lognormal(spec.onset_log_mean_hours, spec.onset_log_sd),
                      spec.min_onset_hours)
        stay_h = max(stay_h, onset_h + spec.post_onset_margin_hours)
        onset_target_min = onset_h * 60.0
    stay_min = round(stay_h * 60.0)

    bounds = _label_window_bounds(stay_min)
    windows: list[LabelWindow] = []
    onset_window_idx = None
    if is_sepsis:
        for i, (start, end) in enumerate(bounds):
            if start <= onset_target_min < end:
                onset_window_idx = i
                break
        if onset_window_idx is None:  # onset beyond discharge margin; use last window
            onset_window_idx = len(bounds) - 1
        onset_anchor_min = (bounds[onset_window_idx][0] + bounds[onset_window_idx][1]) / 2.0

    severity = 2
    for i, (start, end) in enumerate(bounds):
        if onset_window_idx is not None and i >= onset_window_idx:
            label = min(severity, 4)
            severity += 1
        else:
            label = habitual
            if rng.random() < spec.label_flip_prob:
                label = 1 - label
        windows.append(LabelWindow(start, end, label))

    events: list[tuple[float, int, float]] = []
    for fid in range(spec.n_features):
        # irregular sampling with exponential gaps; first reading is delayed,
        # exercising the default-fill path
        n_guess = int(stay_min / spec.obs_interval_min * 1.6) + 8
        gaps = rng.exponential(spec.obs_interval_min, size=n_guess)
        times = np.cumsum(gaps)
        while times[-1] < stay_min:
            extra = np.cumsum(rng.exponential(spec.obs_interval_min, size=n_guess))
            times = np.concatenate([times, times[-1] + extra])
        times = times[times < stay_min]
        if times.size == 0:
            continue
        latent = _latent(spec, structure, group, phase, fingerprint, drift_dir,
                         onset_anchor_min, times)
        values = latent[:, fid] + rng.normal(0.0, spec.noise_sd, size=times.size)
        events.extend((float(t), fid, float(v)) for t, v in zip(times, values))

    events.sort(key=lambda e: e[0])
    return RawTimeline(patient_id=patient_id, events=events,
                       admission_len=float(stay_min), label_windows=windows)


def synthesize_cohort(spec: CohortSpec, seed: int) -> list[RawTimeline]:
    """Generate raw timelines for a synthetic cohort, deterministic in (spec, seed).

    Sepsis status alternates through the patient sequence as evenly as the
    requested counts allow, so sorted prefixes of the cohort stay mixed.
    """
    _validate(spec)
    total = spec.n_sepsis + spec.n_nonsepsis
    root = np.random.SeedSequence(seed)
    streams = root.spawn(total + 1)
    structure = _GlobalStructure(spec, np.random.default_rng(streams[0]))

    # evenly interleave sepsis flags
    flags = [False] * total
    if spec.n_sepsis > 0:
        positions = np.linspace(0, total - 1, spec.n_sepsis).round().astype(int)
        for pos in positions:
            flags[pos] = True
        # rounding collisions are resolved by filling remaining slots left to right
        deficit = spec.n_sepsis - sum(flags)
        for i in range(total):
            if deficit == 0:
                break
            if not flags[i]:
                flags[i] = True
                deficit -= 1

    width = max(4, len(str(total)))
    timelines = []
    for idx in range(total):
        rng = np.random.default_rng(streams[idx + 1])
        patient_id = f"p{idx:0{width}d}"
        timelines.append(_synthesize_patient(spec, structure, patient_id, flags[idx], rng))
    return timelines
