"""Patient cohort handling: CSV ingestion, gridding, filtering, partitioning.

Raw timelines are irregular event streams plus expert-label windows. They are
densified onto a 30-minute grid by carry-forward imputation with per-feature
defaults, z-scored against training-population statistics, filtered (on-admission
sepsis and short stays removed), and split into four partitions A-D that feed a
4-fold cross-validation layout.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import CatalogError, CsvParseError, DataError

log = logging.getLogger(__name__)

STEP_MINUTES = 30
MAX_LABEL = 4
SEPSIS_LABEL_MIN = 2  # expert labels 2..4 mark sepsis states
ONSET_CUTOFF_HOURS = 48.0  # on-admission sepsis exclusion
MIN_STAY_HOURS = 16.0

PARTITIONS = ("A", "B", "C", "D")

# fold -> (train partitions, validation partition, test partition)
FOLD_LAYOUT = (
    (("A", "B"), "C", "D"),
    (("B", "C"), "D", "A"),
    (("C", "D"), "A", "B"),
    (("D", "A"), "B", "C"),
)

TIMELINE_HEADER = ("patient_id", "timestamp_min", "feature_id", "value")
LABEL_HEADER = ("patient_id", "window_start_min", "window_end_min", "label")
CATALOG_HEADER = ("feature_id", "name", "default_value")


@dataclass(frozen=True)
class FeatureCatalog:
    """Feature names and per-feature default fill values, indexed by feature id."""

    names: tuple[str, ...]
    defaults: np.ndarray

    @property
    def n_features(self) -> int:
        return len(self.names)

    @classmethod
    def from_defaults(cls, defaults) -> "FeatureCatalog":
        defaults = np.asarray(defaults, dtype=float)
        names = tuple(f"feature_{i}" for i in range(defaults.size))
        return cls(names=names, defaults=defaults)

    @classmethod
    def load(cls, path) -> "FeatureCatalog":
        rows = _read_csv(path, CATALOG_HEADER)
        names: list[str] = []
        defaults: list[float] = []
        for line_no, row in rows:
            fid = _parse_int(path, line_no, row[0], "feature_id")
            if fid != len(names):
                raise CsvParseError(path, line_no, f"feature ids must be consecutive from 0, got {fid}")
            names.append(row[1])
            defaults.append(_parse_float(path, line_no, row[2], "default_value"))
        return cls(names=tuple(names), defaults=np.asarray(defaults, dtype=float))

    def save(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(CATALOG_HEADER)
            for fid, (name, default) in enumerate(zip(self.names, self.defaults)):
                writer.writerow([fid, name, repr(float(default))])


@dataclass(frozen=True)
class LabelWindow:
    start_min: float
    end_min: float
    label: int


@dataclass
class RawTimeline:
    """One patient's irregular measurements and expert-label windows."""

    patient_id: str
    events: list[tuple[float, int, float]]  # (timestamp_min, feature_id, value)
    admission_len: float  # minutes
    label_windows: list[LabelWindow]


@dataclass
class PatientRecord:
    """Dense, gridded patient timeline with per-step expert labels."""

    patient_id: str
    grid: np.ndarray  # (T, F)
    labels: np.ndarray  # (T,) ints in 0..4
    is_sepsis: bool
    onset_step: int | None
    onset_min: float | None
    stay_hours: float

    @property
    def n_steps(self) -> int:
        return self.grid.shape[0]


@dataclass
class PartitionAssignment:
    """Map patient_id -> partition letter, plus the fixed 4-fold layout."""

    assignment: dict[str, str]
    folds: tuple = FOLD_LAYOUT

    def members(self, partition: str) -> list[str]:
        return [pid for pid, p in self.assignment.items() if p == partition]

    def counts(self) -> dict[str, int]:
        out = {p: 0 for p in PARTITIONS}
        for p in self.assignment.values():
            out[p] += 1
        return out

    def fold_split(self, records: list[PatientRecord], fold: int):
        """Return (train, validation, test) record lists for one fold."""
        train_parts, val_part, test_part = self.folds[fold]
        by_part = {p: [] for p in PARTITIONS}
        for r in records:
            by_part[self.assignment[r.patient_id]].append(r)
        train = [r for p in train_parts for r in by_part[p]]
        return train, by_part[val_part], by_part[test_part]

    def save(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["patient_id", "partition"])
            for pid in sorted(self.assignment):
                writer.writerow([pid, self.assignment[pid]])

    @classmethod
    def load(cls, path) -> "PartitionAssignment":
        rows = _read_csv(path, ("patient_id", "partition"))
        assignment = {}
        for line_no, row in rows:
            if row[1] not in PARTITIONS:
                raise CsvParseError(path, line_no, f"unknown partition {row[1]!r}")
            assignment[row[0]] = row[1]
        return cls(assignment)


def _read_csv(path, expected_header):
    """Read a CSV file, validate its header, and return (line_no, row) pairs."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvParseError(path, 1, "empty file, expected header") from None
        if tuple(h.strip() for h in header) != tuple(expected_header):
            raise CsvParseError(path, 1, f"bad header {header!r}, expected {list(expected_header)!r}")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(expected_header):
                raise CsvParseError(path, line_no, f"expected {len(expected_header)} fields, got {len(row)}")
            out.append((line_no, [c.strip() for c in row]))
    return out


def _parse_float(path, line_no, text, field):
    try:
        return float(text)
    except ValueError:
        raise CsvParseError(path, line_no, f"bad {field}: {text!r}") from None


def _parse_int(path, line_no, text, field):
    try:
        return int(text)
    except ValueError:
        raise CsvParseError(path, line_no, f"bad {field}: {text!r}") from None


def ingest_csv(path, catalog: FeatureCatalog, labels_path=None) -> list[RawTimeline]:
    """Parse timeline (and optionally label-window) CSVs into raw timelines.

    Produces one RawTimeline per patient_id in order of first appearance,
    events sorted ascending by timestamp. Label rows must reference patients
    present in the timeline file.
    """
    timelines: dict[str, RawTimeline] = {}
    for line_no, row in _read_csv(path, TIMELINE_HEADER):
        pid = row[0]
        ts = _parse_float(path, line_no, row[1], "timestamp_min")
        if ts < 0:
            raise CsvParseError(path, line_no, f"negative timestamp {ts}")
        fid = _parse_int(path, line_no, row[2], "feature_id")
        if not 0 <= fid < catalog.n_features:
            raise CatalogError(f"{path}:{line_no}: feature_id {fid} not in catalog (F={catalog.n_features})")
        value = _parse_float(path, line_no, row[3], "value")
        tl = timelines.get(pid)
        if tl is None:
            tl = timelines[pid] = RawTimeline(pid, [], 0.0, [])
        tl.events.append((ts, fid, value))

    if labels_path is not None:
        for line_no, row in _read_csv(labels_path, LABEL_HEADER):
            pid = row[0]
            if pid not in timelines:
                raise CsvParseError(labels_path, line_no, f"label row for unknown patient {pid!r}")
            start = _parse_float(labels_path, line_no, row[1], "window_start_min")
            end = _parse_float(labels_path, line_no, row[2], "window_end_min")
            label = _parse_int(labels_path, line_no, row[3], "label")
            if not 0 <= label <= MAX_LABEL:
                raise CsvParseError(labels_path, line_no, f"label {label} outside 0..{MAX_LABEL}")
            if end <= start:
                raise CsvParseError(labels_path, line_no, f"empty window [{start}, {end})")
            timelines[pid].label_windows.append(LabelWindow(start, end, label))

    out = []
    for tl in timelines.values():
        tl.events.sort(key=lambda e: e[0])
        tl.label_windows.sort(key=lambda w: w.start_min)
        for prev, cur in zip(tl.label_windows, tl.label_windows[1:]):
            if cur.start_min < prev.end_min:
                raise DataError(f"patient {tl.patient_id}: overlapping label windows at {cur.start_min} min")
        last_event = tl.events[-1][0] if tl.events else 0.0
        last_window = tl.label_windows[-1].end_min if tl.label_windows else 0.0
        tl.admission_len = max(last_event, last_window)
        out.append(tl)
    return out


def write_timelines_csv(timelines: list[RawTimeline], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(TIMELINE_HEADER)
        for tl in timelines:
            for ts, fid, value in tl.events:
                writer.writerow([tl.patient_id, repr(float(ts)), fid, repr(float(value))])


def write_labels_csv(timelines: list[RawTimeline], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(LABEL_HEADER)
        for tl in timelines:
            for w in tl.label_windows:
                writer.writerow([tl.patient_id, repr(float(w.start_min)), repr(float(w.end_min)), w.label])


def carry_forward_fill(raw: RawTimeline, defaults) -> np.ndarray:
    """Densify an event stream onto the 30-minute grid.

    Each (step, feature) cell holds the latest observation at or before that
    step; features never observed up to a step take the catalog default.
    Observations past the final full step are folded into the last step.
    """
    defaults = np.asarray(defaults, dtype=float)
    n_steps = int(raw.admission_len // STEP_MINUTES)
    grid = np.tile(defaults, (n_steps, 1))
    if n_steps == 0:
        return grid

    by_feature: dict[int, tuple[list[int], list[float]]] = {}
    for ts, fid, value in raw.events:  # events sorted by timestamp
        step = min(int(ts // STEP_MINUTES), n_steps - 1)
        steps, values = by_feature.setdefault(fid, ([], []))
        steps.append(step)
        values.append(value)

    all_steps = np.arange(n_steps)
    for fid, (steps, values) in by_feature.items():
        steps = np.asarray(steps)
        values = np.asarray(values)
        # later observations win within a step: keep the last entry per step
        uniq, last_idx = np.unique(steps[::-1], return_index=True)
        last_values = values[::-1][last_idx]
        pos = np.searchsorted(uniq, all_steps, side="right") - 1
        seen = pos >= 0
        grid[seen, fid] = last_values[pos[seen]]
    return grid


def compute_feature_stats(records: list[PatientRecord]) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature mean and population standard deviation over all grid cells.

    Must be fed training-partition records only, so validation/test folds see
    statistics they did not contribute to.
    """
    if not records:
        raise DataError("cannot compute feature statistics from an empty record list")
    stacked = np.vstack([r.grid for r in records])
    return stacked.mean(axis=0), stacked.std(axis=0)


def standardize(series: np.ndarray, stats: tuple[np.ndarray, np.ndarray]) -> np.ndarray:
    """Apply z = (x - mu) / sigma elementwise; sigma == 0 is treated as 1."""
    mu, sigma = (np.asarray(s, dtype=float) for s in stats)
    if np.any(sigma < 0):
        raise DataError("negative standard deviation in feature stats")
    if np.any(sigma == 0):
        constant = np.flatnonzero(sigma == 0)
        log.warning("constant features %s: sigma=0 replaced by 1", constant.tolist())
        sigma = np.where(sigma == 0, 1.0, sigma)
    return (np.asarray(series, dtype=float) - mu) / sigma


def standardize_records(records: list[PatientRecord], stats) -> list[PatientRecord]:
    return [replace(r, grid=standardize(r.grid, stats)) for r in records]


def resolve_onset(window: LabelWindow) -> float:
    """Resolved onset time = the labeling window's midpoint, in minutes."""
    return (window.start_min + window.end_min) / 2.0


def step_labels(raw: RawTimeline, n_steps: int) -> np.ndarray:
    """Per-step expert label, piecewise constant within each source window.

    Steps before the first window get label 0; gaps between windows carry the
    previous window's label forward.
    """
    labels = np.zeros(n_steps, dtype=np.int64)
    current = 0
    windows = iter(raw.label_windows)
    window = next(windows, None)
    for t in range(n_steps):
        minute = t * STEP_MINUTES
        while window is not None and window.end_min <= minute:
            current = window.label
            window = next(windows, None)
        if window is not None and window.start_min <= minute:
            current = window.label
        labels[t] = current
    return labels


def build_patient_record(raw: RawTimeline, grid: np.ndarray) -> PatientRecord:
    """Assemble a PatientRecord from a raw timeline and its filled grid."""
    n_steps = grid.shape[0]
    labels = step_labels(raw, n_steps)
    onset_min = None
    for window in raw.label_windows:
        if window.label >= SEPSIS_LABEL_MIN:
            onset_min = resolve_onset(window)
            break
    is_sepsis = onset_min is not None
    onset_step = int(onset_min // STEP_MINUTES) if is_sepsis else None
    return PatientRecord(
        patient_id=raw.patient_id,
        grid=grid,
        labels=labels,
        is_sepsis=is_sepsis,
        onset_step=onset_step,
        onset_min=onset_min,
        stay_hours=raw.admission_len / 60.0,
    )


def preprocess_timelines(timelines: list[RawTimeline], catalog: FeatureCatalog) -> list[PatientRecord]:
    """Carry-forward fill every timeline and assemble unstandardized records."""
    return [build_patient_record(tl, carry_forward_fill(tl, catalog.defaults)) for tl in timelines]


def filter_cohort(records: list[PatientRecord]) -> list[PatientRecord]:
    """Drop on-admission sepsis (first sepsis label within 48h) and stays < 16h."""
    out = []
    for r in records:
        if r.stay_hours < MIN_STAY_HOURS:
            continue
        if r.is_sepsis and r.onset_min / 60.0 <= ONSET_CUTOFF_HOURS:
            continue
        out.append(r)
    return out


def partition(records: list[PatientRecord], seed: int) -> PartitionAssignment:
    """Assign filtered patients to partitions A-D by sorted groups of four.

    Non-sepsis patients are sorted by length of stay, sepsis patients by
    onset; each consecutive group of four sends one patient to each
    partition in a seed-determined order. A leftover group (<4) is assigned
    round-robin to the currently smallest partitions.
    """
    rng = np.random.default_rng(seed)
    nonsepsis = sorted(
        (r for r in records if not r.is_sepsis), key=lambda r: (r.stay_hours, r.patient_id)
    )
    sepsis = sorted(
        (r for r in records if r.is_sepsis), key=lambda r: (r.onset_min, r.patient_id)
    )
    assignment: dict[str, str] = {}
    counts = {p: 0 for p in PARTITIONS}
    for stratum in (nonsepsis, sepsis):
        n_groups = len(stratum) // 4
        for g in range(n_groups):
            order = rng.permutation(4)
            for record, p_idx in zip(stratum[4 * g : 4 * g + 4], order):
                part = PARTITIONS[p_idx]
                assignment[record.patient_id] = part
                counts[part] += 1
        for record in stratum[4 * n_groups :]:
            part = min(PARTITIONS, key=lambda p: (counts[p], p))
            assignment[record.patient_id] = part
            counts[part] += 1
    return PartitionAssignment(assignment)
