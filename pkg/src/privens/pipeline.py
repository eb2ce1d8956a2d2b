"""End-to-end pipeline: synth -> preprocess -> train -> grow -> evaluate ->
dp-sweep -> attack, with checksum-keyed stage caching.

Every stage writes its artifacts into its own directory under the output
root, plus a fingerprint marker derived from the stage's configuration slice
and its upstream fingerprints. Re-running with an unchanged configuration
skips the stage, leaving outputs bitwise identical; a failed stage leaves its
partial artifacts in place but no marker, so it is rebuilt next run.

All randomness flows from the master seed through keyed stage seeds, so two
runs with the same configuration produce identical result CSVs.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import attack as attack_mod
from . import cohort as cohort_mod
from .cohort import FeatureCatalog, PartitionAssignment, PatientRecord
from .ensemble import (
    Ensemble,
    WeightVector,
    estimate_covariance,
    load_manifest,
    optimal_weights,
    save_manifest,
    uniform_weights,
)
from .errors import ConfigError
from .growing import CandidatePool, PoolEntry, grow, write_growth_log
from .metrics import (
    SIGNIFICANCE_ALPHA,
    HorizonSpec,
    accuracy_loss,
    auroc,
    pooled_horizon_scores,
    two_sample_t,
)
from .models import (
    MisfitVector,
    RegressorConfig,
    load_models,
    misfits,
    predict,
    save_models,
    train_component,
)
from .privacy import PrivacyAccountant, PrivacyParams, laplace_sample, noise_scale
from .seeds import derive_seed
from .synth import CohortSpec, make_catalog, synthesize_cohort

log = logging.getLogger(__name__)

DEFAULT_EPSILON_GRID = tuple(float(e) for e in np.logspace(-3.0, 3.0, 13))
DEFAULT_HORIZON_NAMES = ("4h", "8h", "12h", "12h-8h", "24h-12h")
ENSEMBLE_ROWS = ("ensemble-u", "ensemble-w", "ensemble-opt")
ALL_ROWS = ("full",) + ENSEMBLE_ROWS


@dataclass(frozen=True)
class RunConfig:
    """Full configuration of a pipeline run."""

    synth: CohortSpec | None = None
    timelines_csv: str | None = None
    labels_csv: str | None = None
    catalog_csv: str | None = None
    folds: tuple = (0, 1, 2, 3)
    pool_regressor: RegressorConfig = field(default_factory=RegressorConfig)
    full_regressor: RegressorConfig = field(default_factory=RegressorConfig)
    weighting: str = "uniform"
    bound: float = 4.0
    epsilon_grid: tuple = DEFAULT_EPSILON_GRID
    total_budget: float = math.inf
    resamples: int = 1000
    horizons: tuple = DEFAULT_HORIZON_NAMES
    optimal_ridge: float | None = None
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.synth is None and None in (self.timelines_csv, self.labels_csv, self.catalog_csv):
            raise ConfigError("either a synth spec or timeline+label+catalog CSV paths are required")
        if self.weighting not in ("uniform", "optimal", "history"):
            raise ConfigError(f"unknown weighting scheme {self.weighting!r}")
        for h in self.horizons:
            HorizonSpec.parse(h)
        if any(f not in (0, 1, 2, 3) for f in self.folds):
            raise ConfigError(f"folds must be within 0..3, got {self.folds}")
        if self.resamples < 1:
            raise ConfigError("resamples must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["synth"] = None if self.synth is None else self.synth.to_dict()
        d["total_budget"] = "inf" if math.isinf(self.total_budget) else self.total_budget
        for key in ("folds", "epsilon_grid", "horizons"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        if d.get("synth") is not None:
            d["synth"] = CohortSpec.from_dict(d["synth"])
        for key in ("pool_regressor", "full_regressor"):
            if isinstance(d.get(key), dict):
                d[key] = RegressorConfig(**d[key])
        if d.get("total_budget") == "inf":
            d["total_budget"] = math.inf
        for key in ("folds", "epsilon_grid", "horizons"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def horizon_specs(self) -> list[HorizonSpec]:
        return [HorizonSpec.parse(h) for h in self.horizons]


def _fingerprint(payload) -> str:
    canonical = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Stage:
    """Caching wrapper: skip the build if fingerprint and outputs are intact."""

    def __init__(self, out_dir, name: str):
        self.name = name
        self.dir = Path(out_dir) / name
        self.marker = self.dir / "_fingerprint.json"

    def is_current(self, fingerprint: str, outputs: list[str]) -> bool:
        if not self.marker.exists():
            return False
        try:
            recorded = json.loads(self.marker.read_text())["fingerprint"]
        except (json.JSONDecodeError, KeyError):
            return False
        return recorded == fingerprint and all((self.dir / o).exists() for o in outputs)

    def run(self, fingerprint: str, outputs: list[str], builder) -> str:
        if self.is_current(fingerprint, outputs):
            log.info("stage %s: cached, skipping", self.name)
            return fingerprint
        if self.dir.exists():
            shutil.rmtree(self.dir)
        self.dir.mkdir(parents=True)
        log.info("stage %s: building", self.name)
        try:
            builder(self.dir)
        except Exception:
            log.error("stage %s failed; partial artifacts kept in %s", self.name, self.dir)
            raise
        self.marker.write_text(json.dumps({"fingerprint": fingerprint}))
        return fingerprint


def save_records(records: list[PatientRecord], path) -> None:
    grids = np.concatenate([r.grid for r in records], axis=0)
    labels = np.concatenate([r.labels for r in records])
    lengths = np.array([r.n_steps for r in records], dtype=np.int64)
    meta = [
        {
            "patient_id": r.patient_id,
            "is_sepsis": r.is_sepsis,
            "onset_step": r.onset_step,
            "onset_min": r.onset_min,
            "stay_hours": r.stay_hours,
        }
        for r in records
    ]
    np.savez(path, grids=grids, labels=labels, lengths=lengths, meta=json.dumps(meta))


def load_records(path) -> list[PatientRecord]:
    with np.load(path, allow_pickle=False) as data:
        grids = data["grids"]
        labels = data["labels"]
        lengths = data["lengths"]
        meta = json.loads(str(data["meta"]))
    records = []
    offset = 0
    for info, n in zip(meta, lengths):
        records.append(
            PatientRecord(
                patient_id=info["patient_id"],
                grid=grids[offset : offset + n],
                labels=labels[offset : offset + n],
                is_sepsis=info["is_sepsis"],
                onset_step=info["onset_step"],
                onset_min=info["onset_min"],
                stay_hours=info["stay_hours"],
            )
        )
        offset += n
    return records


# ---------------------------------------------------------------------------
# stages


def stage_synth(cfg: RunConfig, out_dir) -> str:
    if cfg.synth is None:
        raise ConfigError("synth stage requires a synth spec in the configuration")
    seed = derive_seed(cfg.seed, "synth")
    stage = Stage(out_dir, "cohort")
    outputs = ["timelines.csv", "labels.csv", "catalog.csv"]
    fingerprint = _fingerprint({"spec": cfg.synth.to_dict(), "seed": seed})

    def build(stage_dir):
        timelines = synthesize_cohort(cfg.synth, seed)
        cohort_mod.write_timelines_csv(timelines, stage_dir / "timelines.csv")
        cohort_mod.write_labels_csv(timelines, stage_dir / "labels.csv")
        make_catalog(cfg.synth.n_features).save(stage_dir / "catalog.csv")
        log.info("synthesized %d timelines", len(timelines))

    return stage.run(fingerprint, outputs, build)


def _input_paths(cfg: RunConfig, out_dir):
    if cfg.synth is not None:
        base = Path(out_dir) / "cohort"
        return base / "timelines.csv", base / "labels.csv", base / "catalog.csv"
    return Path(cfg.timelines_csv), Path(cfg.labels_csv), Path(cfg.catalog_csv)


def stage_preprocess(cfg: RunConfig, out_dir, upstream_fp: str | None) -> str:
    timelines_path, labels_path, catalog_path = _input_paths(cfg, out_dir)
    partition_seed = derive_seed(cfg.seed, "partition")
    if upstream_fp is None:
        upstream_fp = _fingerprint(
            {p.name: _file_checksum(p) for p in (timelines_path, labels_path, catalog_path)}
        )
    stage = Stage(out_dir, "preprocess")
    outputs = ["records.npz", "partition.csv"]
    fingerprint = _fingerprint({"upstream": upstream_fp, "partition_seed": partition_seed})

    def build(stage_dir):
        catalog = FeatureCatalog.load(catalog_path)
        timelines = cohort_mod.ingest_csv(timelines_path, catalog, labels_path)
        records = cohort_mod.preprocess_timelines(timelines, catalog)
        retained = cohort_mod.filter_cohort(records)
        log.info("preprocess: %d raw patients, %d retained after filtering", len(records), len(retained))
        assignment = cohort_mod.partition(retained, partition_seed)
        save_records(retained, stage_dir / "records.npz")
        assignment.save(stage_dir / "partition.csv")

    return stage.run(fingerprint, outputs, build)


def load_fold(cfg: RunConfig, out_dir, fold: int):
    """(train, validation, test) records standardized with this fold's train stats."""
    pre = Path(out_dir) / "preprocess"
    records = load_records(pre / "records.npz")
    assignment = PartitionAssignment.load(pre / "partition.csv")
    train, val, test = assignment.fold_split(records, fold)
    stats_path = Path(out_dir) / "train" / f"fold-{fold}" / "stats.npz"
    if stats_path.exists():
        with np.load(stats_path) as data:
            stats = (data["mu"], data["sigma"])
    else:
        stats = cohort_mod.compute_feature_stats(train)
    return (
        cohort_mod.standardize_records(train, stats),
        cohort_mod.standardize_records(val, stats),
        cohort_mod.standardize_records(test, stats),
    )


def _train_pool_worker(args):
    record, config, seed, bound = args
    return train_component([record], config, seed=seed, model_id=record.patient_id, bound=bound)


def stage_train(cfg: RunConfig, out_dir, upstream_fp: str) -> str:
    stage = Stage(out_dir, "train")
    outputs = [f"fold-{f}/{name}" for f in cfg.folds for name in ("pool.json", "full.json", "stats.npz")]
    fingerprint = _fingerprint(
        {
            "upstream": upstream_fp,
            "pool": asdict(cfg.pool_regressor),
            "full": asdict(cfg.full_regressor),
            "bound": cfg.bound,
            "folds": list(cfg.folds),
            "seed": cfg.seed,
        }
    )

    def build(stage_dir):
        pre = Path(out_dir) / "preprocess"
        records = load_records(pre / "records.npz")
        assignment = PartitionAssignment.load(pre / "partition.csv")
        for fold in cfg.folds:
            fold_dir = stage_dir / f"fold-{fold}"
            fold_dir.mkdir()
            train, _, _ = assignment.fold_split(records, fold)
            mu, sigma = cohort_mod.compute_feature_stats(train)
            np.savez(fold_dir / "stats.npz", mu=mu, sigma=sigma)
            train_std = cohort_mod.standardize_records(train, (mu, sigma))

            tasks = [
                (r, cfg.pool_regressor, derive_seed(cfg.seed, f"pool:{r.patient_id}", fold), cfg.bound)
                for r in train_std
            ]
            if cfg.workers > 1:
                with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
                    models = list(pool.map(_train_pool_worker, tasks, chunksize=8))
            else:
                models = [_train_pool_worker(t) for t in tasks]
            save_models(models, fold_dir / "pool.json")

            full = train_component(
                train_std,
                cfg.full_regressor,
                seed=derive_seed(cfg.seed, "full", fold),
                model_id="full",
                bound=cfg.bound,
            )
            save_models([full], fold_dir / "full.json")
            log.info("fold %d: trained %d pool models and the full model", fold, len(models))

    return stage.run(fingerprint, outputs, build)


def stage_grow(cfg: RunConfig, out_dir, upstream_fp: str) -> str:
    stage = Stage(out_dir, "grow")
    outputs = [
        f"fold-{f}/{name}"
        for f in cfg.folds
        for name in ("ensemble.json", "growth_log.csv", "ensemble_meta.json")
    ]
    fingerprint = _fingerprint({"upstream": upstream_fp, "folds": list(cfg.folds)})

    def build(stage_dir):
        for fold in cfg.folds:
            fold_dir = stage_dir / f"fold-{fold}"
            fold_dir.mkdir()
            train, val, _ = load_fold(cfg, out_dir, fold)
            sepsis_by_id = {r.patient_id: r.is_sepsis for r in train}
            pool_models = load_models(Path(out_dir) / "train" / f"fold-{fold}" / "pool.json")
            entries = []
            for model in pool_models:
                mv = misfits(model, val)
                entries.append(
                    PoolEntry(model=model, misfit=mv, mse=mv.mse, is_sepsis=sepsis_by_id[model.model_id])
                )
            pool = CandidatePool.build(entries)
            pool_size = pool.size
            result = grow(pool, validation=val)
            ens = result.ensemble
            write_growth_log(result.steps, fold_dir / "growth_log.csv")
            save_manifest(
                ens,
                fold_dir / "ensemble.json",
                provenance={"eval_set": result.eval_fingerprint, "fold": fold, "split": "validation"},
            )
            threshold = _ensemble_train_loss(ens, train)
            n_sepsis = sum(1 for m in ens.members if sepsis_by_id[m.model_id])
            meta = {
                "avg_train_loss": threshold,
                "n_members": ens.size,
                "n_sepsis_members": n_sepsis,
            }
            (fold_dir / "ensemble_meta.json").write_text(json.dumps(meta, indent=1))
            log.info(
                "fold %d: grew ensemble of %d models (%d sepsis) from pool of %d",
                fold, ens.size, n_sepsis, pool_size,
            )

    return stage.run(fingerprint, outputs, build)


def _ensemble_train_loss(ens: Ensemble, train_records) -> float:
    """Pooled per-step MSE of the uniform ensemble over its training population."""
    sq_sum = 0.0
    n_total = 0
    for r in train_records:
        scores = np.vstack([predict(m, r) for m in ens.members]).mean(axis=0)
        resid = scores - r.labels
        sq_sum += float(resid @ resid)
        n_total += r.n_steps
    return sq_sum / n_total


def _load_ensemble(out_dir, fold: int) -> tuple[Ensemble, dict]:
    pool_models = load_models(Path(out_dir) / "train" / f"fold-{fold}" / "pool.json")
    by_id = {m.model_id: m for m in pool_models}
    manifest, ens = load_manifest(Path(out_dir) / "grow" / f"fold-{fold}" / "ensemble.json", by_id)
    meta = json.loads((Path(out_dir) / "grow" / f"fold-{fold}" / "ensemble_meta.json").read_text())
    return ens, meta


def _fold_scores(cfg: RunConfig, out_dir, fold: int):
    """Score series per patient for every reported model kind, plus metadata.

    Member predictions are computed once per record and reused across the
    uniform, history, and optimal weightings; the optimal weights come from
    the member misfit covariance on this fold's validation records.
    """
    train, val, test = load_fold(cfg, out_dir, fold)
    full = load_models(Path(out_dir) / "train" / f"fold-{fold}" / "full.json")[0]
    ens, meta = _load_ensemble(out_dir, fold)

    member_map = {}
    for r in train + val + test:
        member_map[r.patient_id] = np.vstack([predict(m, r) for m in ens.members])

    val_index = tuple((r.patient_id, r.n_steps) for r in val)
    val_misfits = np.hstack([member_map[r.patient_id] - r.labels for r in val])
    member_misfits = [
        MisfitVector(m.model_id, val_misfits[i], val_index) for i, m in enumerate(ens.members)
    ]
    cov = estimate_covariance(member_misfits)
    w_opt = optimal_weights(cov, cfg.optimal_ridge).values

    score_maps = {kind: {} for kind in ALL_ROWS}
    for r in train + val + test:
        member = member_map[r.patient_id]
        score_maps["full"][r.patient_id] = predict(full, r)
        score_maps["ensemble-u"][r.patient_id] = member.mean(axis=0)
        score_maps["ensemble-opt"][r.patient_id] = w_opt @ member
        accuracy = 1.0 / (1.0 + (member - r.labels) ** 2)
        cumulative = np.cumsum(accuracy, axis=1)
        hist = np.empty(r.n_steps)
        hist[0] = member[:, 0].mean()
        if r.n_steps > 1:
            totals = cumulative[:, :-1]
            weights = totals / totals.sum(axis=0, keepdims=True)
            hist[1:] = (weights * member[:, 1:]).sum(axis=0)
        score_maps["ensemble-w"][r.patient_id] = hist

    return {
        "train": train,
        "val": val,
        "test": test,
        "full": full,
        "ensemble": ens,
        "meta": meta,
        "score_maps": score_maps,
    }


def stage_evaluate(cfg: RunConfig, out_dir, upstream_fp: str) -> str:
    stage = Stage(out_dir, "evaluate")
    outputs = ["auroc_by_fold.csv", "results_table.csv"]
    fingerprint = _fingerprint(
        {
            "upstream": upstream_fp,
            "horizons": list(cfg.horizons),
            "optimal_ridge": cfg.optimal_ridge,
            "folds": list(cfg.folds),
        }
    )

    def build(stage_dir):
        specs = cfg.horizon_specs()
        by_cell: dict[tuple[str, str], dict[int, float]] = {}
        for fold in cfg.folds:
            ctx = _fold_scores(cfg, out_dir, fold)
            for kind in ALL_ROWS:
                score_map = ctx["score_maps"][kind]
                for spec in specs:
                    scores, labels = pooled_horizon_scores(
                        ctx["test"], lambda r: score_map[r.patient_id], spec
                    )
                    by_cell.setdefault((kind, spec.name), {})[fold] = auroc(scores, labels)

        with open(stage_dir / "auroc_by_fold.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["model", "horizon", "fold", "auroc"])
            for (kind, horizon), per_fold in by_cell.items():
                for fold in sorted(per_fold):
                    writer.writerow([kind, horizon, fold, repr(per_fold[fold])])

        with open(stage_dir / "results_table.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            horizon_names = [s.name for s in specs]
            writer.writerow(["model"] + horizon_names + ["significant_vs_full"])
            for kind in ALL_ROWS:
                cells = []
                significant = []
                for horizon in horizon_names:
                    vals = np.array(sorted(by_cell[(kind, horizon)].items()))[:, 1]
                    cells.append(f"{vals.mean():.4f} ({vals.std(ddof=1):.4f})" if vals.size > 1
                                 else f"{vals.mean():.4f} (-)")
                    if kind != "full" and vals.size > 1:
                        full_vals = np.array(sorted(by_cell[("full", horizon)].items()))[:, 1]
                        if two_sample_t(vals, full_vals).p_value < SIGNIFICANCE_ALPHA:
                            significant.append(horizon)
                writer.writerow([kind] + cells + [";".join(significant)])

    return stage.run(fingerprint, outputs, build)


def _noised_map(score_map, records, scale, rng, bound):
    out = {}
    for r in records:
        base = np.clip(score_map[r.patient_id], 0.0, bound)
        out[r.patient_id] = base + laplace_sample(scale, rng, size=base.size)
    return out


def _sweep_targets(cfg: RunConfig, ctx) -> dict[str, tuple[dict, WeightVector]]:
    """target kind -> (score map, weights feeding the sensitivity bound)."""
    ens = ctx["ensemble"]
    return {
        "full": (ctx["score_maps"]["full"], WeightVector(np.ones(1), scheme="uniform")),
        "ensemble": (ctx["score_maps"]["ensemble-u"], uniform_weights(ens.size)),
    }


def stage_dp_sweep(cfg: RunConfig, out_dir, upstream_fp: str) -> str:
    stage = Stage(out_dir, "dp_sweep")
    specs = cfg.horizon_specs()
    outputs = [f"accuracy_loss_{s.name}.csv" for s in specs] + ["accuracy_loss_summary.csv"]
    fingerprint = _fingerprint(
        {
            "upstream": upstream_fp,
            "grid": list(cfg.epsilon_grid),
            "horizons": list(cfg.horizons),
            "folds": list(cfg.folds),
            "bound": cfg.bound,
            "seed": cfg.seed,
        }
    )

    def build(stage_dir):
        rows = []  # (horizon, epsilon, target, fold, auroc_private, auroc_nonprivate, loss)
        for fold in cfg.folds:
            ctx = _fold_scores(cfg, out_dir, fold)
            test = ctx["test"]
            for kind, (score_map, weights) in _sweep_targets(cfg, ctx).items():
                baselines = {}
                for spec in specs:
                    scores, labels = pooled_horizon_scores(
                        test, lambda r: score_map[r.patient_id], spec
                    )
                    baselines[spec.name] = auroc(scores, labels)
                for eps_idx, epsilon in enumerate(cfg.epsilon_grid):
                    params = PrivacyParams(epsilon=epsilon, bound=cfg.bound)
                    scale = noise_scale(weights, params)
                    rng = np.random.default_rng(
                        derive_seed(cfg.seed, f"dpsweep:{kind}:{eps_idx}", fold)
                    )
                    noised = _noised_map(score_map, test, scale, rng, cfg.bound)
                    for spec in specs:
                        scores, labels = pooled_horizon_scores(
                            test, lambda r: noised[r.patient_id], spec
                        )
                        auroc_private = auroc(scores, labels)
                        base = baselines[spec.name]
                        if base > 0.5:
                            loss = accuracy_loss(auroc_private, base)
                        else:
                            log.warning(
                                "fold %d %s %s: non-private AUROC %.3f <= 0.5, accuracy loss undefined",
                                fold, kind, spec.name, base,
                            )
                            loss = math.nan
                        rows.append((spec.name, epsilon, kind, fold, auroc_private, base, loss))

        for spec in specs:
            with open(stage_dir / f"accuracy_loss_{spec.name}.csv", "w", newline="",
                      encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(["epsilon", "target_kind", "fold", "auroc_private",
                                 "auroc_nonprivate", "accuracy_loss"])
                for horizon, epsilon, kind, fold, priv, base, loss in rows:
                    if horizon == spec.name:
                        writer.writerow([repr(epsilon), kind, fold, repr(priv), repr(base), repr(loss)])

        with open(stage_dir / "accuracy_loss_summary.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["horizon", "epsilon", "target_kind",
                             "accuracy_loss_q25", "accuracy_loss_median", "accuracy_loss_q75"])
            for spec in specs:
                for epsilon in cfg.epsilon_grid:
                    for kind in ("full", "ensemble"):
                        losses = [
                            loss for horizon, eps, k, _, _, _, loss in rows
                            if horizon == spec.name and eps == epsilon and k == kind
                        ]
                        q25, q50, q75 = np.percentile(losses, [25.0, 50.0, 75.0])
                        writer.writerow([spec.name, repr(epsilon), kind,
                                         repr(float(q25)), repr(float(q50)), repr(float(q75))])

    return stage.run(fingerprint, outputs, build)


class _CachedTarget:
    """Attack target that serves precomputed score series by patient id."""

    def __init__(self, kind: str, avg_train_loss: float, score_map: dict):
        self.kind = kind
        self.avg_train_loss = avg_train_loss
        self._map = score_map

    def scores(self, record: PatientRecord) -> np.ndarray:
        return self._map[record.patient_id]


def stage_attack(cfg: RunConfig, out_dir, upstream_fp: str) -> str:
    stage = Stage(out_dir, "attack")
    outputs = ["leakage_sweep.csv", "attack_by_fold.csv"] + [
        f"query_log_fold-{f}.csv" for f in cfg.folds
    ]
    fingerprint = _fingerprint(
        {
            "upstream": upstream_fp,
            "grid": list(cfg.epsilon_grid),
            "resamples": cfg.resamples,
            "folds": list(cfg.folds),
            "bound": cfg.bound,
            "total_budget": repr(cfg.total_budget),
            "seed": cfg.seed,
        }
    )

    def build(stage_dir):
        per_fold_rows = []
        pooled: dict[tuple[str, float], dict] = {}
        for fold in cfg.folds:
            ctx = _fold_scores(cfg, out_dir, fold)
            members, test = ctx["train"], ctx["test"]
            targets = {
                "full": (_CachedTarget("full", ctx["full"].avg_train_loss,
                                       ctx["score_maps"]["full"]),
                         WeightVector(np.ones(1), scheme="uniform")),
                "ensemble": (_CachedTarget("ensemble", ctx["meta"]["avg_train_loss"],
                                           ctx["score_maps"]["ensemble-u"]),
                             uniform_weights(ctx["ensemble"].size)),
            }
            accountant = PrivacyAccountant(cfg.total_budget)
            for kind, (base_target, weights) in targets.items():
                for eps_idx, epsilon in enumerate(cfg.epsilon_grid):
                    params = PrivacyParams(epsilon=epsilon, bound=cfg.bound)
                    noise_rng = np.random.default_rng(
                        derive_seed(cfg.seed, f"attack-noise:{kind}:{eps_idx}", fold)
                    )
                    resample_rng = np.random.default_rng(
                        derive_seed(cfg.seed, f"attack-resample:{kind}:{eps_idx}", fold)
                    )
                    private = attack_mod.PrivateTarget(base_target, weights, params,
                                                       accountant, noise_rng)
                    report = attack_mod.privacy_leakage(
                        private, members, test, resamples=cfg.resamples,
                        rng=resample_rng, epsilon=epsilon,
                    )
                    per_fold_rows.append((fold, kind, report))
                    agg = pooled.setdefault((kind, epsilon), {"tprs": [], "leaks": [], "fprs": []})
                    agg["tprs"].append(report.tpr_samples)
                    agg["leaks"].append(report.tpr_samples - report.fpr)
                    agg["fprs"].append(report.fpr)
            accountant.export_log(stage_dir / f"query_log_fold-{fold}.csv")

        with open(stage_dir / "attack_by_fold.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["fold", "target_kind", "epsilon", "tpr_median", "fpr",
                             "leakage_q25", "leakage_median", "leakage_q75"])
            for fold, kind, r in per_fold_rows:
                writer.writerow([fold, kind, repr(r.epsilon), repr(r.tpr), repr(r.fpr),
                                 repr(r.resample_quantiles[0]), repr(r.resample_quantiles[1]),
                                 repr(r.resample_quantiles[2])])

        with open(stage_dir / "leakage_sweep.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(attack_mod.LEAKAGE_HEADER)
            for kind in ("full", "ensemble"):
                for epsilon in cfg.epsilon_grid:
                    agg = pooled[(kind, epsilon)]
                    leakages = np.concatenate(agg["leaks"])
                    tpr_median = float(np.median(np.concatenate(agg["tprs"])))
                    fpr = float(np.mean(agg["fprs"]))
                    q25, q50, q75 = np.percentile(leakages, [25.0, 50.0, 75.0])
                    writer.writerow([repr(float(epsilon)), repr(tpr_median), repr(fpr),
                                     repr(float(q25)), repr(float(q50)), repr(float(q75)), kind])

    return stage.run(fingerprint, outputs, build)


def run_all(cfg: RunConfig, out_dir) -> dict[str, str]:
    """Run every stage in order; returns the stage fingerprints."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "run_config.json")
    fps: dict[str, str] = {}
    if cfg.synth is not None:
        fps["synth"] = stage_synth(cfg, out_dir)
    fps["preprocess"] = stage_preprocess(cfg, out_dir, fps.get("synth"))
    fps["train"] = stage_train(cfg, out_dir, fps["preprocess"])
    fps["grow"] = stage_grow(cfg, out_dir, fps["train"])
    fps["evaluate"] = stage_evaluate(cfg, out_dir, fps["grow"])
    fps["dp_sweep"] = stage_dp_sweep(cfg, out_dir, fps["grow"])
    fps["attack"] = stage_attack(cfg, out_dir, fps["grow"])
    return fps
