"""Component regressors: training, prediction, misfits, and serialization.

Reference regressors keep the ensemble machinery model-agnostic:

* ``ridge``      -- closed-form normal-equations fit over a lagged window of
                    recent grid steps. The objective is mean squared error
                    plus an L2 penalty on the non-intercept coefficients, so
                    the solution is invariant to duplicating training records.
* ``constant``   -- intercept-only baseline (predicts its fitted mean label).
* ``recurrent``  -- a single-layer tanh recurrence trained by full-batch
                    gradient descent on overlapping 24h windows; a slower
                    stress-test model, not used by default.

All predictions are clipped to [0, bound].
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field

import numpy as np

from .cohort import PatientRecord
from .errors import ConfigError, InsufficientDataError, ShapeError

REGRESSOR_KINDS = ("ridge", "constant", "recurrent")
MODEL_FORMAT_VERSION = 1


@dataclass(frozen=True)
class RegressorConfig:
    kind: str = "ridge"
    lags: int = 8  # history window in 30-minute steps (8 = 4 hours)
    ridge_lambda: float = 1e-2
    # recurrent-only settings
    hidden_units: int = 12
    epochs: int = 60
    learning_rate: float = 0.05
    window_steps: int = 48  # 24h batching windows ...
    window_overlap: int = 24  # ... with 12h overlap

    def __post_init__(self):
        if self.kind not in REGRESSOR_KINDS:
            raise ConfigError(f"unknown regressor kind {self.kind!r}")
        if self.lags < 1:
            raise ConfigError("lags must be >= 1")
        if self.ridge_lambda < 0:
            raise ConfigError("ridge_lambda must be >= 0")
        if self.window_overlap >= self.window_steps:
            raise ConfigError("window_overlap must be smaller than window_steps")


@dataclass
class ComponentModel:
    """An opaque trained regressor with bounded outputs."""

    model_id: str
    kind: str
    parameters: dict
    output_bound: float
    avg_train_loss: float
    trained_on: frozenset

    @property
    def n_features(self) -> int:
        return int(self.parameters["n_features"])


@dataclass
class MisfitVector:
    """Per-sample misfits prediction - truth of one model on a shared eval set."""

    model_id: str
    values: np.ndarray
    sample_index: tuple  # ((patient_id, n_steps), ...) identifying the eval points

    @property
    def mse(self) -> float:
        return float(np.mean(self.values**2))


def lagged_design(grid: np.ndarray, lags: int) -> np.ndarray:
    """Design matrix of the last `lags` grid rows per step, plus an intercept.

    Steps earlier than the window are edge-padded with the first row.
    """
    n_steps = grid.shape[0]
    padded = np.vstack([np.repeat(grid[:1], lags - 1, axis=0), grid]) if lags > 1 else grid
    blocks = [padded[i : i + n_steps] for i in range(lags)]  # oldest ... current
    blocks.append(np.ones((n_steps, 1)))
    return np.hstack(blocks)


def _check_records(records, min_steps, config):
    if not records:
        raise ConfigError("need at least one training record")
    for r in records:
        if r.n_steps < min_steps:
            raise InsufficientDataError(
                f"record {r.patient_id} has {r.n_steps} steps, {config.kind} needs >= {min_steps}"
            )
    n_features = records[0].grid.shape[1]
    for r in records:
        if r.grid.shape[1] != n_features:
            raise ShapeError(f"record {r.patient_id} has {r.grid.shape[1]} features, expected {n_features}")
    return n_features


def _fit_ridge(records, config, n_features):
    p = config.lags * n_features + 1
    gram = np.zeros((p, p))
    moment = np.zeros(p)
    n_total = 0
    for r in records:
        design = lagged_design(r.grid, config.lags)
        gram += design.T @ design
        moment += design.T @ r.labels.astype(float)
        n_total += r.n_steps
    penalty = np.eye(p)
    penalty[-1, -1] = 0.0  # intercept unpenalized
    system = gram / n_total + config.ridge_lambda * penalty
    coef = np.linalg.solve(system, moment / n_total)
    return {"coef": coef, "lags": config.lags, "n_features": n_features}


def _fit_constant(records, n_features):
    total = sum(float(r.labels.sum()) for r in records)
    count = sum(r.n_steps for r in records)
    return {"intercept": total / count, "n_features": n_features}


def _record_windows(record, config):
    """Overlapping training windows over one record's steps."""
    n_steps = record.n_steps
    if n_steps <= config.window_steps:
        return [(0, n_steps)]
    stride = config.window_steps - config.window_overlap
    starts = list(range(0, n_steps - config.window_steps + 1, stride))
    if starts[-1] + config.window_steps < n_steps:
        starts.append(n_steps - config.window_steps)
    return [(s, s + config.window_steps) for s in starts]


def _rnn_forward(params, grid):
    w_in, w_rec, b_h, w_out, b_out = (
        params["w_in"], params["w_rec"], params["b_h"], params["w_out"], params["b_out"],
    )
    n_steps = grid.shape[0]
    hidden = np.zeros((n_steps, w_in.shape[0]))
    h = np.zeros(w_in.shape[0])
    for t in range(n_steps):
        h = np.tanh(w_in @ grid[t] + w_rec @ h + b_h)
        hidden[t] = h
    return hidden, hidden @ w_out + b_out


def _fit_recurrent(records, config, n_features, seed):
    rng = np.random.default_rng([seed, 0x5EC])
    n_hidden = config.hidden_units
    params = {
        "w_in": rng.normal(0.0, 0.2, size=(n_hidden, n_features)),
        "w_rec": rng.normal(0.0, 0.2 / np.sqrt(n_hidden), size=(n_hidden, n_hidden)),
        "b_h": np.zeros(n_hidden),
        "w_out": rng.normal(0.0, 0.2, size=n_hidden),
        "b_out": np.zeros(()),
    }
    windows = [
        (r, s, e) for r in records for (s, e) in _record_windows(r, config)
    ]
    n_samples = sum(e - s for _, s, e in windows)
    for _ in range(config.epochs):
        grads = {k: np.zeros_like(v) for k, v in params.items()}
        for record, start, end in windows:
            grid = record.grid[start:end]
            target = record.labels[start:end].astype(float)
            hidden, pred = _rnn_forward(params, grid)
            err = 2.0 * (pred - target) / n_samples  # d(MSE)/d(pred)
            grads["w_out"] += hidden.T @ err
            grads["b_out"] += err.sum()
            # backprop through time
            dh_next = np.zeros(n_hidden)
            for t in range(grid.shape[0] - 1, -1, -1):
                dh = err[t] * params["w_out"] + dh_next
                dz = dh * (1.0 - hidden[t] ** 2)
                grads["w_in"] += np.outer(dz, grid[t])
                grads["b_h"] += dz
                if t > 0:
                    grads["w_rec"] += np.outer(dz, hidden[t - 1])
                dh_next = params["w_rec"].T @ dz
        for k in params:
            params[k] = params[k] - config.learning_rate * grads[k]
    params["n_features"] = n_features
    return params


def train_component(
    records: list[PatientRecord],
    config: RegressorConfig,
    seed: int = 0,
    model_id: str | None = None,
    bound: float = 4.0,
) -> ComponentModel:
    """Fit one component model; deterministic in (record order, config, seed)."""
    min_steps = {"ridge": config.lags, "constant": 1, "recurrent": 2}[config.kind]
    n_features = _check_records(records, min_steps, config)

    if config.kind == "ridge":
        parameters = _fit_ridge(records, config, n_features)
    elif config.kind == "constant":
        parameters = _fit_constant(records, n_features)
    else:
        parameters = _fit_recurrent(records, config, n_features, seed)

    if model_id is None:
        model_id = records[0].patient_id if len(records) == 1 else f"pooled-{len(records)}"
    model = ComponentModel(
        model_id=model_id,
        kind=config.kind,
        parameters=parameters,
        output_bound=float(bound),
        avg_train_loss=0.0,
        trained_on=frozenset(r.patient_id for r in records),
    )
    sq_sum = 0.0
    n_total = 0
    for r in records:
        resid = predict(model, r) - r.labels
        sq_sum += float(resid @ resid)
        n_total += r.n_steps
    model.avg_train_loss = sq_sum / n_total
    return model


def predict(model: ComponentModel, record: PatientRecord) -> np.ndarray:
    """Severity score per 30-minute step, clipped to [0, bound]."""
    if record.grid.shape[1] != model.n_features:
        raise ShapeError(
            f"record {record.patient_id} has {record.grid.shape[1]} features, "
            f"model {model.model_id} expects {model.n_features}"
        )
    if model.kind == "ridge":
        design = lagged_design(record.grid, int(model.parameters["lags"]))
        raw = design @ model.parameters["coef"]
    elif model.kind == "constant":
        raw = np.full(record.n_steps, float(model.parameters["intercept"]))
    else:
        _, raw = _rnn_forward(model.parameters, record.grid)
    return np.clip(raw, 0.0, model.output_bound)


def misfits(model: ComponentModel, eval_set: list[PatientRecord]) -> MisfitVector:
    """Concatenated per-step misfits prediction - label over the eval records."""
    if not eval_set:
        raise ConfigError("misfits need a non-empty evaluation set")
    chunks = [predict(model, r) - r.labels for r in eval_set]
    index = tuple((r.patient_id, r.n_steps) for r in eval_set)
    return MisfitVector(model_id=model.model_id, values=np.concatenate(chunks), sample_index=index)


def _encode_array(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr)
    return {
        "__ndarray__": base64.b64encode(arr.tobytes()).decode("ascii"),
        "dtype": str(arr.dtype),
        "shape": list(arr.shape),
    }


def _decode_array(obj: dict) -> np.ndarray:
    data = base64.b64decode(obj["__ndarray__"])
    return np.frombuffer(data, dtype=obj["dtype"]).reshape(obj["shape"]).copy()


def model_to_dict(model: ComponentModel) -> dict:
    params = {
        k: _encode_array(v) if isinstance(v, np.ndarray) else v
        for k, v in model.parameters.items()
    }
    return {
        "format_version": MODEL_FORMAT_VERSION,
        "model_id": model.model_id,
        "kind": model.kind,
        "output_bound": model.output_bound,
        "avg_train_loss": model.avg_train_loss,
        "trained_on": sorted(model.trained_on),
        "parameters": params,
    }


def model_from_dict(data: dict) -> ComponentModel:
    if data.get("format_version") != MODEL_FORMAT_VERSION:
        raise ConfigError(f"unsupported model format version {data.get('format_version')!r}")
    params = {
        k: _decode_array(v) if isinstance(v, dict) and "__ndarray__" in v else v
        for k, v in data["parameters"].items()
    }
    return ComponentModel(
        model_id=data["model_id"],
        kind=data["kind"],
        parameters=params,
        output_bound=float(data["output_bound"]),
        avg_train_loss=float(data["avg_train_loss"]),
        trained_on=frozenset(data["trained_on"]),
    )


def save_models(models: list[ComponentModel], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([model_to_dict(m) for m in models], fh)


def load_models(path) -> list[ComponentModel]:
    with open(path, encoding="utf-8") as fh:
        return [model_from_dict(d) for d in json.load(fh)]
