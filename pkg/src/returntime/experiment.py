"""Experiment plumbing shared by the CLI: dataset assembly, model training
dispatch, prediction dispatch, and report emission."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import baselines, cox, metrics, net, rnnsm
from .config import validate_model_name
from .data import (
    Dataset,
    assign_windows,
    read_sessions_jsonl,
    resolve_window_days,
    stratified_split,
)
from .errors import ConfigError, DataModelMismatchError
from .features import (
    FeatureConfig,
    SequenceStats,
    Standardization,
    build_aggregates,
    build_sequences,
    count_active_days,
    select_embedding_dims,
)

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# dataset assembly

@dataclass
class LoadedData:
    dataset: Dataset
    train: Dataset
    test: Dataset
    window_days: dict


def load_and_split(config: dict) -> LoadedData:
    sessions_path = (config.get("data") or {}).get("sessions")
    if not sessions_path:
        raise ConfigError("config carries no data.sessions path")
    if not Path(sessions_path).exists():
        raise DataModelMismatchError(f"sessions file not found: {sessions_path}")
    sessions, epoch_iso, epoch_weekday = read_sessions_jsonl(sessions_path)
    window_cfg = config.get("window")
    if not window_cfg:
        raise ConfigError("config carries no window section")
    window = resolve_window_days(window_cfg, epoch_iso)
    dataset = assign_windows(sessions, window, epoch_iso=epoch_iso,
                             epoch_weekday=epoch_weekday)
    split_cfg = config.get("split") or {}
    seed = int(split_cfg.get("seed") if split_cfg.get("seed") is not None else config["seed"])
    train, test = stratified_split(dataset, float(split_cfg.get("test_fraction", 0.2)), seed)
    return LoadedData(
        dataset=dataset, train=train, test=test,
        window_days=window.to_dict(),
    )


def feature_config(config: dict) -> FeatureConfig:
    f = config.get("features") or {}
    return FeatureConfig(
        max_steps=int(f.get("max_steps", 64)),
        per_session_steps=bool(f.get("per_session_steps", False)),
        variance_threshold=float(f.get("variance_threshold", 0.9)),
    )


def training_config(config: dict, model: str, seed_offset: int = 0) -> rnnsm.TrainingConfig:
    t = (config.get("training") or {}).get(model, {})
    return rnnsm.TrainingConfig(
        epochs=int(t.get("epochs", 20)),
        batch_size=int(t.get("batch_size", 64)),
        learning_rate=float(t.get("learning_rate", 0.01)),
        clip_norm=float(t.get("clip_norm", 5.0)),
        seed=int(config["seed"]) + seed_offset,
    )


def _net_config(stats: SequenceStats, dims: dict[str, int], config: dict) -> net.NetConfig:
    n = config.get("network") or {}
    return net.NetConfig(
        discrete_features=tuple(stats.discrete_features),
        cardinalities=tuple(stats.cardinalities),
        embedding_dims=tuple(int(dims[name]) for name in stats.discrete_features),
        n_continuous=len(stats.cont_channels),
        fusion_size=int(n.get("fusion_size", 32)),
        hidden_size=int(n.get("hidden_size", 32)),
    )


def resolve_embedding_dims(
    train_seqs, stats: SequenceStats, config: dict, family: str, w_hint: float = 0.1
) -> dict[str, int]:
    """Either take dims from the config or run the preliminary-model PCA
    selection: train wide embeddings briefly with the family's own loss,
    then keep the dimensions explaining more than the variance threshold."""
    n = config.get("network") or {}
    dims_option = n.get("embedding_dims", "auto")
    if isinstance(dims_option, dict):
        missing = set(stats.discrete_features) - set(dims_option)
        if missing:
            raise ConfigError(f"embedding_dims missing features {sorted(missing)}")
        return {k: int(dims_option[k]) for k in stats.discrete_features}
    if dims_option != "auto":
        raise ConfigError("network.embedding_dims must be 'auto' or a mapping")

    wide = int(n.get("preliminary_dim", 10))
    prelim_config = net.NetConfig(
        discrete_features=tuple(stats.discrete_features),
        cardinalities=tuple(stats.cardinalities),
        embedding_dims=tuple(wide for _ in stats.discrete_features),
        n_continuous=len(stats.cont_channels),
        fusion_size=int(n.get("fusion_size", 32)),
        hidden_size=int(n.get("hidden_size", 32)),
    )
    base = training_config(config, family, seed_offset=101)
    prelim_train = rnnsm.TrainingConfig(
        epochs=int(n.get("preliminary_epochs", 2)),
        batch_size=base.batch_size,
        learning_rate=base.learning_rate,
        clip_norm=base.clip_norm,
        seed=base.seed,
    )
    if family == "rnn":
        prelim_params = baselines.train_simple_rnn(
            train_seqs, prelim_config, stats, prelim_train
        ).params
    else:
        prelim_params = rnnsm.train_rnnsm(
            train_seqs, prelim_config, stats, w=w_hint, config=prelim_train
        ).params
    threshold = feature_config(config).variance_threshold
    dims = {
        name: select_embedding_dims(prelim_params[f"emb_{name}"], threshold)
        for name in stats.discrete_features
    }
    logger.info("embedding dimensions from preliminary %s model: %s", family, dims)
    return dims


def select_w(train: Dataset, config: dict, dims: dict[str, int]) -> float:
    """Grid search over the current-influence weight on validation concordance.

    Each candidate trains a model with the final architecture and schedule on
    a held-out split of the train data, so the selection sees the same
    capacity the final model will have.
    """
    r = config.get("rnnsm") or {}
    if r.get("w") is not None:
        return float(r["w"])
    grid = [float(w) for w in r.get("w_grid", [0.01, 0.05, 0.1, 0.5, 1.0])]
    if any(w <= 0 for w in grid):
        raise ConfigError("w grid values must be positive")
    if len(grid) == 1:
        return grid[0]
    fit_ds, val_ds = stratified_split(
        train, float(r.get("validation_fraction", 0.2)), int(config["seed"]) + 17
    )
    fcfg = feature_config(config)
    fit_seqs, stats = build_sequences(fit_ds, fcfg)
    val_seqs, _ = build_sequences(val_ds, stats=stats)
    net_cfg = _net_config(stats, dims, config)
    base = training_config(config, "rnnsm", seed_offset=31)
    grid_epochs = r.get("grid_epochs")
    epochs = int(grid_epochs) if grid_epochs is not None else base.epochs
    scores = []
    for w in grid:
        tcfg = rnnsm.TrainingConfig(
            epochs=epochs, batch_size=base.batch_size,
            learning_rate=base.learning_rate, clip_norm=base.clip_norm, seed=base.seed,
        )
        model = rnnsm.train_rnnsm(fit_seqs, net_cfg, stats, w=w, config=tcfg)
        records = rnnsm.predict(model, val_seqs, condition_on_absence=False)
        c = metrics.concordance_index(records)
        scores.append((c, -w))
        logger.info("w grid: w=%g validation concordance %.4f", w, c)
    best = max(range(len(grid)), key=lambda i: scores[i])
    return grid[best]


# ---------------------------------------------------------------------------
# training dispatch

def train_model(model_name: str, data: LoadedData, config: dict, out_dir: str | Path) -> dict:
    """Fit one model family on the train split and persist its artifact.

    cpha and rnnsma alias the cph / rnnsm artifacts since only prediction
    differs. Returns the metadata dictionary that was written next to the
    artifact.
    """
    model_name = validate_model_name(model_name)
    family = {"cpha": "cph", "rnnsma": "rnnsm"}.get(model_name, model_name)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fcfg = feature_config(config)
    meta: dict = {
        "model_family": family,
        "window_days": data.window_days,
        "split": {
            "test_fraction": float((config.get("split") or {}).get("test_fraction", 0.2)),
            "seed": int((config.get("split") or {}).get("seed") or config["seed"]),
        },
        "features": {
            "max_steps": fcfg.max_steps,
            "per_session_steps": fcfg.per_session_steps,
        },
        "seed": int(config["seed"]),
    }

    if family == "baseline":
        (out / "model.json").write_text(json.dumps({"kind": "baseline"}, indent=2))

    elif family == "rnn":
        seqs, stats = build_sequences(data.train, fcfg)
        dims = resolve_embedding_dims(
            [s for s in seqs if not s.is_censored], stats, config, family="rnn"
        )
        model = baselines.train_simple_rnn(
            seqs, _net_config(stats, dims, config), stats,
            training_config(config, "rnn"),
        )
        baselines.save_simple_rnn(out / "model.npz", model)
        stats.save(out / "norm_stats.json")
        meta["embedding_dims"] = dims
        meta["loss_trace"] = model.loss_trace

    elif family == "cph":
        agg = build_aggregates(data.train)
        standardization = Standardization.fit(agg.X, agg.feature_names)
        times = np.array([u.final_gap for u in data.train.users])
        events = np.array([not u.is_censored for u in data.train.users])
        model = cox.fit(standardization.apply(agg.X), times, events,
                        feature_names=agg.feature_names)
        model.save(out / "model.json")
        meta["standardization"] = standardization.to_dict()
        meta["continuous_markers"] = agg.continuous_markers
        meta["beta"] = model.beta.tolist()

    elif family == "rnnsm":
        seqs, stats = build_sequences(data.train, fcfg)
        dims = resolve_embedding_dims(seqs, stats, config, family="rnnsm", w_hint=0.1)
        w = select_w(data.train, config, dims)
        model = rnnsm.train_rnnsm(
            seqs, _net_config(stats, dims, config), stats, w=w,
            config=training_config(config, "rnnsm"),
        )
        rnnsm.save_model(out / "model.npz", model)
        stats.save(out / "norm_stats.json")
        meta["w"] = w
        meta["embedding_dims"] = dims
        meta["loss_trace"] = model.loss_trace
        meta["diverged"] = model.diverged

    (out / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2))
    return meta


# ---------------------------------------------------------------------------
# prediction dispatch

def _cox_records(model, standardization, markers, dataset, condition, threads=1):
    agg = build_aggregates(dataset, continuous_markers=markers)
    if agg.feature_names != standardization.feature_names:
        raise DataModelMismatchError(
            "aggregate feature schema does not match the trained model"
        )
    X = standardization.apply(agg.X)
    users = dataset.users

    def one(i: int) -> metrics.PredictionRecord:
        user = users[i]
        t_s = dataset.absence_time(user)
        pred = cox.expected_survival_time(
            model, X[i], condition_on_absence=condition, t_s=t_s
        )
        return metrics.PredictionRecord(
            user_id=user.user_id,
            predicted_return_days=pred,
            true_return_days=None if user.is_censored else user.final_gap,
            censored_lower_bound_days=user.final_gap if user.is_censored else None,
            horizon_gap_days=dataset.horizon_gap(user),
            active_day_count=count_active_days(user),
            last_session_end_days=user.last_session_end,
        )

    indices = range(len(users))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, indices))
    return [one(i) for i in indices]


def predict_model(
    model_name: str,
    artifact_dir: str | Path,
    dataset: Dataset,
    config: dict,
) -> list[metrics.PredictionRecord]:
    model_name = validate_model_name(model_name)
    family = {"cpha": "cph", "rnnsma": "rnnsm"}.get(model_name, model_name)
    conditioned = model_name in ("cpha", "rnnsma")
    artifact = Path(artifact_dir)
    meta_path = artifact / "meta.json"
    if not meta_path.exists():
        raise DataModelMismatchError(f"no model metadata at {meta_path}")
    meta = json.loads(meta_path.read_text())
    if meta.get("model_family") != family:
        raise DataModelMismatchError(
            f"artifact at {artifact} holds a {meta.get('model_family')!r} model, "
            f"cannot predict with {model_name!r}"
        )
    if meta.get("window_days") != _window_days_of(dataset):
        raise DataModelMismatchError(
            "dataset windows do not match the windows the model was trained with"
        )
    threads = int(config.get("threads", 1))
    horizon_hint = dataset.window.prediction_length

    if family == "baseline":
        return baselines.baseline_predict(dataset)

    if family == "rnn":
        model = baselines.load_simple_rnn(artifact / "model.npz")
        seqs, _ = build_sequences(dataset, stats=model.stats)
        return baselines.predict_simple_rnn(model, seqs)

    if family == "cph":
        model = cox.CoxModel.load(artifact / "model.json")
        standardization = Standardization.from_dict(meta["standardization"])
        return _cox_records(
            model, standardization, meta["continuous_markers"], dataset,
            condition=conditioned, threads=threads,
        )

    model = rnnsm.load_model(artifact / "model.npz")
    seqs, _ = build_sequences(dataset, stats=model.stats)
    return rnnsm.predict(
        model, seqs, condition_on_absence=conditioned,
        horizon_hint=horizon_hint, threads=threads,
    )


def _window_days_of(dataset: Dataset) -> dict:
    return dataset.window.to_dict()


# ---------------------------------------------------------------------------
# report emission

def write_report(out_dir: str | Path, model_records: dict, auc_score_mode: str) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = metrics.build_report(model_records, auc_score_mode=auc_score_mode)
    (out / "report.json").write_text(json.dumps(report, sort_keys=True, indent=2))
    for table in ("rmse_by_week", "mean_error_by_week", "rmse_by_active_days"):
        lines = ["model,bucket,value"]
        for model_name, row in report["tables"][table].items():
            for bucket, value in row.items():
                lines.append(f"{model_name},{bucket},{value!r}")
        (out / f"{table}.csv").write_text("\n".join(lines) + "\n")
    return report
