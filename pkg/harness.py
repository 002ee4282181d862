"""
Multibin Experiment Harness
Dataset x model kind x strategy x K experiments

Loads the flat JSON experiment config, trains every binary model a strategy
needs (independently, on a thread pool), evaluates the multinomial predictor
on the test split with macro-averaged accuracy and writes one record per
experiment: model files, manifest, training histories, a JSON result sidecar
and a row in the results CSV. Also drives the K sweep and seed repeats and
renders the comparison tables.
"""

import hashlib
import json
import logging
import threading
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from data_pipeline import DatasetId, FeatureDataset, class_counts, prepare_features, relabel_for_task
from errors import ConfigError, Interrupted, TaskFailure, UsageError
from model_core import ModelKind, TrainConfig, derive_seed, save_model, train_binary
from multiclass import (CostLedger, EnsembleManifest, ModelSlot, PartitionPolicy, Strategy,
                        assemble_predictor, plan_models)

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.txt"
HISTORIES_NAME = "histories.json"
RESULT_NAME = "result.json"
RESULT_COLUMNS = ["dataset", "model_kind", "strategy", "K", "M", "batch", "seed",
                  "macro_accuracy_pct", "models_total", "worst_case_evals",
                  "mean_observed_evals", "wall_s"]

# key -> (type, default); `list` values are lists of ints
CONFIG_SCHEMA: Dict[str, Tuple[type, Any]] = {
    "dataset": (str, "mnist"),
    "data_dir": (str, "data"),
    "model": (str, "quantum"),
    "strategy": (str, "dt"),
    "K": (int, 6),
    "M": (int, 20),
    "D": (int, 2),
    "dropout": (float, 0.2),
    "relaxed_l1": (bool, True),
    "batch": (int, 128),
    "epochs": (int, 20),
    "lr": (float, 0.05),
    "momentum": (float, 0.09),
    "decay": (float, 1e-4),
    "seed": (int, 0),
    "policy": (str, "balanced"),
    "partition_seeds": (list, [0, 1, 2]),
    "workers": (int, 1),
    "out_dir": (str, "runs"),
    "cache_dir": (str, ""),
    "train_limit": (int, 0),
    "test_limit": (int, 0),
    "k_range": (list, [2, 3, 4, 5, 6, 7, 8, 9, 10]),
    "repeat_seeds": (list, [0, 1, 2]),
}

# keys that never change a result
RUNTIME_KEYS = {"data_dir", "workers", "out_dir", "cache_dir", "k_range", "repeat_seeds"}


# ========================================
# CONFIGURATION
# ========================================

def _coerce(key: str, value: Any) -> Any:
    kind, _ = CONFIG_SCHEMA[key]
    try:
        if kind is bool:
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text in ("true", "1", "yes"):
                return True
            if text in ("false", "0", "no"):
                return False
            raise ValueError(value)
        if kind is list:
            if isinstance(value, str):
                return [int(v) for v in value.split(",") if v.strip()]
            return [int(v) for v in value]
        if kind is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"config key '{key}' expects {kind.__name__}, got {value!r}")


@dataclass
class ExperimentConfig:
    """One experiment: dataset, model kind, strategy, K and training hyperparameters"""
    dataset: str = "mnist"
    data_dir: str = "data"
    model: str = "quantum"
    strategy: str = "dt"
    K: int = 6
    M: int = 20
    D: int = 2
    dropout: float = 0.2
    relaxed_l1: bool = True
    batch: int = 128
    epochs: int = 20
    lr: float = 0.05
    momentum: float = 0.09
    decay: float = 1e-4
    seed: int = 0
    policy: str = "balanced"
    partition_seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    workers: int = 1
    out_dir: str = "runs"
    cache_dir: str = ""
    train_limit: int = 0
    test_limit: int = 0
    k_range: List[int] = field(default_factory=lambda: list(range(2, 11)))
    repeat_seeds: List[int] = field(default_factory=lambda: [0, 1, 2])

    def validate(self) -> "ExperimentConfig":
        for name, enum in (("dataset", DatasetId), ("model", ModelKind),
                           ("strategy", Strategy), ("policy", PartitionPolicy)):
            value = getattr(self, name)
            try:
                enum(value)
            except ValueError:
                choices = ", ".join(e.value for e in enum)
                raise ConfigError(f"config key '{name}': unknown value '{value}' (expected one of {choices})")
        if not 2 <= self.K <= 10:
            raise ConfigError(f"config key 'K' must be in [2, 10], got {self.K}")
        for k in self.k_range:
            if not 2 <= k <= 10:
                raise ConfigError(f"config key 'k_range' has {k}, outside [2, 10]")
        if self.M < 1 or self.D < 1 or self.batch < 1 or self.epochs < 1 or self.workers < 1:
            raise ConfigError("M, D, batch, epochs and workers must all be positive")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"config key 'dropout' must be in [0, 1), got {self.dropout}")
        if self.strategy == Strategy.DT_TREE_ENSEMBLE.value and len(self.partition_seeds) < 3:
            raise ConfigError("dt-tree-ensemble needs three partition_seeds")
        if self.policy == PartitionPolicy.RANDOM.value and not self.partition_seeds:
            raise ConfigError("random policy needs partition_seeds")
        return self

    def echo(self) -> Dict[str, Any]:
        """Result-relevant settings, the identity of an experiment"""
        return {k: v for k, v in asdict(self).items() if k not in RUNTIME_KEYS}

    @property
    def experiment_id(self) -> str:
        digest = hashlib.blake2b(json.dumps(self.echo(), sort_keys=True).encode("utf-8"),
                                 digest_size=5).hexdigest()
        return f"{self.dataset}-{self.model}-{self.strategy}-k{self.K}-{digest}"

    @property
    def run_dir(self) -> Path:
        return Path(self.out_dir) / self.experiment_id

    def train_config(self, seed: Optional[int] = None) -> TrainConfig:
        return TrainConfig(batch_size=self.batch, epochs=self.epochs,
                           seed=self.seed if seed is None else seed,
                           kind=ModelKind(self.model), M=self.M, D=self.D,
                           dropout_rate=self.dropout, relaxed_l1=self.relaxed_l1,
                           learning_rate=self.lr, momentum=self.momentum, weight_decay=self.decay)


def apply_overrides(values: Dict[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
    """Apply `key=value` strings on top of a config dict"""
    values = dict(values)
    for item in overrides:
        key, sep, value = item.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"override '{item}' is not key=value")
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"unknown config key '{key}'")
        values[key] = _coerce(key, value.strip())
    return values


def load_experiment_config(path: Optional[Union[str, Path]] = None,
                           overrides: Iterable[str] = ()) -> ExperimentConfig:
    """Defaults, then the JSON file (when given), then overrides; validated.

    Args:
        path: flat JSON object of CONFIG_SCHEMA keys, or None for defaults
        overrides: `key=value` strings applied after the file

    Returns:
        ExperimentConfig
    """
    values = {key: list(default) if isinstance(default, list) else default
              for key, (_, default) in CONFIG_SCHEMA.items()}
    if path is not None:
        path = Path(path)
        try:
            with open(path, "r") as f:
                loaded = json.load(f)
            logger.info(f"Loaded configuration from {path}")
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON in {path}: {e}")
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        for key, value in loaded.items():
            if key not in CONFIG_SCHEMA:
                raise ConfigError(f"unknown config key '{key}' in {path}")
            values[key] = _coerce(key, value)
    values = apply_overrides(values, overrides)
    return ExperimentConfig(**values).validate()


# ========================================
# METRICS AND RESULTS
# ========================================

def per_class_recall(predictions, labels, K: int) -> np.ndarray:
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape:
        raise UsageError(f"{predictions.shape[0]} predictions for {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise UsageError(f"labels outside 0..{K - 1}")
    counts = np.bincount(labels, minlength=K)
    absent = [k for k in range(K) if counts[k] == 0]
    if absent:
        raise UsageError(f"classes {absent} have no samples; macro accuracy is undefined")
    correct = np.bincount(labels[predictions == labels], minlength=K)
    return correct / counts


def macro_accuracy(predictions, labels, K: int) -> float:
    """Per-class recall averaged uniformly over the K classes, in percent"""
    return float(np.mean(per_class_recall(predictions, labels, K)) * 100.0)


def random_guess(K: int) -> float:
    return round(100.0 / K, 1)


@dataclass
class ExperimentResult:
    experiment_id: str
    config: Dict[str, Any]
    per_class_recall: List[float]
    macro_accuracy: float
    ledger: CostLedger
    mean_observed_evals: float
    wall_seconds: float
    histories: Dict[str, Any] = field(default_factory=dict)

    def row(self) -> Dict[str, Any]:
        return {
            "dataset": self.config["dataset"],
            "model_kind": self.config["model"],
            "strategy": self.config["strategy"],
            "K": self.config["K"],
            "M": self.config["M"],
            "batch": self.config["batch"],
            "seed": self.config["seed"],
            "macro_accuracy_pct": round(self.macro_accuracy, 4),
            "models_total": self.ledger.models_total,
            "worst_case_evals": self.ledger.worst_case_evals,
            "mean_observed_evals": round(self.mean_observed_evals, 4),
            "wall_s": round(self.wall_seconds, 3),
        }

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["ledger"] = self.ledger.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentResult":
        data = dict(data)
        data["ledger"] = CostLedger(**data["ledger"])
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})


def _write_json(path: Path, payload: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
    tmp.replace(path)


def load_result(config: ExperimentConfig) -> Optional[ExperimentResult]:
    path = config.run_dir / RESULT_NAME
    if not path.exists():
        return None
    with open(path, "r") as f:
        return ExperimentResult.from_dict(json.load(f))


# ========================================
# TRAINING
# ========================================

def load_data(config: ExperimentConfig) -> Tuple[FeatureDataset, FeatureDataset]:
    train, test = prepare_features(config.dataset, config.data_dir, config.K,
                                   cache_dir=config.cache_dir or None,
                                   train_limit=config.train_limit or None,
                                   test_limit=config.test_limit or None,
                                   seed=config.seed)
    logger.info(f"{config.dataset} K={config.K}: train {len(train)} x {train.n_features} "
                f"{class_counts(train.labels, config.K)}, test {len(test)}")
    return train, test


def _model_file(slot: ModelSlot) -> str:
    suffix = f"-r{slot.replicate}" if slot.replicate else ""
    return f"models/{slot.task.id}{suffix}.model"


def _replicate_seed(seed: int, replicate: int) -> int:
    return seed if replicate == 0 else derive_seed(seed, "replicate", replicate)


def _train_slot(config: ExperimentConfig, slot: ModelSlot, train: FeatureDataset,
                test: FeatureDataset, stop_event: threading.Event) -> Optional[Tuple[str, Dict[str, Any]]]:
    if stop_event.is_set():
        logger.info(f"Stop requested, skipping {slot.key}")
        return None
    try:
        train_bin = relabel_for_task(train, slot.task)
        val_bin = relabel_for_task(test, slot.task)
        train_config = config.train_config(_replicate_seed(config.seed, slot.replicate))
        if train_config.batch_size > len(train_bin):
            logger.warning(f"{slot.task.id}: batch {train_config.batch_size} exceeds "
                           f"{len(train_bin)} samples, clamping")
            train_config = replace(train_config, batch_size=len(train_bin))
        model, history = train_binary(train_bin, val_bin, slot.task, train_config)
        relative = _model_file(slot)
        save_model(model, config.run_dir / relative)
        return relative, history.to_dict()
    except Interrupted:
        raise
    except Exception as e:
        logger.error(f"Training {slot.key} failed: {e}")
        raise TaskFailure(slot.key, e)


def train_experiment(config: ExperimentConfig, data: Optional[Tuple[FeatureDataset, FeatureDataset]] = None,
                     force: bool = False,
                     stop_event: Optional[threading.Event] = None) -> Tuple[EnsembleManifest, Dict[str, Any]]:
    """Train every binary model the strategy needs and write the manifest.

    A complete manifest from an earlier run is reused unless `force`. When
    `stop_event` is set mid-run, in-flight tasks finish, the remaining ones
    are skipped, the manifest is written with status=incomplete and
    Interrupted is raised.
    """
    stop_event = stop_event or threading.Event()
    manifest_path = config.run_dir / MANIFEST_NAME
    histories_path = config.run_dir / HISTORIES_NAME
    if not force and manifest_path.exists():
        manifest = EnsembleManifest.load(manifest_path)
        if manifest.complete and not manifest.missing_keys():
            logger.info(f"Reusing trained models in {config.run_dir}")
            histories = json.loads(histories_path.read_text()) if histories_path.exists() else {}
            return manifest, histories

    train, test = data or load_data(config)
    slots = plan_models(config.strategy, config.K, config.policy, config.partition_seeds)
    unique: Dict[Tuple[str, int], ModelSlot] = {}
    for slot in slots:
        unique.setdefault((slot.task.id, slot.replicate), slot)
    logger.info(f"Training {len(unique)} binary models for {config.experiment_id} "
                f"with {config.workers} worker(s)")

    outcomes = Parallel(n_jobs=config.workers, prefer="threads")(
        delayed(_train_slot)(config, slot, train, test, stop_event) for slot in unique.values())

    files: Dict[Tuple[str, int], str] = {}
    histories: Dict[str, Any] = {}
    for identity, outcome in zip(unique, outcomes):
        if outcome is not None:
            files[identity] = outcome[0]
            histories[unique[identity].key] = outcome[1]
    entries = {slot.key: files[(slot.task.id, slot.replicate)]
               for slot in slots if (slot.task.id, slot.replicate) in files}
    complete = len(files) == len(unique)
    manifest = EnsembleManifest(Strategy(config.strategy), config.K, PartitionPolicy(config.policy),
                                list(config.partition_seeds), entries, complete)
    manifest.save(manifest_path)
    _write_json(histories_path, histories)
    if not complete:
        logger.warning(f"Run interrupted: {len(files)}/{len(unique)} models trained, "
                       f"manifest marked incomplete")
        raise Interrupted(f"interrupted after {len(files)} of {len(unique)} models; "
                          f"partial manifest at {manifest_path}")
    return manifest, histories


# ========================================
# EVALUATION
# ========================================

def evaluate_experiment(config: ExperimentConfig, test: FeatureDataset,
                        histories: Optional[Dict[str, Any]] = None,
                        started: Optional[float] = None) -> ExperimentResult:
    """Evaluate the manifest's predictor on the test split and write the result sidecar"""
    started = time.perf_counter() if started is None else started
    manifest_path = config.run_dir / MANIFEST_NAME
    manifest = EnsembleManifest.load(manifest_path)
    predictor = assemble_predictor(manifest, config.run_dir, config.workers)
    predictions, evals = predictor.predict_many(test.features)
    recalls = per_class_recall(predictions, test.labels, config.K)
    ledger = replace(predictor.worst_case, observed_evals=int(evals.max()))
    if ledger.observed_evals > ledger.worst_case_evals:
        logger.error(f"Observed {ledger.observed_evals} evaluations above bound {ledger.worst_case_evals}")
    if histories is None:
        histories_path = config.run_dir / HISTORIES_NAME
        histories = json.loads(histories_path.read_text()) if histories_path.exists() else {}

    result = ExperimentResult(
        experiment_id=config.experiment_id,
        config=config.echo(),
        per_class_recall=[float(r) for r in recalls],
        macro_accuracy=float(np.mean(recalls) * 100.0),
        ledger=ledger,
        mean_observed_evals=float(np.mean(evals)),
        wall_seconds=time.perf_counter() - started,
        histories=histories,
    )
    _write_json(config.run_dir / RESULT_NAME, result.to_dict())
    logger.info(f"{config.experiment_id}: macro accuracy {result.macro_accuracy:.2f}% "
                f"({ledger.models_total} models, <= {ledger.worst_case_evals} evals)")
    return result


def run_experiment(config: ExperimentConfig, force: bool = False,
                   stop_event: Optional[threading.Event] = None, train: bool = True) -> ExperimentResult:
    """Train (or reuse) the binary models and evaluate the strategy on the test split.

    Args:
        config: validated ExperimentConfig
        force: ignore existing result records and trained models
        stop_event: set from a signal handler to stop between tasks
        train: when False a missing manifest is a ConfigError instead of a training run

    Returns:
        ExperimentResult
    """
    if not force:
        existing = load_result(config)
        if existing is not None:
            logger.warning(f"Result for {config.experiment_id} exists, skipping (use force to rerun)")
            return existing
    started = time.perf_counter()
    manifest_path = config.run_dir / MANIFEST_NAME
    if not train and not manifest_path.exists():
        raise ConfigError(f"missing manifest: {manifest_path}")

    train_ds, test_ds = load_data(config)
    histories = None
    if train:
        _, histories = train_experiment(config, (train_ds, test_ds), force, stop_event)
    return evaluate_experiment(config, test_ds, histories, started)


def run_k_sweep(template: ExperimentConfig, k_range: Optional[Sequence[int]] = None,
                force: bool = False, stop_event: Optional[threading.Event] = None) -> List[ExperimentResult]:
    """Same architecture, varying K; one experiment per K"""
    k_range = list(k_range or template.k_range)
    for k in k_range:
        if not 2 <= k <= 10:
            raise ConfigError(f"K range value {k} outside [2, 10]")
    results = []
    for k in k_range:
        config = replace(template, K=k).validate()
        results.append(run_experiment(config, force, stop_event))
    return results


def run_seed_repeats(config: ExperimentConfig, seeds: Optional[Sequence[int]] = None,
                     force: bool = False,
                     stop_event: Optional[threading.Event] = None) -> Tuple[List[ExperimentResult], Dict[str, Any]]:
    """Run one experiment per seed; returns the results and a mean row labelled seed='mean'"""
    seeds = list(seeds if seeds is not None else config.repeat_seeds)
    if not seeds:
        raise ConfigError("no seeds to repeat over")
    results = [run_experiment(replace(config, seed=s), force, stop_event) for s in seeds]
    frame = pd.DataFrame([r.row() for r in results])
    mean_row = results[0].row()
    for column in ("macro_accuracy_pct", "mean_observed_evals", "wall_s"):
        mean_row[column] = round(float(frame[column].mean()), 4)
    mean_row["seed"] = "mean"
    return results, mean_row


# ========================================
# TABLES
# ========================================

def results_frame(results: Iterable[Union[ExperimentResult, Dict[str, Any]]]) -> pd.DataFrame:
    rows = [r.row() if isinstance(r, ExperimentResult) else r for r in results]
    return pd.DataFrame(rows, columns=RESULT_COLUMNS)


def append_results_csv(path: Union[str, Path], results: Iterable[ExperimentResult]) -> pd.DataFrame:
    """Append result rows to the CSV, replacing rows of the same experiment"""
    path = Path(path)
    results = list(results)
    frame = results_frame(results)
    frame["experiment_id"] = [r.experiment_id for r in results]
    if path.exists():
        previous = pd.read_csv(path)
        previous = previous[~previous["experiment_id"].isin(frame["experiment_id"])]
        frame = pd.concat([previous, frame], ignore_index=True)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
    logger.info(f"Wrote {len(frame)} rows to {path}")
    return frame


def render_comparison_table(results: Iterable[ExperimentResult]) -> pd.DataFrame:
    """Macro accuracy per dataset (rows) and model kind x strategy (columns)"""
    frame = results_frame(results)
    return frame.pivot_table(index="dataset", columns=["model_kind", "strategy"],
                             values="macro_accuracy_pct", aggfunc="mean").round(1)


def render_sweep_table(results: Iterable[ExperimentResult]) -> pd.DataFrame:
    """Accuracy versus K: one row per model kind plus the random-guess row"""
    frame = results_frame(results)
    table = frame.pivot_table(index="model_kind", columns="K",
                              values="macro_accuracy_pct", aggfunc="mean").round(1)
    table.loc["random"] = [random_guess(int(k)) for k in table.columns]
    return table


# Example usage
if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO)
    print(pd.Series({k: random_guess(k) for k in range(2, 11)}, name="random"))
