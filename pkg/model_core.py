"""
Multibin Model Core - Binary Classifiers
Constrained shallow network and classical baseline

The constrained model is the network equivalent of a two-photon interference
classifier: square-modulus hidden units with unit-norm weight rows, a
non-negative mixture on the output, bias and sigmoid. The baseline is an
unconstrained dense stack with batch normalization, ReLU and dropout.
Everything here is plain numpy in double precision.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Any, ClassVar, Dict, FrozenSet, List, Optional, Sequence, Tuple, Union

import numpy as np

from data_pipeline import batches
from errors import ConfigError, NumericError, ParseError, ShapeError, UsageError

if TYPE_CHECKING:
    from data_pipeline import BinaryDataset
    from multiclass import BinaryTask

logger = logging.getLogger(__name__)

BCE_EPSILON = 1e-12
DEGENERATE_ROW_NORM = 1e-12
LOGIT_CLIP = 36.0  # keeps sigmoid strictly inside (0, 1) in float64
BN_MOMENTUM = 0.1
BN_VARIANCE_FLOOR = 1e-5
MODEL_HEADER = "MULTIBIN-MODEL v1"


class ModelKind(Enum):
    """Binary model families"""
    QUANTUM = "quantum"
    CLASSICAL = "classical"


class Mode(Enum):
    """Forward pass mode for the baseline"""
    TRAIN = "train"
    EVAL = "eval"


def derive_seed(seed: int, *tokens: Any) -> int:
    """Derive a 64-bit seed from a global seed and identifying tokens.

    Adding a new token stream never perturbs existing ones, so adding a
    binary task to an experiment leaves the other tasks' streams intact.
    """
    digest = hashlib.blake2b(digest_size=8)
    digest.update(str(int(seed)).encode())
    for token in tokens:
        digest.update(b"\x1f")
        digest.update(str(token).encode())
    return int.from_bytes(digest.digest(), "little")


def derive_rng(seed: int, *tokens: Any) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *tokens))


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.clip(z, -LOGIT_CLIP, LOGIT_CLIP)))


def _as_features(x, n_features: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2):
        raise ShapeError("input rank", 2, x.ndim)
    if x.shape[-1] != n_features:
        raise ShapeError("input features", n_features, x.shape[-1])
    return x


# ========================================
# MODEL TYPES
# ========================================

@dataclass
class QuantumShallowModel:
    """Constrained two-layer network: hidden rows (M x N), mixture weights (M), bias"""
    hidden_weights: np.ndarray
    output_weights: np.ndarray
    bias: float
    relaxed_l1: bool = False

    kind: ClassVar[ModelKind] = ModelKind.QUANTUM

    @property
    def M(self) -> int:
        return self.hidden_weights.shape[0]

    @property
    def N(self) -> int:
        return self.hidden_weights.shape[1]

    def parameters(self) -> Dict[str, np.ndarray]:
        return {
            "hidden_weights": self.hidden_weights,
            "output_weights": self.output_weights,
            "bias": np.array([self.bias], dtype=np.float64),
        }

    def with_parameters(self, params: Dict[str, np.ndarray]) -> "QuantumShallowModel":
        return replace(
            self,
            hidden_weights=np.array(params["hidden_weights"], dtype=np.float64),
            output_weights=np.array(params["output_weights"], dtype=np.float64),
            bias=float(np.asarray(params["bias"]).reshape(-1)[0]),
        )

    def invariant_violations(self, tol: float = 1e-6) -> List[str]:
        """List every broken constraint (empty when the model is feasible)"""
        problems = []
        norms = np.linalg.norm(self.hidden_weights, axis=1)
        bad_rows = np.flatnonzero(np.abs(norms - 1.0) > tol)
        if bad_rows.size:
            problems.append(f"hidden rows {bad_rows.tolist()} not unit norm")
        if np.any(self.output_weights < 0):
            problems.append("negative output weights")
        if not self.relaxed_l1 and abs(float(self.output_weights.sum()) - 1.0) > tol:
            problems.append(f"output weights sum to {self.output_weights.sum():.9f}, expected 1")
        return problems

    def score(self, X) -> np.ndarray:
        return np.atleast_1d(forward_quantum(self, X))


@dataclass
class DenseLayer:
    """Dense layer followed by batch normalization (running statistics kept here)"""
    weights: np.ndarray
    bias: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    scale: np.ndarray
    shift: np.ndarray

    @property
    def width(self) -> int:
        return self.weights.shape[0]


@dataclass
class MlpBaselineModel:
    """Unconstrained baseline: D x (dense, batch norm, ReLU, dropout) then sigmoid head"""
    layers: List[DenseLayer]
    head_weights: np.ndarray
    head_bias: float
    dropout_rate: float = 0.2

    kind: ClassVar[ModelKind] = ModelKind.CLASSICAL

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def N(self) -> int:
        return self.layers[0].weights.shape[1]

    @property
    def M(self) -> int:
        return self.layers[0].width

    def parameters(self) -> Dict[str, np.ndarray]:
        params = {}
        for i, layer in enumerate(self.layers):
            params[f"layers.{i}.weights"] = layer.weights
            params[f"layers.{i}.bias"] = layer.bias
            params[f"layers.{i}.scale"] = layer.scale
            params[f"layers.{i}.shift"] = layer.shift
        params["head_weights"] = self.head_weights
        params["head_bias"] = np.array([self.head_bias], dtype=np.float64)
        return params

    def with_parameters(self, params: Dict[str, np.ndarray]) -> "MlpBaselineModel":
        layers = [
            DenseLayer(
                weights=np.array(params[f"layers.{i}.weights"], dtype=np.float64),
                bias=np.array(params[f"layers.{i}.bias"], dtype=np.float64),
                running_mean=layer.running_mean.copy(),
                running_var=layer.running_var.copy(),
                scale=np.array(params[f"layers.{i}.scale"], dtype=np.float64),
                shift=np.array(params[f"layers.{i}.shift"], dtype=np.float64),
            )
            for i, layer in enumerate(self.layers)
        ]
        return replace(
            self,
            layers=layers,
            head_weights=np.array(params["head_weights"], dtype=np.float64),
            head_bias=float(np.asarray(params["head_bias"]).reshape(-1)[0]),
        )

    def invariant_violations(self, tol: float = 1e-6) -> List[str]:
        problems = []
        widths = {layer.width for layer in self.layers}
        if len(widths) != 1:
            problems.append(f"hidden layers have mixed widths {sorted(widths)}")
        for i, layer in enumerate(self.layers):
            if np.any(layer.running_var <= 0):
                problems.append(f"layer {i} has non-positive running variance")
        return problems

    def score(self, X) -> np.ndarray:
        return np.atleast_1d(forward_mlp(self, X, Mode.EVAL))


BinaryModel = Union[QuantumShallowModel, MlpBaselineModel]


@dataclass
class OptimizerState:
    """Momentum SGD state; velocity buffers mirror the parameter shapes"""
    learning_rate: float = 0.05
    momentum: float = 0.09
    weight_decay: float = 1e-4
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)
    no_decay: FrozenSet[str] = frozenset()

    @classmethod
    def for_params(cls, params: Dict[str, np.ndarray], learning_rate: float = 0.05,
                   momentum: float = 0.09, weight_decay: float = 1e-4) -> "OptimizerState":
        if learning_rate <= 0:
            raise UsageError(f"learning rate must be positive, got {learning_rate}")
        if not 0 <= momentum < 1:
            raise UsageError(f"momentum must be in [0, 1), got {momentum}")
        if weight_decay < 0:
            raise UsageError(f"weight decay must be non-negative, got {weight_decay}")
        # Biases and normalization shifts are not decayed
        no_decay = frozenset(name for name in params if name.endswith(("bias", "shift")))
        velocity = {name: np.zeros_like(value, dtype=np.float64) for name, value in params.items()}
        return cls(learning_rate, momentum, weight_decay, velocity, no_decay)


@dataclass
class TrainConfig:
    """Hyperparameters of one binary training run"""
    batch_size: int = 128
    epochs: int = 20
    seed: int = 0
    kind: ModelKind = ModelKind.QUANTUM
    M: int = 20
    D: int = 2
    dropout_rate: float = 0.2
    relaxed_l1: bool = True
    learning_rate: float = 0.05
    momentum: float = 0.09
    weight_decay: float = 1e-4

    def validate(self, n_train: int) -> None:
        if self.batch_size < 1:
            raise UsageError(f"batch_size must be positive, got {self.batch_size}")
        if self.batch_size > n_train:
            raise UsageError(f"batch_size {self.batch_size} exceeds training-set size {n_train}")
        if self.epochs < 1:
            raise UsageError(f"epochs must be positive, got {self.epochs}")
        if self.M < 1 or self.D < 1:
            raise UsageError(f"M and D must be positive, got M={self.M}, D={self.D}")
        if not 0 <= self.dropout_rate < 1:
            raise UsageError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")


# ========================================
# FORWARD PASSES AND LOSS
# ========================================

def forward_quantum(model: QuantumShallowModel, x):
    """Score one sample (or a row-stacked batch) with the constrained model.

    Args:
        model: QuantumShallowModel
        x: feature vector of length N, or (B, N) matrix

    Returns:
        sigma(sum_m p_m (w_m . x)^2 + b) as a float, or a length-B vector
    """
    x = _as_features(x, model.N)
    overlaps = x @ model.hidden_weights.T
    logits = (overlaps ** 2) @ model.output_weights + model.bias
    scores = _sigmoid(logits)
    return float(scores) if x.ndim == 1 else scores


def _batch_norm_forward(h: np.ndarray, layer: DenseLayer, mode: Mode, update_stats: bool):
    if mode is Mode.TRAIN:
        mean = h.mean(axis=0)
        var = h.var(axis=0)
        floored = var < BN_VARIANCE_FLOOR
        var_f = np.maximum(var, BN_VARIANCE_FLOOR)
        if update_stats:
            layer.running_mean = (1 - BN_MOMENTUM) * layer.running_mean + BN_MOMENTUM * mean
            layer.running_var = (1 - BN_MOMENTUM) * layer.running_var + BN_MOMENTUM * var_f
    else:
        mean = layer.running_mean
        var_f = np.maximum(layer.running_var, BN_VARIANCE_FLOOR)
        floored = np.zeros_like(var_f, dtype=bool)
    inv_std = 1.0 / np.sqrt(var_f)
    xhat = (h - mean) * inv_std
    return xhat, inv_std, floored


def _mlp_forward(model: MlpBaselineModel, X: np.ndarray, mode: Mode,
                 rng: Optional[np.random.Generator], update_stats: bool):
    if mode is Mode.TRAIN and model.dropout_rate > 0 and rng is None:
        raise UsageError("train-mode forward with dropout needs an rng")
    activations = X
    cache = []
    for layer in model.layers:
        h = activations @ layer.weights.T + layer.bias
        xhat, inv_std, floored = _batch_norm_forward(h, layer, mode, update_stats)
        normed = layer.scale * xhat + layer.shift
        relu = np.maximum(normed, 0.0)
        if mode is Mode.TRAIN and model.dropout_rate > 0:
            keep = rng.random(relu.shape) >= model.dropout_rate
            mask = keep / (1.0 - model.dropout_rate)
        else:
            mask = np.ones_like(relu)
        cache.append((activations, xhat, inv_std, floored, normed, mask))
        activations = relu * mask
    logits = activations @ model.head_weights + model.head_bias
    return _sigmoid(logits), activations, cache


def forward_mlp(model: MlpBaselineModel, x, mode: Mode = Mode.EVAL,
                rng: Optional[np.random.Generator] = None):
    """Score with the baseline.

    Eval mode uses running statistics and no dropout and is deterministic.
    Train mode normalizes with batch statistics, draws dropout masks from
    rng and updates the model's running statistics in place.
    """
    x = _as_features(x, model.N)
    X = np.atleast_2d(x)
    scores, _, _ = _mlp_forward(model, X, Mode(mode), rng, update_stats=Mode(mode) is Mode.TRAIN)
    return float(scores[0]) if x.ndim == 1 else scores


def score(model: BinaryModel, X) -> np.ndarray:
    """Batch scores in [0, 1] for either model family (baseline in eval mode)"""
    return model.score(X)


def bce_loss(score, label):
    """Binary cross-entropy with the score clamped to [eps, 1 - eps]"""
    s = np.clip(np.asarray(score, dtype=np.float64), BCE_EPSILON, 1.0 - BCE_EPSILON)
    y = np.asarray(label, dtype=np.float64)
    loss = -(y * np.log(s) + (1.0 - y) * np.log(1.0 - s))
    return float(loss) if loss.ndim == 0 else loss


def mean_bce(scores: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(bce_loss(scores, labels)))


# ========================================
# GRADIENTS
# ========================================

def as_batch(pairs: Sequence[Tuple[Any, int]]) -> Tuple[np.ndarray, np.ndarray]:
    """Stack a list of (x, label) pairs into (X, y)"""
    if not pairs:
        raise UsageError("empty batch")
    X = np.stack([np.asarray(x, dtype=np.float64) for x, _ in pairs])
    y = np.asarray([label for _, label in pairs], dtype=np.float64)
    return X, y


def _check_batch(X, y, n_features: int) -> Tuple[np.ndarray, np.ndarray]:
    X = np.atleast_2d(_as_features(X, n_features))
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if X.shape[0] == 0:
        raise UsageError("empty batch")
    if X.shape[0] != y.shape[0]:
        raise ShapeError("batch labels", X.shape[0], y.shape[0])
    return X, y


def gradient_quantum(model: QuantumShallowModel, X, y) -> Dict[str, np.ndarray]:
    """Exact gradient of the mean BCE over the batch.

    Taken with respect to the unconstrained parameters; constraints are
    restored afterwards by project_constraints.

    Args:
        model: QuantumShallowModel
        X: (B, N) batch
        y: (B,) labels in {0, 1}

    Returns:
        Dict keyed like model.parameters()
    """
    X, y = _check_batch(X, y, model.N)
    overlaps = X @ model.hidden_weights.T
    activations = overlaps ** 2
    scores = _sigmoid(activations @ model.output_weights + model.bias)
    dz = (scores - y) / X.shape[0]
    grad_hidden = ((dz[:, None] * 2.0 * overlaps) * model.output_weights[None, :]).T @ X
    return {
        "hidden_weights": grad_hidden,
        "output_weights": activations.T @ dz,
        "bias": np.array([dz.sum()]),
    }


def gradient_mlp(model: MlpBaselineModel, X, y,
                 rng: Optional[np.random.Generator] = None) -> Dict[str, np.ndarray]:
    """Backpropagation through the baseline in train mode.

    Updates the running statistics of `model` as a side effect of the
    train-mode forward pass.
    """
    X, y = _check_batch(X, y, model.N)
    scores, top, cache = _mlp_forward(model, X, Mode.TRAIN, rng, update_stats=True)
    batch = X.shape[0]
    dz = (scores - y) / batch

    grads = {
        "head_weights": top.T @ dz,
        "head_bias": np.array([dz.sum()]),
    }
    upstream = np.outer(dz, model.head_weights)
    for i in reversed(range(model.depth)):
        layer = model.layers[i]
        inputs, xhat, inv_std, floored, normed, mask = cache[i]
        d_normed = upstream * mask * (normed > 0)
        grads[f"layers.{i}.scale"] = (d_normed * xhat).sum(axis=0)
        grads[f"layers.{i}.shift"] = d_normed.sum(axis=0)
        d_xhat = d_normed * layer.scale
        full = inv_std / batch * (batch * d_xhat - d_xhat.sum(axis=0)
                                  - xhat * (d_xhat * xhat).sum(axis=0))
        # Floored variances are constants, only the mean depends on h
        centered = inv_std * (d_xhat - d_xhat.mean(axis=0))
        d_h = np.where(floored[None, :], centered, full)
        grads[f"layers.{i}.weights"] = d_h.T @ inputs
        grads[f"layers.{i}.bias"] = d_h.sum(axis=0)
        upstream = d_h @ layer.weights
    return grads


# ========================================
# OPTIMIZER AND CONSTRAINTS
# ========================================

def sgd_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
             state: OptimizerState) -> Tuple[Dict[str, np.ndarray], OptimizerState]:
    """One momentum SGD step with coupled weight decay.

    velocity <- momentum * velocity + grad + decay * param
    param    <- param - lr * velocity
    """
    new_params = {}
    new_velocity = {}
    for name, param in params.items():
        if name not in grads or name not in state.velocity:
            raise UsageError(f"no gradient or velocity for parameter {name}")
        grad = np.asarray(grads[name], dtype=np.float64)
        velocity = state.velocity[name]
        for other in (grad, velocity):
            if other.shape != param.shape:
                raise ShapeError(f"parameter {name} {param.shape} vs {other.shape}",
                                 int(np.size(param)), int(np.size(other)))
        decay = 0.0 if name in state.no_decay else state.weight_decay
        velocity = state.momentum * velocity + grad + decay * param
        new_velocity[name] = velocity
        new_params[name] = param - state.learning_rate * velocity
    return new_params, replace(state, velocity=new_velocity)


def project_constraints(model: QuantumShallowModel,
                        rng: Optional[np.random.Generator] = None) -> QuantumShallowModel:
    """Restore feasibility: unit hidden rows, non-negative mixture, L1-normalized unless relaxed.

    A hidden row whose norm falls below 1e-12 is redrawn from the init
    distribution; an all-zero mixture after clamping resets to uniform.
    """
    hidden = np.array(model.hidden_weights, dtype=np.float64)
    norms = np.linalg.norm(hidden, axis=1)
    for row in np.flatnonzero(norms < DEGENERATE_ROW_NORM):
        row_rng = rng if rng is not None else derive_rng(0, "degenerate-row", row, model.N)
        logger.warning(f"Hidden row {row} collapsed (norm {norms[row]:.3e}), re-randomizing")
        hidden[row] = row_rng.standard_normal(model.N)
        norms[row] = np.linalg.norm(hidden[row])
    hidden = hidden / norms[:, None]

    output = np.maximum(np.asarray(model.output_weights, dtype=np.float64), 0.0)
    if not np.any(output > 0):
        output = np.full(model.M, 1.0 / model.M)
    elif not model.relaxed_l1:
        output = output / output.sum()
    return replace(model, hidden_weights=hidden, output_weights=output)


def init_model(rng: np.random.Generator, M: int, N: int, kind: Union[ModelKind, str],
               depth: int = 2, dropout_rate: float = 0.2, relaxed_l1: bool = False) -> BinaryModel:
    """Draw a fresh model; deterministic for a fixed rng state"""
    if M < 1 or N < 1:
        raise UsageError(f"M and N must be at least 1, got M={M}, N={N}")
    kind = ModelKind(kind)
    if kind is ModelKind.QUANTUM:
        hidden = rng.standard_normal((M, N))
        hidden /= np.linalg.norm(hidden, axis=1, keepdims=True)
        return QuantumShallowModel(hidden, np.full(M, 1.0 / M), 0.0, relaxed_l1)

    if depth < 1:
        raise UsageError(f"depth must be at least 1, got {depth}")
    layers = []
    fan_in = N
    for _ in range(depth):
        layers.append(DenseLayer(
            weights=rng.standard_normal((M, fan_in)) * math.sqrt(2.0 / fan_in),
            bias=np.zeros(M),
            running_mean=np.zeros(M),
            running_var=np.ones(M),
            scale=np.ones(M),
            shift=np.zeros(M),
        ))
        fan_in = M
    head = rng.standard_normal(M) * math.sqrt(1.0 / M)
    return MlpBaselineModel(layers, head, 0.0, dropout_rate)


# ========================================
# TRAINING
# ========================================

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float


@dataclass
class TrainingHistory:
    """Per-epoch curves of one binary training run"""
    task_id: str
    epochs: List[EpochRecord] = field(default_factory=list)

    def losses(self) -> List[float]:
        return [record.train_loss for record in self.epochs]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "task_id": self.task_id,
            "epochs": [record.__dict__.copy() for record in self.epochs],
        }


def _evaluate(model: BinaryModel, X: np.ndarray, y: np.ndarray) -> Tuple[float, float]:
    if len(y) == 0:
        return float("nan"), float("nan")
    scores = model.score(X)
    return mean_bce(scores, y), float(np.mean((scores >= 0.5) == (y == 1)))


def train_binary(train: "BinaryDataset", val: "BinaryDataset", task: Optional["BinaryTask"],
                 config: TrainConfig) -> Tuple[BinaryModel, TrainingHistory]:
    """Train one binary model on an already relabelled dataset.

    Args:
        train: BinaryDataset with features, 0/1 labels and source labels
        val: BinaryDataset scored after every epoch
        task: the BinaryTask the data was relabelled for; when given, every
            class it names must have training samples
        config: TrainConfig (seed is the per-task seed)

    Returns:
        (trained model, TrainingHistory)
    """
    X = np.asarray(train.features, dtype=np.float64)
    y = np.asarray(train.labels, dtype=np.float64)
    task_id = task.id if task is not None else (getattr(train, "task_id", None) or "binary")
    if X.shape[0] == 0:
        raise UsageError(f"task {task_id}: empty training set")
    if task is not None and getattr(train, "source_labels", None) is not None:
        present = set(np.unique(train.source_labels).tolist())
        for cls in sorted(set(task.zero_classes) | set(task.one_classes)):
            if cls not in present:
                raise UsageError(f"task {task_id}: class {cls} has no training samples")
    config.validate(X.shape[0])

    # the same class partition gets the same streams under every strategy
    stream = task.partition_key if task is not None else task_id
    kind = ModelKind(config.kind)
    model = init_model(derive_rng(config.seed, stream, "init"), config.M, X.shape[1], kind,
                       depth=config.D, dropout_rate=config.dropout_rate,
                       relaxed_l1=config.relaxed_l1)
    state = OptimizerState.for_params(model.parameters(), config.learning_rate,
                                      config.momentum, config.weight_decay)
    shuffle_seed = derive_seed(config.seed, stream, "shuffle")
    dropout_rng = derive_rng(config.seed, stream, "dropout")
    projection_rng = derive_rng(config.seed, stream, "projection")
    val_X = np.asarray(val.features, dtype=np.float64)
    val_y = np.asarray(val.labels, dtype=np.float64)
    history = TrainingHistory(task_id)

    logger.info(f"Training {kind.value} model for {task_id}: {X.shape[0]} samples, "
                f"M={config.M}, batch={config.batch_size}, epochs={config.epochs}")
    for epoch in range(config.epochs):
        for index in batches(X.shape[0], config.batch_size, shuffle_seed, epoch):
            if kind is ModelKind.QUANTUM:
                grads = gradient_quantum(model, X[index], y[index])
            else:
                grads = gradient_mlp(model, X[index], y[index], dropout_rng)
            params, state = sgd_step(model.parameters(), grads, state)
            model = model.with_parameters(params)
            if kind is ModelKind.QUANTUM:
                model = project_constraints(model, projection_rng)

        train_loss, train_acc = _evaluate(model, X, y)
        val_loss, val_acc = _evaluate(model, val_X, val_y)
        if not math.isfinite(train_loss):
            logger.error(f"Non-finite loss for {task_id} at epoch {epoch}")
            raise NumericError(f"task {task_id}: loss became {train_loss} at epoch {epoch}")
        history.epochs.append(EpochRecord(epoch, train_loss, train_acc, val_loss, val_acc))
        logger.debug(f"{task_id} epoch {epoch}: loss={train_loss:.4f} acc={train_acc:.4f} "
                     f"val_acc={val_acc:.4f}")

    logger.info(f"Finished {task_id}: train_acc={history.epochs[-1].train_accuracy:.4f}")
    return model, history


# ========================================
# SERIALIZATION
# ========================================

def _model_arrays(model: BinaryModel) -> List[np.ndarray]:
    if isinstance(model, QuantumShallowModel):
        return [model.hidden_weights, model.output_weights, np.array([model.bias])]
    arrays = []
    for layer in model.layers:
        arrays += [layer.weights, layer.bias, layer.running_mean, layer.running_var,
                   layer.scale, layer.shift]
    return arrays + [model.head_weights, np.array([model.head_bias])]


def save_model(model: BinaryModel, path: Union[str, Path]) -> Path:
    """Write the MULTIBIN-MODEL v1 file: text header, then little-endian float64 payload"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(model, QuantumShallowModel):
        header = [MODEL_HEADER, "kind=quantum", f"dims={model.M} {model.N}",
                  f"relaxed_l1={int(model.relaxed_l1)}"]
    else:
        widths = " ".join(str(layer.width) for layer in model.layers)
        header = [MODEL_HEADER, "kind=classical", f"dims={model.N} {widths}",
                  f"dropout={model.dropout_rate!r}"]
    payload = np.concatenate([np.ravel(a) for a in _model_arrays(model)]).astype("<f8")
    with open(path, "wb") as f:
        f.write(("\n".join(header + ["data"]) + "\n").encode("ascii"))
        f.write(payload.tobytes())
    return path


def load_model(path: Union[str, Path]) -> BinaryModel:
    """Read and validate a model file written by save_model"""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"missing model file: {path}")
    raw = path.read_bytes()
    fields: Dict[str, str] = {}
    offset = 0
    lines = []
    while True:
        end = raw.find(b"\n", offset)
        if end < 0:
            raise ParseError("unterminated header", str(path), offset)
        line = raw[offset:end].decode("ascii", errors="replace")
        offset = end + 1
        if line == "data":
            break
        lines.append(line)
    if not lines or lines[0] != MODEL_HEADER:
        raise ParseError(f"bad header, expected '{MODEL_HEADER}'", str(path), 0)
    for line in lines[1:]:
        key, _, value = line.partition("=")
        fields[key] = value

    try:
        dims = [int(v) for v in fields["dims"].split()]
        kind = ModelKind(fields["kind"])
    except (KeyError, ValueError) as e:
        raise ParseError(f"bad header field: {e}", str(path), 0)

    if kind is ModelKind.QUANTUM:
        if len(dims) != 2:
            raise ParseError(f"quantum dims need M N, got {dims}", str(path), 0)
        M, N = dims
        shapes = [(M, N), (M,), (1,)]
    else:
        if len(dims) < 2:
            raise ParseError(f"classical dims need N and widths, got {dims}", str(path), 0)
        N, widths = dims[0], dims[1:]
        shapes = []
        fan_in = N
        for width in widths:
            shapes += [(width, fan_in)] + [(width,)] * 5
            fan_in = width
        shapes += [(fan_in,), (1,)]

    expected = sum(int(np.prod(s)) for s in shapes) * 8
    if len(raw) - offset != expected:
        raise ParseError(f"payload is {len(raw) - offset} bytes, expected {expected}",
                         str(path), offset)
    values = np.frombuffer(raw, dtype="<f8", offset=offset).astype(np.float64)
    arrays = []
    cursor = 0
    for shape in shapes:
        size = int(np.prod(shape))
        arrays.append(values[cursor:cursor + size].reshape(shape).copy())
        cursor += size

    if kind is ModelKind.QUANTUM:
        model: BinaryModel = QuantumShallowModel(arrays[0], arrays[1], float(arrays[2][0]),
                                                 fields.get("relaxed_l1", "0") == "1")
    else:
        layers = [DenseLayer(*arrays[6 * i:6 * i + 6]) for i in range(len(widths))]
        model = MlpBaselineModel(layers, arrays[-2], float(arrays[-1][0]),
                                 float(fields.get("dropout", "0.0")))
    problems = model.invariant_violations()
    if problems:
        raise ParseError(f"constraint check failed: {'; '.join(problems)}", str(path))
    return model


# Example usage
if __name__ == "__main__":
    demo = QuantumShallowModel(np.eye(2), np.array([0.25, 0.75]), -0.5)
    x = np.array([0.6, 0.8])
    print(f"forward_quantum = {forward_quantum(demo, x):.6f} (sigma(0.07) = {1 / (1 + math.exp(-0.07)):.6f})")
    print(f"bce(0.9, 0) = {bce_loss(0.9, 0):.4f}")
