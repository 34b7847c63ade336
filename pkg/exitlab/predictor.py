"""
Exit quality predictor: a dense LeakyReLU network regressing one quality score
per branch exit from a flattened input, trained with mini-batch SGD under a
cosine-annealed learning rate.

Forward and backward passes are written out by hand on numpy arrays.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Literal, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator
from sklearn.preprocessing import StandardScaler

from exitlab.binio import FrameReader, FrameWriter
from exitlab.datasets import ScoreDataset
from exitlab.errors import ArgumentError, DivergenceError, FormatError, ShapeError

logger = logging.getLogger(__name__)

MLP_MAGIC = b"FNCMLP1"
DEFAULT_SLOPE = 0.2
REL_ERROR_FLOOR = 1e-6
LossMode = Literal["mse", "mae"]
_ACTIVATION_TAGS = {"identity": 0, "leaky_relu": 1}


class LayerSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    in_dim: int = Field(..., ge=1)
    out_dim: int = Field(..., ge=1)
    activation: Literal["leaky_relu", "identity"] = "leaky_relu"
    slope: float = Field(DEFAULT_SLOPE, ge=0.0, description="LeakyReLU negative slope")


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    loss: LossMode = "mse"
    learning_rate: float = Field(0.01, gt=0.0)
    epochs: int = Field(50, ge=1)
    batch_size: int = Field(32, ge=1)
    min_lr: float = Field(0.0, ge=0.0, description="Cosine schedule floor")
    standardize_targets: bool = Field(
        True, description="Fit per-exit standardized scores, then fold the scaling into the output layer"
    )
    seed: int = 0

    @model_validator(mode="after")
    def _check_floor(self) -> "TrainConfig":
        if self.min_lr > self.learning_rate:
            raise ValueError("min_lr must not exceed learning_rate")
        return self


class ScorePredictor(Protocol):
    """Anything that maps a batch of inputs to a batch of per-exit scores."""

    def predict(self, inputs: np.ndarray) -> np.ndarray: ...


def predictor_preset(
    input_dim: int = 1584,
    n_exits: int = 3,
    hidden: Sequence[int] = (512, 256, 128, 64),
    slope: float = DEFAULT_SLOPE,
) -> List[LayerSpec]:
    """Dense stack ``input -> hidden... -> n_exits``; the last layer is linear."""
    dims = [input_dim, *hidden, n_exits]
    return [
        LayerSpec(
            in_dim=dims[i],
            out_dim=dims[i + 1],
            activation="identity" if i == len(dims) - 2 else "leaky_relu",
            slope=slope,
        )
        for i in range(len(dims) - 1)
    ]


def loss(pred: np.ndarray, target: np.ndarray, mode: LossMode = "mse") -> float:
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    diff = pred - target
    if mode == "mse":
        return float(np.mean(diff**2))
    if mode == "mae":
        return float(np.mean(np.abs(diff)))
    raise ArgumentError(f"unknown loss mode {mode!r}")


def _loss_gradient(pred: np.ndarray, target: np.ndarray, mode: LossMode) -> np.ndarray:
    diff = pred - target
    if mode == "mse":
        return 2.0 * diff / diff.size
    return np.sign(diff) / diff.size


def cosine_lr(step: int, horizon: int, base_lr: float, min_lr: float = 0.0) -> float:
    """``min_lr + (base_lr - min_lr) * (1 + cos(pi * step / horizon)) / 2``."""
    if horizon <= 0:
        raise ArgumentError("cosine horizon must be positive")
    return min_lr + (base_lr - min_lr) * (1.0 + math.cos(math.pi * step / horizon)) / 2.0


class CosineSchedule:
    def __init__(self, base_lr: float, horizon: int, min_lr: float = 0.0):
        self.base_lr = base_lr
        self.horizon = horizon
        self.min_lr = min_lr

    def get_lr(self, step: int) -> float:
        return cosine_lr(step, self.horizon, self.base_lr, self.min_lr)


@dataclass(eq=False)
class Gradients:
    weights: List[np.ndarray]
    biases: List[np.ndarray]


class Mlp:
    """Dense network with per-layer weights of shape (in_dim, out_dim)."""

    def __init__(
        self,
        layers: Sequence[LayerSpec],
        weights: Sequence[np.ndarray],
        biases: Sequence[np.ndarray],
        rng_seed: int = 0,
    ):
        layers = list(layers)
        if not layers:
            raise ShapeError("a predictor needs at least one layer")
        for before, after in zip(layers, layers[1:]):
            if before.out_dim != after.in_dim:
                raise ShapeError(f"layer dims do not chain: {before.out_dim} -> {after.in_dim}")
        if layers[-1].activation != "identity":
            raise ShapeError("the output layer must be linear")
        if len(weights) != len(layers) or len(biases) != len(layers):
            raise ShapeError("one weight matrix and one bias vector per layer")
        self.layers = layers
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64).reshape(-1) for b in biases]
        for spec, w, b in zip(self.layers, self.weights, self.biases):
            if w.shape != (spec.in_dim, spec.out_dim) or b.shape != (spec.out_dim,):
                raise ShapeError(f"parameters {w.shape}/{b.shape} do not match {spec}")
        self.rng_seed = rng_seed

    @classmethod
    def initialise(cls, layers: Sequence[LayerSpec], seed: int = 0) -> "Mlp":
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for spec in layers:
            limit = math.sqrt(6.0 / (spec.in_dim + spec.out_dim))
            weights.append(rng.uniform(-limit, limit, size=(spec.in_dim, spec.out_dim)))
            biases.append(np.zeros(spec.out_dim))
        return cls(layers, weights, biases, rng_seed=seed)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def copy(self) -> "Mlp":
        return Mlp(self.layers, self.weights, self.biases, self.rng_seed)

    def parameters_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in (*self.weights, *self.biases))

    def _as_batch(self, x: np.ndarray) -> np.ndarray:
        batch = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if batch.ndim != 2 or batch.shape[1] != self.input_dim:
            raise ShapeError(f"expected inputs of dimension {self.input_dim}, got {np.shape(x)}")
        return batch

    def _trace(self, batch: np.ndarray) -> Tuple[List[np.ndarray], List[np.ndarray]]:
        outputs, preacts = [batch], []
        for spec, w, b in zip(self.layers, self.weights, self.biases):
            z = outputs[-1] @ w + b
            preacts.append(z)
            outputs.append(np.where(z > 0, z, spec.slope * z) if spec.activation == "leaky_relu" else z)
        return outputs, preacts

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Scores for one input (1-D) or a batch (2-D)."""
        out = self._trace(self._as_batch(x))[0][-1]
        return out[0] if np.ndim(x) == 1 else out

    def predict(self, inputs: np.ndarray) -> np.ndarray:
        return self._trace(self._as_batch(inputs))[0][-1]

    def loss_and_gradients(
        self, x: np.ndarray, target: np.ndarray, mode: LossMode = "mse"
    ) -> Tuple[float, Gradients]:
        batch = self._as_batch(x)
        target = np.atleast_2d(np.asarray(target, dtype=np.float64))
        if target.shape != (len(batch), self.output_dim):
            raise ShapeError(f"target {target.shape} for output {(len(batch), self.output_dim)}")
        outputs, preacts = self._trace(batch)
        value = loss(outputs[-1], target, mode)
        upstream = _loss_gradient(outputs[-1], target, mode)
        grad_w: List[np.ndarray] = [np.empty(0)] * len(self.layers)
        grad_b: List[np.ndarray] = [np.empty(0)] * len(self.layers)
        for i in reversed(range(len(self.layers))):
            spec = self.layers[i]
            if spec.activation == "leaky_relu":
                upstream = upstream * np.where(preacts[i] > 0, 1.0, spec.slope)
            grad_w[i] = outputs[i].T @ upstream
            grad_b[i] = upstream.sum(axis=0)
            upstream = upstream @ self.weights[i].T
        return value, Gradients(weights=grad_w, biases=grad_b)

    def backward(self, x: np.ndarray, target: np.ndarray, mode: LossMode = "mse") -> Gradients:
        """Analytic gradient of the mean loss w.r.t. every weight and bias."""
        return self.loss_and_gradients(x, target, mode)[1]

    def apply(self, grads: Gradients, lr: float) -> None:
        for i in range(len(self.layers)):
            self.weights[i] -= lr * grads.weights[i]
            self.biases[i] -= lr * grads.biases[i]

    def save(self) -> bytes:
        writer = FrameWriter(MLP_MAGIC)
        writer.pack("Iq", len(self.layers), self.rng_seed)
        for spec in self.layers:
            writer.pack("IIBd", spec.in_dim, spec.out_dim, _ACTIVATION_TAGS[spec.activation], spec.slope)
        for w, b in zip(self.weights, self.biases):
            writer.floats(w)
            writer.floats(b)
        return writer.seal()

    @classmethod
    def load(cls, blob: bytes) -> "Mlp":
        reader = FrameReader(MLP_MAGIC, blob)
        count, seed = reader.unpack("Iq", "header")
        tags = {v: k for k, v in _ACTIVATION_TAGS.items()}
        layers = []
        for _ in range(count):
            in_dim, out_dim, tag, slope = reader.unpack("IIBd", "layer spec")
            if tag not in tags or in_dim < 1 or out_dim < 1:
                raise FormatError(f"invalid layer spec ({in_dim}, {out_dim}, tag {tag})", reader.offset)
            layers.append(LayerSpec(in_dim=in_dim, out_dim=out_dim, activation=tags[tag], slope=slope))
        weights, biases = [], []
        for spec in layers:
            weights.append(reader.floats(spec.in_dim * spec.out_dim, "weights").reshape(spec.in_dim, spec.out_dim))
            biases.append(reader.floats(spec.out_dim, "biases"))
        reader.finish()
        try:
            return cls(layers, weights, biases, rng_seed=seed)
        except ShapeError as exc:
            raise FormatError(str(exc), reader.offset) from None

    def save_file(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.write_bytes(self.save())
        return path

    @classmethod
    def load_file(cls, path: Union[str, Path]) -> "Mlp":
        return cls.load(Path(path).read_bytes())


@dataclass(eq=False)
class TrainResult:
    model: Mlp
    history: List[float] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"epoch": range(len(self.history)), "loss": self.history})


def train(model: Mlp, dataset: ScoreDataset, cfg: TrainConfig) -> TrainResult:
    """Mini-batch SGD on a copy of ``model``; the input model is left untouched.

    Epoch ``t`` of ``T`` uses ``cosine_lr(t, T, learning_rate, min_lr)`` and a
    fresh permutation drawn from ``cfg.seed``.

    With ``standardize_targets`` the output layer is fitted to per-exit
    standardized scores and rescaled into score units before returning, so the
    result predicts raw scores while ``history`` holds standardized losses.
    """
    if not len(dataset):
        raise ArgumentError("cannot train on an empty dataset")
    if dataset.input_dim != model.input_dim or dataset.n_exits != model.output_dim:
        raise ShapeError(
            f"dataset ({dataset.input_dim} -> {dataset.n_exits}) does not fit "
            f"model ({model.input_dim} -> {model.output_dim})"
        )
    if cfg.standardize_targets:
        scaler = StandardScaler().fit(dataset.scores)
        center, scale = scaler.mean_, scaler.scale_
    else:
        center, scale = np.zeros(dataset.n_exits), np.ones(dataset.n_exits)
    targets = (dataset.scores - center) / scale
    trained = model.copy()
    rng = np.random.default_rng(cfg.seed)
    schedule = CosineSchedule(cfg.learning_rate, cfg.epochs, cfg.min_lr)
    history: List[float] = []
    n = len(dataset)

    for epoch in range(cfg.epochs):
        lr = schedule.get_lr(epoch)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            rows = order[start : start + cfg.batch_size]
            value, grads = trained.loss_and_gradients(
                dataset.inputs[rows], targets[rows], cfg.loss
            )
            trained.apply(grads, lr)
            total += value * len(rows)
        epoch_loss = total / n
        if not math.isfinite(epoch_loss) or not trained.parameters_finite():
            raise DivergenceError(epoch, epoch_loss)
        history.append(epoch_loss)
        logger.debug("epoch %d lr=%.5f loss=%.6g", epoch, lr, epoch_loss)

    trained.weights[-1] = trained.weights[-1] * scale
    trained.biases[-1] = trained.biases[-1] * scale + center
    if cfg.standardize_targets:
        logger.debug("output rescaled: centers %s scales %s", np.round(center, 6), np.round(scale, 6))
    logger.info("trained %d epochs, final %s loss %.6g", cfg.epochs, cfg.loss, history[-1])
    return TrainResult(model=trained, history=history)


@dataclass(frozen=True, eq=False)
class EvalReport:
    per_exit: np.ndarray
    overall: float

    def to_frame(self) -> pd.DataFrame:
        exits = [str(e) for e in range(1, len(self.per_exit) + 1)] + ["mean"]
        return pd.DataFrame(
            {"exit_id": exits, "mean_relative_error": [*self.per_exit.tolist(), self.overall]}
        )


def evaluate(model: ScorePredictor, dataset: ScoreDataset, floor: Optional[float] = None) -> EvalReport:
    """Per-exit mean of ``|pred - true| / max(true, floor)`` and their mean."""
    if not len(dataset):
        raise ArgumentError("cannot evaluate on an empty dataset")
    floor = REL_ERROR_FLOOR if floor is None else floor
    pred = np.asarray(model.predict(dataset.inputs), dtype=np.float64)
    if pred.shape != dataset.scores.shape:
        raise ShapeError(f"predictions {pred.shape} vs scores {dataset.scores.shape}")
    relative = np.abs(pred - dataset.scores) / np.maximum(dataset.scores, floor)
    per_exit = relative.mean(axis=0)
    return EvalReport(per_exit=per_exit, overall=float(per_exit.mean()))
