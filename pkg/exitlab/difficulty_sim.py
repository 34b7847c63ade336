"""
Synthetic difficulty oracle standing in for a generator with early exits.

Each input has a difficulty ``d = softplus(w . x)``; exit ``e`` with capacity
``c_e`` reaches quality score ``link_scale * softplus(d - c_e) + |eps|``
(lower is better). The noise term is drawn from a stream keyed by the input's
content and the exit index, so scores are a pure function of (config, input)
and adding exits never perturbs the streams of earlier ones.
"""

import hashlib
import logging
import zlib
from dataclasses import dataclass
from typing import Dict, Optional, Protocol, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from exitlab.datasets import ScoreDataset, to_f32_precision
from exitlab.errors import ArgumentError, NotFoundError, ShapeError

logger = logging.getLogger(__name__)


def labeled_rng(seed: int, label: str) -> np.random.Generator:
    key = zlib.crc32(label.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(key,)))


def derive_seed(seed: int, label: str) -> int:
    """Sub-seed for ``label`` derived from a master seed."""
    key = zlib.crc32(label.encode("utf-8"))
    return int(np.random.SeedSequence(seed, spawn_key=(key,)).generate_state(1)[0])


def softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


class OracleConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    input_dim: int = Field(16, ge=1)
    condition_dim: Optional[int] = Field(
        None, ge=0, description="Leading coordinates that form the condition; the rest is noise"
    )
    exit_capacities: Tuple[float, ...] = Field((0.5, 1.0, 1.5, 2.0), min_length=1)
    difficulty_weights: Optional[Tuple[float, ...]] = None
    attribute_index: int = Field(0, ge=0, description="Coordinate recorded as the per-input attribute")
    attribute_weight: float = Field(1.5, description="Weight of the attribute in the default weights")
    noise_sd: float = Field(0.02, ge=0.0)
    link_scale: float = Field(1.0, gt=0.0)
    seed: int = 0

    @field_validator("exit_capacities")
    @classmethod
    def _ascending(cls, value: Tuple[float, ...]) -> Tuple[float, ...]:
        if any(c <= 0 for c in value):
            raise ValueError("exit capacities must be positive")
        if any(b <= a for a, b in zip(value, value[1:])):
            raise ValueError("exit capacities must be strictly ascending")
        return value

    @model_validator(mode="after")
    def _check_dims(self) -> "OracleConfig":
        if self.difficulty_weights is not None:
            if len(self.difficulty_weights) != self.input_dim:
                raise ValueError(
                    f"{len(self.difficulty_weights)} difficulty weights for input_dim {self.input_dim}"
                )
            if not np.all(np.isfinite(self.difficulty_weights)):
                raise ValueError("difficulty weights must be finite")
        if self.attribute_index >= self.input_dim:
            raise ValueError("attribute index outside the input")
        if self.condition_dim is not None and self.condition_dim > self.input_dim:
            raise ValueError("condition_dim exceeds input_dim")
        return self

    @property
    def n_exits(self) -> int:
        return len(self.exit_capacities)

    @property
    def condition_width(self) -> int:
        if self.condition_dim is not None:
            return self.condition_dim
        return (self.input_dim + 1) // 2

    def weights(self) -> np.ndarray:
        if self.difficulty_weights is not None:
            return np.asarray(self.difficulty_weights, dtype=np.float64)
        w = np.full(self.input_dim, 0.3)
        w[self.attribute_index] = self.attribute_weight
        return w


@dataclass(frozen=True, eq=False)
class SampledInputs:
    inputs: np.ndarray
    attributes: np.ndarray


@dataclass(frozen=True, eq=False)
class DatasetSplit:
    train: ScoreDataset
    val: ScoreDataset


class TruthSource(Protocol):
    def true_scores_batch(self, inputs: np.ndarray) -> np.ndarray: ...


class QualityOracle:
    def __init__(self, config: OracleConfig):
        self.config = config
        self._weights = config.weights()
        self._capacities = np.asarray(config.exit_capacities, dtype=np.float64)
        self._rng = labeled_rng(config.seed, "inputs")

    @property
    def n_exits(self) -> int:
        return self.config.n_exits

    def _check(self, x: np.ndarray) -> np.ndarray:
        batch = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if batch.shape[1] != self.config.input_dim:
            raise ShapeError(f"oracle expects inputs of dimension {self.config.input_dim}")
        return batch

    def difficulty(self, x: np.ndarray) -> np.ndarray:
        d = softplus(self._check(x) @ self._weights)
        return d[0] if np.ndim(x) == 1 else d

    def expected_scores_batch(self, inputs: np.ndarray) -> np.ndarray:
        """Scores without the noise term."""
        d = softplus(self._check(inputs) @ self._weights)
        return self.config.link_scale * softplus(d[:, None] - self._capacities[None, :])

    def _noise(self, row: np.ndarray) -> np.ndarray:
        if self.config.noise_sd == 0:
            return np.zeros(self.n_exits)
        digest = hashlib.blake2b(row.tobytes(), digest_size=8).digest()
        content = int.from_bytes(digest, "little")
        draws = []
        for exit_index in range(self.n_exits):
            stream = np.random.SeedSequence(self.config.seed, spawn_key=(content, exit_index))
            draws.append(np.random.default_rng(stream).normal(0.0, self.config.noise_sd))
        return np.abs(np.asarray(draws))

    def true_scores_batch(self, inputs: np.ndarray) -> np.ndarray:
        batch = self._check(inputs)
        noise = np.stack([self._noise(np.ascontiguousarray(row)) for row in batch])
        return self.expected_scores_batch(batch) + noise

    def true_scores(self, x: np.ndarray) -> np.ndarray:
        return self.true_scores_batch(np.asarray(x, dtype=np.float64).reshape(1, -1))[0]

    def sample_inputs(self, n: int) -> SampledInputs:
        """Draw ``n`` standard-normal inputs from the oracle's own stream."""
        if n < 1:
            raise ArgumentError("sample count must be positive")
        inputs = to_f32_precision(self._rng.standard_normal((n, self.config.input_dim)))
        return SampledInputs(inputs=inputs, attributes=inputs[:, self.config.attribute_index].copy())

    def _crossed(self, rng: np.random.Generator, n_conditions: int, n_noise: int) -> np.ndarray:
        if n_conditions < 1 or n_noise < 1:
            raise ArgumentError("condition and noise counts must be positive")
        width = self.config.condition_width
        conditions = rng.standard_normal((n_conditions, width))
        noises = rng.standard_normal((n_noise, self.config.input_dim - width))
        rows = [np.concatenate([c, z]) for c in conditions for z in noises]
        return to_f32_precision(np.asarray(rows).reshape(-1, self.config.input_dim))

    def _label(self, inputs: np.ndarray) -> ScoreDataset:
        return ScoreDataset(
            inputs=inputs,
            scores=to_f32_precision(self.true_scores_batch(inputs)),
            attributes=inputs[:, self.config.attribute_index],
        )

    def make_dataset(
        self, n_conditions: int, n_noise_vectors: int, val_fraction: float = 0.1
    ) -> DatasetSplit:
        """Every condition crossed with every fixed noise vector, split by a seeded shuffle."""
        if not 0 <= val_fraction < 1:
            raise ArgumentError("validation fraction must lie in [0, 1)")
        rng = labeled_rng(self.config.seed, "dataset")
        full = self._label(self._crossed(rng, n_conditions, n_noise_vectors))
        order = rng.permutation(len(full))
        n_val = int(len(full) * val_fraction)
        split = DatasetSplit(train=full.subset(order[n_val:]), val=full.subset(order[:n_val]))
        logger.info("dataset: %d train / %d val rows", len(split.train), len(split.val))
        return split

    def make_heldout_dataset(self, n_conditions: int, n_noise_vectors: int) -> ScoreDataset:
        """Fresh conditions crossed with noise vectors never used in training."""
        return self._label(self._crossed(labeled_rng(self.config.seed, "heldout"), n_conditions, n_noise_vectors))


class OraclePredictor:
    """Predictor that reads the oracle: exact truths, or their noiseless expectation."""

    def __init__(self, oracle: QualityOracle, noiseless: bool = False):
        self.oracle = oracle
        self.noiseless = noiseless

    def predict(self, inputs: np.ndarray) -> np.ndarray:
        if self.noiseless:
            return self.oracle.expected_scores_batch(inputs)
        return self.oracle.true_scores_batch(inputs)


class TabulatedOracle:
    """Truth source replaying the recorded scores of a dataset."""

    def __init__(self, dataset: ScoreDataset):
        self._table: Dict[bytes, np.ndarray] = {
            np.ascontiguousarray(row).tobytes(): scores
            for row, scores in zip(dataset.inputs, dataset.scores)
        }
        self.n_exits = dataset.n_exits

    def true_scores_batch(self, inputs: np.ndarray) -> np.ndarray:
        rows = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
        try:
            return np.stack([self._table[np.ascontiguousarray(row).tobytes()] for row in rows])
        except KeyError:
            raise NotFoundError("input has no recorded scores") from None
