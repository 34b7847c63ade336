"""
Score datasets: predictor inputs paired with per-exit quality scores and one
attribute value per row (e.g. a head rotation angle).

File layout (``FNCDS1``): u64 rows, u32 input dim, u32 exit count, then every
row as f32 ``input | scores | attribute``, CRC32 trailer.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from exitlab.binio import F32, FrameReader, FrameWriter
from exitlab.errors import FormatError, ShapeError

DS_MAGIC = b"FNCDS1"


@dataclass(frozen=True, eq=False)
class ScoreDataset:
    inputs: np.ndarray
    scores: np.ndarray
    attributes: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        scores = np.atleast_2d(np.asarray(self.scores, dtype=np.float64))
        if len(inputs) != len(scores):
            raise ShapeError(f"{len(inputs)} inputs but {len(scores)} score rows")
        if self.attributes is None:
            attributes = np.zeros(len(inputs))
        else:
            attributes = np.asarray(self.attributes, dtype=np.float64).reshape(-1)
        if len(attributes) != len(inputs):
            raise ShapeError(f"{len(attributes)} attributes for {len(inputs)} rows")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "attributes", attributes)

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def n_exits(self) -> int:
        return self.scores.shape[1]

    def subset(self, rows: np.ndarray) -> "ScoreDataset":
        return ScoreDataset(self.inputs[rows], self.scores[rows], self.attributes[rows])


def save(dataset: ScoreDataset) -> bytes:
    writer = FrameWriter(DS_MAGIC)
    writer.pack("QII", len(dataset), dataset.input_dim, dataset.n_exits)
    table = np.hstack([dataset.inputs, dataset.scores, dataset.attributes[:, None]])
    writer.floats(table)
    return writer.seal()


def load(blob: bytes) -> ScoreDataset:
    reader = FrameReader(DS_MAGIC, blob)
    rows, input_dim, n_exits = reader.unpack("QII", "header")
    if input_dim < 1 or n_exits < 1:
        raise FormatError("dataset dimensions must be positive", reader.offset)
    width = input_dim + n_exits + 1
    table = reader.floats(rows * width, "rows").astype(np.float64).reshape(rows, width)
    reader.finish()
    return ScoreDataset(
        inputs=table[:, :input_dim],
        scores=table[:, input_dim : input_dim + n_exits],
        attributes=table[:, -1],
    )


def to_f32_precision(values: np.ndarray) -> np.ndarray:
    """Round through float32 so the values survive a dataset file unchanged."""
    return np.asarray(values, dtype=F32).astype(np.float64)


def save_file(dataset: ScoreDataset, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_bytes(save(dataset))
    return path


def load_file(path: Union[str, Path]) -> ScoreDataset:
    return load(Path(path).read_bytes())
