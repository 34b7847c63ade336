"""
Guiding key-value database.

Feature maps are cut into non-overlapping patches; each patch (or a pose and
expression descriptor for head avatars) becomes a key paired with a guiding
value patch. Keys are deduplicated per semantic class with farthest-point
sampling and looked up with an exact nearest-neighbour scan.

Distances are squared Euclidean; ties always resolve to the lowest entry index.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from exitlab.binio import F32, FrameReader, FrameWriter
from exitlab.errors import ArgumentError, FormatError, NotFoundError, SchemaError, ShapeError

logger = logging.getLogger(__name__)

DB_MAGIC = b"FNCDB1"
POSE_ANGLES = 3
_MAX_LABEL = 0xFFFF


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """A channels x height x width block of features, stored row-major."""

    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ShapeError(f"feature map must be (channels, height, width), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ShapeError("feature map contains non-finite values")
        object.__setattr__(self, "data", data)

    @classmethod
    def from_flat(cls, channels: int, height: int, width: int, flat: Sequence[float]) -> "FeatureMap":
        values = np.asarray(flat)
        if values.size != channels * height * width:
            raise ShapeError(
                f"{values.size} values cannot fill a {channels}x{height}x{width} map"
            )
        return cls(values.reshape(channels, height, width))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)


@dataclass(frozen=True)
class PatchGrid:
    rows: int
    cols: int

    def __post_init__(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise ShapeError(f"grid must be at least 1x1, got {self.rows}x{self.cols}")

    @property
    def count(self) -> int:
        return self.rows * self.cols


@dataclass(frozen=True, eq=False)
class DbEntry:
    key: np.ndarray
    value: FeatureMap
    class_label: Optional[int] = None

    def __post_init__(self) -> None:
        key = np.asarray(self.key, dtype=F32).reshape(-1)
        if key.size == 0 or not np.all(np.isfinite(key)):
            raise SchemaError("database keys must be non-empty and finite")
        object.__setattr__(self, "key", key)
        object.__setattr__(self, "value", FeatureMap(np.asarray(self.value.data, dtype=F32)))


@dataclass(frozen=True, eq=False)
class PoseExprKey:
    """Head pose (three Euler angles, radians) plus an expression code."""

    angles: np.ndarray
    expression: np.ndarray
    angle_weight: float = 1.0

    def __post_init__(self) -> None:
        angles = np.asarray(self.angles, dtype=np.float64).reshape(-1)
        if angles.size != POSE_ANGLES:
            raise SchemaError(f"pose key needs {POSE_ANGLES} angles, got {angles.size}")
        if self.angle_weight < 0:
            raise ArgumentError("angle weight must be non-negative")
        object.__setattr__(self, "angles", angles)
        object.__setattr__(
            self, "expression", np.asarray(self.expression, dtype=np.float64).reshape(-1)
        )


@dataclass(eq=False)
class PatchDatabase:
    """Entries plus a class -> entry-indices partition; immutable once built."""

    entries: List[DbEntry]
    key_dim: int
    class_index: Dict[Optional[int], List[int]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.key_dim < 1:
            raise SchemaError("key dimension must be positive")
        for entry in self.entries:
            if entry.key.size != self.key_dim:
                raise SchemaError(
                    f"key of dimension {entry.key.size} in a {self.key_dim}-D database"
                )
        labelled = {entry.class_label is not None for entry in self.entries}
        if len(labelled) > 1:
            raise SchemaError("either every entry carries a class label or none does")
        partition = _partition(self.entries)
        if self.class_index and self.class_index != partition:
            raise SchemaError("class index does not match the entry labels")
        self.class_index = partition
        if self.entries:
            self._keys = np.stack([entry.key for entry in self.entries])
        else:
            self._keys = np.zeros((0, self.key_dim), dtype=F32)

    @property
    def has_class(self) -> bool:
        return bool(self.entries) and self.entries[0].class_label is not None

    @property
    def keys(self) -> np.ndarray:
        return self._keys

    def __len__(self) -> int:
        return len(self.entries)


def _partition(entries: Sequence[DbEntry]) -> Dict[Optional[int], List[int]]:
    index: Dict[Optional[int], List[int]] = {}
    for position, entry in enumerate(entries):
        index.setdefault(entry.class_label, []).append(position)
    return index


def cut_into_patches(fmap: FeatureMap, grid: PatchGrid) -> List[FeatureMap]:
    """Row-major list of ``grid.rows * grid.cols`` equally sized patches."""
    channels, height, width = fmap.shape
    if height % grid.rows or width % grid.cols:
        raise ShapeError(
            f"grid {grid.rows}x{grid.cols} does not divide a {height}x{width} map"
        )
    ph, pw = height // grid.rows, width // grid.cols
    tiles = fmap.data.reshape(channels, grid.rows, ph, grid.cols, pw).transpose(1, 3, 0, 2, 4)
    return [FeatureMap(tiles[r, c].copy()) for r in range(grid.rows) for c in range(grid.cols)]


def glue_patches(patches: Sequence[FeatureMap], grid: PatchGrid) -> FeatureMap:
    if len(patches) != grid.count:
        raise ShapeError(f"grid {grid.rows}x{grid.cols} needs {grid.count} patches, got {len(patches)}")
    shape = patches[0].shape
    if any(p.shape != shape for p in patches):
        raise ShapeError("patches differ in shape")
    channels, ph, pw = shape
    tiles = np.stack([p.data for p in patches]).reshape(grid.rows, grid.cols, channels, ph, pw)
    glued = tiles.transpose(2, 0, 3, 1, 4).reshape(channels, grid.rows * ph, grid.cols * pw)
    return FeatureMap(glued.copy())


def fps_sample(keys: np.ndarray, k: int, start_index: int = 0) -> List[int]:
    """Greedy farthest-point selection, returned in selection order.

    Each pick maximises the minimum distance to the points already chosen;
    equal candidates resolve to the lowest index.
    """
    points = np.asarray(keys, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    population = len(points)
    if not 1 <= k <= population:
        raise ArgumentError(f"cannot sample {k} of {population} keys")
    if not 0 <= start_index < population:
        raise ArgumentError(f"start index {start_index} outside [0, {population - 1}]")

    selected = [start_index]
    nearest = np.sum((points - points[start_index]) ** 2, axis=1)
    nearest[start_index] = -np.inf
    while len(selected) < k:
        pick = int(np.argmax(nearest))
        selected.append(pick)
        nearest = np.minimum(nearest, np.sum((points - points[pick]) ** 2, axis=1))
        nearest[selected] = -np.inf
    return selected


def build_database(
    entries: Sequence[DbEntry], per_class_cap: int, start_index: int = 0
) -> PatchDatabase:
    """Keep at most ``per_class_cap`` FPS-spread entries of every class.

    Under-populated classes are kept whole. Retained entries keep their
    original relative order.
    """
    if per_class_cap < 1:
        raise ArgumentError("per-class cap must be positive")
    if not entries:
        raise ArgumentError("cannot build a database from zero entries")
    dims = {entry.key.size for entry in entries}
    if len(dims) != 1:
        raise SchemaError(f"inconsistent key dimensions {sorted(dims)}")

    keep: List[int] = []
    for label, members in _partition(entries).items():
        if len(members) <= per_class_cap:
            keep.extend(members)
            continue
        local = np.stack([entries[i].key for i in members])
        picked = fps_sample(local, per_class_cap, start_index)
        keep.extend(members[i] for i in picked)
        logger.debug("class %s: kept %d of %d", label, per_class_cap, len(members))

    retained = [entries[i] for i in sorted(keep)]
    logger.info("database built: %d of %d entries retained", len(retained), len(entries))
    return PatchDatabase(entries=retained, key_dim=dims.pop())


def _nearest(db: PatchDatabase, candidates: np.ndarray, distances: np.ndarray) -> DbEntry:
    return db.entries[int(candidates[int(np.argmin(distances))])]


def query_nearest(
    db: PatchDatabase, key: Sequence[float], class_label: Optional[int] = None
) -> DbEntry:
    query = np.asarray(key, dtype=np.float64).reshape(-1)
    if query.size != db.key_dim:
        raise SchemaError(f"query of dimension {query.size} against a {db.key_dim}-D database")
    if class_label is None:
        candidates = np.arange(len(db))
    else:
        candidates = np.asarray(db.class_index.get(class_label, []), dtype=np.int64)
    if candidates.size == 0:
        raise NotFoundError(f"no entries in partition {class_label!r}")
    stored = db.keys[candidates].astype(np.float64)
    return _nearest(db, candidates, np.sum((stored - query) ** 2, axis=1))


def pose_key_vector(key: PoseExprKey) -> np.ndarray:
    return np.concatenate([key.angles, key.expression])


def query_pose(db: PatchDatabase, key: PoseExprKey) -> DbEntry:
    """Nearest entry under ``angle_weight * |d angles|^2 + |d expression|^2``.

    Stored keys are laid out as three angles followed by the expression code.
    """
    if db.key_dim != POSE_ANGLES + key.expression.size:
        raise SchemaError(
            f"pose key of {POSE_ANGLES}+{key.expression.size} values against a "
            f"{db.key_dim}-D database"
        )
    if not len(db):
        raise NotFoundError("empty database")
    stored = db.keys.astype(np.float64)
    angle_gap = np.sum((stored[:, :POSE_ANGLES] - key.angles) ** 2, axis=1)
    expr_gap = np.sum((stored[:, POSE_ANGLES:] - key.expression) ** 2, axis=1)
    return _nearest(db, np.arange(len(db)), key.angle_weight * angle_gap + expr_gap)


def pose_key_grid(
    yaw: Sequence[float],
    pitch: Sequence[float],
    roll: Sequence[float],
    expressions: np.ndarray,
) -> np.ndarray:
    """Stack of pose keys covering every (yaw, pitch, roll, expression) combination."""
    codes = np.atleast_2d(np.asarray(expressions, dtype=np.float64))
    rows = [
        np.concatenate([[y, p, r], code])
        for y in yaw
        for p in pitch
        for r in roll
        for code in codes
    ]
    return np.asarray(rows)


def retrieve_guidance(
    db: PatchDatabase,
    key_map: FeatureMap,
    grid: PatchGrid,
    class_labels: Optional[Sequence[int]] = None,
) -> FeatureMap:
    """Guiding map assembled from the nearest stored value of every key patch."""
    patches = cut_into_patches(key_map, grid)
    if class_labels is not None and len(class_labels) != len(patches):
        raise ShapeError(f"{len(class_labels)} class labels for {len(patches)} patches")
    values = [
        query_nearest(db, patch.flat(), None if class_labels is None else class_labels[i]).value
        for i, patch in enumerate(patches)
    ]
    return glue_patches(values, grid)


def database_stats(db: PatchDatabase) -> Dict[str, object]:
    stored = sum(entry.key.size + entry.value.data.size for entry in db.entries)
    return {
        "key_dim": db.key_dim,
        "entries": len(db),
        "classes": {str(label): len(members) for label, members in db.class_index.items()},
        "stored_floats": stored,
        "bytes": len(save(db)),
    }


def save(db: PatchDatabase) -> bytes:
    writer = FrameWriter(DB_MAGIC)
    writer.pack("IQB", db.key_dim, len(db), int(db.has_class))
    for entry in db.entries:
        writer.floats(entry.key)
        writer.pack("III", *entry.value.shape)
        writer.floats(entry.value.data)
        if db.has_class:
            if not 0 <= entry.class_label <= _MAX_LABEL:
                raise SchemaError(f"class label {entry.class_label} does not fit in u16")
            writer.pack("H", entry.class_label)
    return writer.seal()


def load(blob: bytes) -> PatchDatabase:
    reader = FrameReader(DB_MAGIC, blob)
    key_dim, count, has_class = reader.unpack("IQB", "header")
    if key_dim < 1:
        raise FormatError("key dimension must be positive", reader.offset)
    entries = []
    for _ in range(count):
        key = reader.floats(key_dim, "key")
        shape = reader.unpack("III", "value shape")
        if min(shape) < 1:
            raise FormatError(f"invalid value shape {shape}", reader.offset)
        value = reader.floats(int(np.prod(shape)), "value").reshape(shape)
        label = reader.unpack("H", "class label")[0] if has_class else None
        entries.append(DbEntry(key=key, value=FeatureMap(value), class_label=label))
    reader.finish()
    return PatchDatabase(entries=entries, key_dim=key_dim)


def save_file(db: PatchDatabase, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_bytes(save(db))
    return path


def load_file(path: Union[str, Path]) -> PatchDatabase:
    return load(Path(path).read_bytes())
