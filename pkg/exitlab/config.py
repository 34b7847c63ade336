"""
Flat experiment configuration, read from one JSON file.

Relative paths resolve against the folder holding the config file. A fixture
may also name a bundled architecture (``"oasis"``, ``"megaportraits"``).
Every random stream is derived from ``seed`` by label.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from exitlab.cost_model import RouteGraph, ScalePolicy
from exitlab.difficulty_sim import OracleConfig, derive_seed
from exitlab.errors import ArgumentError, ConfigError
from exitlab.fixtures import DATA_DIR, load_fixture
from exitlab.predictor import LayerSpec, TrainConfig, predictor_preset
from exitlab.router import parse_thresholds

logger = logging.getLogger(__name__)

DEFAULT_CONFIG = Path(__file__).parent / "configs" / "default.json"


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    fixture: Path = Field(..., description="Architecture fixture file or bundled fixture name")
    scale_factor: str = Field("1/4", description="Scale factor of the routed architecture")
    scale_factors: Tuple[str, ...] = Field(("1/2", "1/3", "1/4"), min_length=1)
    min_channels: int = Field(64, ge=1)
    cost_unit: float = Field(1e9, gt=0, description="FLOPs per routing cost unit")
    oracle: OracleConfig = Field(default_factory=OracleConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    hidden: Tuple[int, ...] = (64, 32)
    slope: float = Field(0.2, ge=0.0)
    thresholds: Tuple[float, ...]
    n_conditions: int = Field(50, ge=1)
    n_noise_vectors: int = Field(20, ge=1)
    val_fraction: float = Field(0.1, ge=0.0, lt=1.0)
    heldout_conditions: int = Field(10, ge=1)
    heldout_noise_vectors: int = Field(0, ge=0)
    ablation_exit: int = Field(1, ge=1)
    correlation_threshold: Optional[float] = Field(
        None, description="Routing threshold of the correlation stage; middle threshold when unset"
    )
    kde_bandwidth: float = Field(0.3, gt=0)
    output_dir: Path = Path("out")
    seed: int = 0

    @field_validator("thresholds", mode="before")
    @classmethod
    def _parse_thresholds(cls, value: Any) -> Any:
        if isinstance(value, str):
            try:
                return parse_thresholds(value)
            except ArgumentError as exc:
                raise ValueError(str(exc)) from None
        return value

    @field_validator("thresholds")
    @classmethod
    def _increasing(cls, value: Tuple[float, ...]) -> Tuple[float, ...]:
        if not value:
            raise ValueError("at least one threshold is required")
        if any(b <= a for a, b in zip(value, value[1:])):
            raise ValueError("thresholds must be strictly increasing")
        return value

    @field_validator("scale_factor", "scale_factors")
    @classmethod
    def _valid_factors(cls, value: Any) -> Any:
        for factor in [value] if isinstance(value, str) else value:
            ScalePolicy(scale_factor=factor)
        return value

    def policy(self, scale_factor: Optional[str] = None) -> ScalePolicy:
        return ScalePolicy(scale_factor=scale_factor or self.scale_factor, min_channels=self.min_channels)

    def route_graph(self, scale_factor: Optional[str] = None) -> RouteGraph:
        return load_fixture(self.fixture, self.policy(scale_factor))

    def oracle_config(self) -> OracleConfig:
        return self.oracle.model_copy(update={"seed": derive_seed(self.seed, "oracle")})

    def train_config(self) -> TrainConfig:
        return self.train.model_copy(update={"seed": derive_seed(self.seed, "train")})

    def init_seed(self) -> int:
        return derive_seed(self.seed, "init")

    def layers(self, n_exits: int) -> List[LayerSpec]:
        return predictor_preset(self.oracle.input_dim, n_exits, self.hidden, self.slope)

    def correlation_at(self) -> float:
        if self.correlation_threshold is not None:
            return self.correlation_threshold
        return self.thresholds[len(self.thresholds) // 2]

    def with_overrides(self, seed: Optional[int] = None, output_dir: Optional[Path] = None) -> "ExperimentConfig":
        update: Dict[str, Any] = {}
        if seed is not None:
            update["seed"] = seed
        if output_dir is not None:
            update["output_dir"] = Path(output_dir)
        return self.model_copy(update=update)


def _resolve_fixture(raw: str, base: Path) -> Path:
    bundled = DATA_DIR / f"{raw}.arch"
    if "/" not in raw and "." not in raw and bundled.exists():
        return bundled
    path = Path(raw)
    return path if path.is_absolute() else base / path


def config_from_dict(data: Dict[str, Any], base: Union[str, Path] = ".") -> ExperimentConfig:
    """Validate a config mapping, resolving paths against ``base``."""
    base = Path(base)
    data = dict(data)
    if "fixture" not in data:
        raise ConfigError("config is missing 'fixture'")
    data["fixture"] = _resolve_fixture(str(data["fixture"]), base)
    out = Path(data.get("output_dir", "out"))
    data["output_dir"] = out if out.is_absolute() else base / out
    try:
        cfg = ExperimentConfig(**data)
    except ValidationError as exc:
        raise ConfigError(_first_error(exc)) from None
    if not cfg.fixture.is_file():
        raise ConfigError(f"fixture not found: {cfg.fixture}")

    n_branches = len(cfg.route_graph().branches)
    if cfg.oracle.n_exits != n_branches:
        raise ConfigError(
            f"oracle has {cfg.oracle.n_exits} exit capacities but the fixture has {n_branches} branches"
        )
    if cfg.ablation_exit > n_branches:
        raise ConfigError(f"ablation_exit {cfg.ablation_exit} exceeds the {n_branches} branches")
    return cfg


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8") as f:
            data = json.load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must hold a JSON object")
    cfg = config_from_dict(data, path.resolve().parent)
    logger.info("loaded config %s (seed %d)", path, cfg.seed)
    return cfg


def _first_error(exc: ValidationError) -> str:
    err = exc.errors()[0]
    where = ".".join(str(p) for p in err["loc"])
    return f"{where}: {err['msg']}" if where else err["msg"]
