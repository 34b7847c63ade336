"""
Threshold routing: pick the cheapest exit whose predicted quality score stays
under the threshold, falling back to the backbone, plus the experiment
mathematics built on it (threshold sweeps, single-branch vs routed
distributions, KDE curves, difficulty rank correlation).
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.stats import spearmanr
from sklearn.neighbors import KernelDensity

from exitlab.cost_model import CostReport
from exitlab.difficulty_sim import TruthSource
from exitlab.errors import (
    ArgumentError,
    ShapeError,
    UndefinedCorrelationError,
    UnknownExitError,
)
from exitlab.predictor import ScorePredictor

logger = logging.getLogger(__name__)

BACKBONE_SCORE = 0.0


class RoutingPolicy(BaseModel):
    """Threshold plus exit costs; branch ids are 1..E, the backbone is ``backbone_id``."""

    model_config = ConfigDict(frozen=True)

    threshold: float
    exit_costs: Tuple[Tuple[int, float], ...] = Field(..., min_length=1)
    backbone_id: int
    backbone_cost: float = Field(..., gt=0)

    @field_validator("exit_costs")
    @classmethod
    def _order_by_cost(cls, value: Tuple[Tuple[int, float], ...]) -> Tuple[Tuple[int, float], ...]:
        if any(cost <= 0 for _, cost in value):
            raise ValueError("exit costs must be strictly positive")
        return tuple(sorted(((int(e), float(c)) for e, c in value), key=lambda ec: (ec[1], ec[0])))

    @model_validator(mode="after")
    def _check_backbone(self) -> "RoutingPolicy":
        ids = sorted(e for e, _ in self.exit_costs)
        if ids != list(range(1, len(ids) + 1)):
            raise ValueError(f"branch exit ids must be 1..{len(ids)}, got {ids}")
        if self.backbone_id in ids:
            raise ValueError("backbone id collides with a branch id")
        if self.backbone_cost < max(c for _, c in self.exit_costs):
            raise ValueError("backbone must cost at least as much as any branch")
        return self

    @classmethod
    def from_report(cls, report: CostReport, threshold: float, unit: float = 1.0) -> "RoutingPolicy":
        """Policy from a cost report, optionally rescaling FLOPs (``unit=1e9`` for GFLOPs)."""
        return cls(
            threshold=threshold,
            exit_costs=tuple((e, flops / unit) for e, flops in report.per_exit_flops),
            backbone_id=report.backbone_id,
            backbone_cost=report.backbone_flops / unit,
        )

    @property
    def n_branches(self) -> int:
        return len(self.exit_costs)

    def with_threshold(self, threshold: float) -> "RoutingPolicy":
        return self.model_copy(update={"threshold": threshold})

    def cost_of(self, exit_id: int) -> float:
        if exit_id == self.backbone_id:
            return self.backbone_cost
        for e, cost in self.exit_costs:
            if e == exit_id:
                return cost
        raise UnknownExitError(f"no exit with id {exit_id}")

    def exit_order(self) -> List[int]:
        """Exit ids from cheapest to most expensive, backbone last."""
        return [e for e, _ in self.exit_costs] + [self.backbone_id]


@dataclass(frozen=True)
class RoutingOutcome:
    chosen_exit: int
    predicted_score: float
    cost: float


def select_exit(scores: Sequence[float], policy: RoutingPolicy) -> RoutingOutcome:
    """Cheapest exit whose predicted score is within the threshold, else the backbone."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if scores.size != policy.n_branches:
        raise ShapeError(f"{scores.size} scores for {policy.n_branches} branches")
    for exit_id, cost in policy.exit_costs:
        if scores[exit_id - 1] <= policy.threshold:
            return RoutingOutcome(exit_id, float(scores[exit_id - 1]), cost)
    return RoutingOutcome(policy.backbone_id, BACKBONE_SCORE, policy.backbone_cost)


def _route_all(predicted: np.ndarray, policy: RoutingPolicy) -> List[RoutingOutcome]:
    return [select_exit(row, policy) for row in predicted]


def _truth_at(truth: np.ndarray, outcomes: Sequence[RoutingOutcome], backbone_id: int) -> np.ndarray:
    return np.array(
        [BACKBONE_SCORE if o.chosen_exit == backbone_id else truth[i, o.chosen_exit - 1] for i, o in enumerate(outcomes)]
    )


@dataclass(frozen=True)
class SweepRow:
    threshold: float
    exit_counts: Dict[int, int]
    total_flops: float
    mean_flops: float
    violation_rate: float


@dataclass(frozen=True)
class SweepReport:
    rows: List[SweepRow]
    exit_ids: List[int]

    def to_frame(self) -> pd.DataFrame:
        records = []
        for row in self.rows:
            record = {"threshold": row.threshold}
            record.update({f"exit_{e}": row.exit_counts[e] for e in self.exit_ids})
            record.update(
                total_flops=row.total_flops,
                mean_flops=row.mean_flops,
                violation_rate=row.violation_rate,
            )
            records.append(record)
        return pd.DataFrame.from_records(records)

    def curve(self) -> List[Tuple[float, float]]:
        """(threshold, mean cost) points for the savings slope."""
        return [(row.threshold, row.mean_flops) for row in self.rows]


def sweep(
    inputs: np.ndarray,
    model: ScorePredictor,
    oracle: TruthSource,
    thresholds: Sequence[float],
    policy: RoutingPolicy,
    tolerance: float = 0.0,
) -> SweepReport:
    """Route every input at every threshold and tally exits, cost and violations.

    A routed input violates the threshold when its true score at the chosen
    exit exceeds ``threshold * (1 + tolerance)``; backbone choices never do.
    """
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if not len(inputs) or not len(thresholds):
        raise ArgumentError("sweep needs at least one input and one threshold")
    predicted = np.asarray(model.predict(inputs))
    truth = np.asarray(oracle.true_scores_batch(inputs))
    if truth.shape != predicted.shape:
        raise ShapeError(f"predictions {predicted.shape} vs true scores {truth.shape}")

    rows = []
    for threshold in thresholds:
        current = policy.with_threshold(float(threshold))
        outcomes = _route_all(predicted, current)
        counts = {e: 0 for e in current.exit_order()}
        for outcome in outcomes:
            counts[outcome.chosen_exit] += 1
        achieved = _truth_at(truth, outcomes, current.backbone_id)
        violations = achieved > current.threshold * (1.0 + tolerance)
        total = float(sum(o.cost for o in outcomes))
        rows.append(
            SweepRow(
                threshold=float(threshold),
                exit_counts=counts,
                total_flops=total,
                mean_flops=total / len(outcomes),
                violation_rate=float(violations.mean()),
            )
        )
        logger.debug("threshold %.4f: %s", threshold, counts)
    return SweepReport(rows=rows, exit_ids=policy.exit_order())


def kde(samples: Sequence[float], bandwidth: float, grid: Sequence[float]) -> np.ndarray:
    """Gaussian kernel density of ``samples`` evaluated on ``grid``."""
    samples = np.asarray(samples, dtype=np.float64).reshape(-1)
    if samples.size == 0:
        raise ArgumentError("kernel density needs at least one sample")
    if bandwidth <= 0:
        raise ArgumentError("bandwidth must be positive")
    estimator = KernelDensity(kernel="gaussian", bandwidth=bandwidth).fit(samples[:, None])
    points = np.asarray(grid, dtype=np.float64).reshape(-1, 1)
    return np.exp(estimator.score_samples(points))


@dataclass(frozen=True, eq=False)
class AblationResult:
    exit_id: int
    threshold: float
    single_branch: np.ndarray
    routed: np.ndarray
    single_exceedance: float
    routed_exceedance: float

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "sample": np.arange(len(self.single_branch)),
                "single_branch": self.single_branch,
                "routed": self.routed,
            }
        )

    def summary(self) -> Dict[str, float]:
        return {
            "exit_id": self.exit_id,
            "threshold": self.threshold,
            "single_exceedance": self.single_exceedance,
            "routed_exceedance": self.routed_exceedance,
        }


def branch_vs_predictor(
    inputs: np.ndarray,
    model: ScorePredictor,
    oracle: TruthSource,
    exit_id: int,
    policy: RoutingPolicy,
) -> AblationResult:
    """Scores from forcing every input through ``exit_id`` against predictor routing.

    The routing threshold is the mean single-branch score, so both
    distributions are judged against the same bar.
    """
    if not 1 <= exit_id <= policy.n_branches:
        raise UnknownExitError(f"no branch with exit id {exit_id}")
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    truth = np.asarray(oracle.true_scores_batch(inputs))
    single = truth[:, exit_id - 1].copy()
    threshold = float(single.mean())
    routed_policy = policy.with_threshold(threshold)
    outcomes = _route_all(np.asarray(model.predict(inputs)), routed_policy)
    routed = _truth_at(truth, outcomes, policy.backbone_id)
    return AblationResult(
        exit_id=exit_id,
        threshold=threshold,
        single_branch=single,
        routed=routed,
        single_exceedance=float(np.mean(single > threshold)),
        routed_exceedance=float(np.mean(routed > threshold)),
    )


def difficulty_correlation(
    inputs: np.ndarray,
    model: ScorePredictor,
    attribute_extractor: Callable[[np.ndarray], float],
    policy: RoutingPolicy,
) -> float:
    """Spearman correlation between an input attribute and the routed exit id."""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    attributes = np.array([attribute_extractor(x) for x in inputs], dtype=np.float64)
    if len(attributes) < 2 or np.ptp(attributes) == 0:
        raise UndefinedCorrelationError("attribute is constant, correlation undefined")
    chosen = np.array([o.chosen_exit for o in _route_all(np.asarray(model.predict(inputs)), policy)])
    if np.ptp(chosen) == 0:
        raise UndefinedCorrelationError("every input took the same exit, correlation undefined")
    rho = spearmanr(attributes, chosen)[0]
    return float(rho)


def parse_thresholds(text: str) -> List[float]:
    """``start:stop:step`` (stop inclusive) or a comma-separated list."""
    text = text.strip()
    if ":" in text:
        try:
            start, stop, step = (float(part) for part in text.split(":"))
        except ValueError:
            raise ArgumentError(f"bad threshold range {text!r}") from None
        if step <= 0 or stop < start:
            raise ArgumentError(f"bad threshold range {text!r}")
        count = int(np.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + i * step, 12) for i in range(count)]
    try:
        values = [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ArgumentError(f"bad threshold list {text!r}") from None
    if not values:
        raise ArgumentError("no thresholds given")
    return values
