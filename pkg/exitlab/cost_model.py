"""
Backbone + branch architectures as module schedules, the channel scaling rule
that lightens branches, and FLOP accounting per computational route.

FLOP convention: a multiply-add counts as 2 FLOPs. A block of ``convs`` square
convolutions costs ``2 * kernel**2 * in * out * height * width * convs``, i.e.
every convolution of the block is charged at the block's in x out width.
Biases, activations, normalisations and upsampling are free.
"""

import logging
import math
from fractions import Fraction
from typing import Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    field_serializer,
    field_validator,
    model_validator,
)

from exitlab.errors import ArgumentError, DegenerateInputError, UnknownExitError

logger = logging.getLogger(__name__)


class ModuleSpec(BaseModel):
    """One convolutional block of a generator stage."""

    model_config = ConfigDict(frozen=True)

    in_channels: int = Field(..., ge=1, description="Input channels")
    out_channels: int = Field(..., ge=1, description="Output channels")
    height: int = Field(..., ge=1, description="Feature-map rows")
    width: int = Field(..., ge=1, description="Feature-map cols")
    kernel: int = Field(3, ge=1, description="Square conv kernel side")
    convs_per_block: int = Field(
        1, ge=1, description="Convolutions composing the block (3 for a ResBlock with skip conv)"
    )


class ScalePolicy(BaseModel):
    """Scale factor applied to branch widths, bounded below by a channel floor."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    scale_factor: Fraction = Field(..., description="Width multiplier in (0, 1]")
    min_channels: int = Field(64, ge=1, description="No scaling is forced below this width")

    @field_validator("scale_factor", mode="before")
    @classmethod
    def _coerce_fraction(cls, value: Union[str, int, float, Fraction]) -> Fraction:
        if isinstance(value, Fraction):
            return value
        if isinstance(value, float):
            return Fraction(value).limit_denominator(10_000)
        try:
            return Fraction(str(value).strip())
        except (ValueError, ZeroDivisionError) as exc:
            raise ValueError(f"not a rational scale factor: {value!r}") from exc

    @field_validator("scale_factor")
    @classmethod
    def _check_range(cls, value: Fraction) -> Fraction:
        if not 0 < value <= 1:
            raise ValueError(f"scale factor must lie in (0, 1], got {value}")
        return value

    @field_serializer("scale_factor")
    def _dump_fraction(self, value: Fraction) -> str:
        return str(value)

    def label(self) -> str:
        return str(self.scale_factor)


class Branch(BaseModel):
    """Modules appended after backbone module ``attach_index`` (1-based)."""

    model_config = ConfigDict(frozen=True)

    attach_index: int = Field(..., ge=1)
    modules: Tuple[ModuleSpec, ...] = Field(..., min_length=1)


class RouteGraph(BaseModel):
    """A backbone schedule plus the branches attached to it.

    Branches are kept sorted by attach index; exit ``i`` (1-based) is the
    i-th branch and ``backbone_id`` (= branch count + 1) names the full
    backbone route.
    """

    model_config = ConfigDict(frozen=True)

    backbone: Tuple[ModuleSpec, ...] = Field(..., min_length=2)
    branches: Tuple[Branch, ...] = ()

    @field_validator("branches")
    @classmethod
    def _sort_branches(cls, value: Tuple[Branch, ...]) -> Tuple[Branch, ...]:
        return tuple(sorted(value, key=lambda b: b.attach_index))

    @model_validator(mode="after")
    def _check_topology(self) -> "RouteGraph":
        depth = len(self.backbone)
        seen = set()
        for branch in self.branches:
            k = branch.attach_index
            if not 1 <= k <= depth - 1:
                raise ValueError(f"attach index {k} outside [1, {depth - 1}]")
            if k in seen:
                raise ValueError(f"two branches attached after module {k}")
            seen.add(k)
            if k + len(branch.modules) != depth:
                raise ValueError(
                    f"branch at {k} has {len(branch.modules)} modules, "
                    f"depth rule requires {depth - k}"
                )
            feed = self.backbone[k - 1].out_channels
            if branch.modules[0].in_channels != feed:
                raise ValueError(
                    f"branch at {k} expects {branch.modules[0].in_channels} input "
                    f"channels, backbone module {k} emits {feed}"
                )
        return self

    @property
    def depth(self) -> int:
        return len(self.backbone)

    @property
    def backbone_id(self) -> int:
        return len(self.branches) + 1

    @property
    def exit_ids(self) -> List[int]:
        return list(range(1, self.backbone_id + 1))

    def branch(self, exit_id: int) -> Branch:
        if not 1 <= exit_id <= len(self.branches):
            raise UnknownExitError(f"no branch with exit id {exit_id}")
        return self.branches[exit_id - 1]


class CostReport(BaseModel):
    """FLOPs of every branch route plus the backbone route."""

    model_config = ConfigDict(frozen=True)

    per_exit_flops: Tuple[Tuple[int, int], ...]
    backbone_id: int
    backbone_flops: int = Field(..., ge=0)

    def rows(self) -> List[Tuple[int, int]]:
        return list(self.per_exit_flops) + [(self.backbone_id, self.backbone_flops)]

    def as_dict(self) -> Dict[int, int]:
        return dict(self.rows())


def _round_half_away(value: Fraction) -> int:
    if value >= 0:
        return math.floor(value + Fraction(1, 2))
    return -math.floor(-value + Fraction(1, 2))


def scale_channels(channels: int, policy: ScalePolicy) -> int:
    """Scaled width of a ``channels``-wide layer; widths at or under the floor stay put."""
    if channels < 1:
        raise ArgumentError(f"channel count must be positive, got {channels}")
    if channels <= policy.min_channels:
        return channels
    return max(_round_half_away(channels * policy.scale_factor), policy.min_channels)


def build_branch_schedule(
    backbone: Sequence[ModuleSpec], attach_index: int, policy: ScalePolicy
) -> List[ModuleSpec]:
    """Lightened copy of the backbone tail after module ``attach_index``.

    The first module reads the unscaled backbone feature; every output width
    goes through :func:`scale_channels`.
    """
    depth = len(backbone)
    if not 1 <= attach_index <= depth - 1:
        raise ArgumentError(
            f"range error: attach index {attach_index} outside [1, {depth - 1}]"
        )
    feed = backbone[attach_index - 1].out_channels
    schedule = []
    for source in backbone[attach_index:]:
        width = scale_channels(source.out_channels, policy)
        schedule.append(
            ModuleSpec(
                in_channels=feed,
                out_channels=width,
                height=source.height,
                width=source.width,
                kernel=source.kernel,
                convs_per_block=source.convs_per_block,
            )
        )
        feed = width
    return schedule


def build_route_graph(
    backbone: Sequence[ModuleSpec], attach_indices: Iterable[int], policy: ScalePolicy
) -> RouteGraph:
    branches = [
        Branch(attach_index=k, modules=tuple(build_branch_schedule(backbone, k, policy)))
        for k in attach_indices
    ]
    return RouteGraph(backbone=tuple(backbone), branches=tuple(branches))


def flops_of_module(module: ModuleSpec) -> int:
    return (
        2
        * module.kernel**2
        * module.in_channels
        * module.out_channels
        * module.height
        * module.width
        * module.convs_per_block
    )


def params_of_module(module: ModuleSpec) -> int:
    """Convolution weights of the block (biases ignored)."""
    return module.kernel**2 * module.in_channels * module.out_channels * module.convs_per_block


def _route_modules(graph: RouteGraph, exit_id: int) -> List[ModuleSpec]:
    if exit_id == graph.backbone_id:
        return list(graph.backbone)
    branch = graph.branch(exit_id)
    return list(graph.backbone[: branch.attach_index]) + list(branch.modules)


def route_cost(graph: RouteGraph, exit_id: int) -> int:
    return sum(flops_of_module(m) for m in _route_modules(graph, exit_id))


def route_params(graph: RouteGraph, exit_id: int) -> int:
    return sum(params_of_module(m) for m in _route_modules(graph, exit_id))


def cost_report(graph: RouteGraph) -> CostReport:
    per_exit = tuple((e, route_cost(graph, e)) for e in range(1, graph.backbone_id))
    report = CostReport(
        per_exit_flops=per_exit,
        backbone_id=graph.backbone_id,
        backbone_flops=route_cost(graph, graph.backbone_id),
    )
    logger.debug("cost report: %s", report.rows())
    return report


def savings_slope(sweep: Sequence[Tuple[float, float]]) -> float:
    """Saved FLOPs per quality unit given up, from a (threshold, mean cost) sweep.

    Negated least-squares slope, so it is positive when cost falls as the
    threshold loosens.
    """
    points = np.asarray(sweep, dtype=np.float64).reshape(-1, 2)
    if len(points) < 2:
        raise DegenerateInputError("savings slope needs at least two sweep points")
    thresholds, costs = points[:, 0], points[:, 1]
    if np.ptp(thresholds) == 0:
        raise DegenerateInputError("all sweep thresholds are equal")
    slope, _ = np.polyfit(thresholds, costs, 1)
    return float(-slope)
