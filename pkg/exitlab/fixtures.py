"""
Architecture fixture files.

    # comment
    [backbone]
    in,out,h,w,kernel,convs
    ...
    [branch.2]
    in,out,h,w,kernel,convs      <- explicit branch modules
    [branch.4]
                                 <- empty: derived from the backbone under the policy

Sections are ``[backbone]`` (exactly once) and ``[branch.k]`` with k the
1-based backbone module the branch is attached after.
"""

import logging
import re
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

from pydantic import ValidationError

from exitlab.cost_model import (
    Branch,
    ModuleSpec,
    RouteGraph,
    ScalePolicy,
    build_branch_schedule,
)
from exitlab.errors import ArgumentError, FixtureError

logger = logging.getLogger(__name__)

DATA_DIR = Path(__file__).parent / "data"

_SECTION = re.compile(r"^\[(backbone|branch\.(\d+))\]$")
_FIELDS = ("in_channels", "out_channels", "height", "width", "kernel", "convs_per_block")


def bundled_fixture(name: str) -> Path:
    """Path of a fixture shipped with the package (``oasis``, ``megaportraits``)."""
    path = DATA_DIR / f"{name}.arch"
    if not path.exists():
        raise FixtureError(f"no bundled fixture named {name!r}")
    return path


def _parse_row(text: str, line: int) -> ModuleSpec:
    cells = [c.strip() for c in text.split(",")]
    if len(cells) != len(_FIELDS):
        raise FixtureError(f"expected {len(_FIELDS)} comma-separated values, got {len(cells)}", line)
    try:
        values = [int(c) for c in cells]
    except ValueError:
        raise FixtureError(f"non-integer value in row {text!r}", line) from None
    try:
        return ModuleSpec(**dict(zip(_FIELDS, values)))
    except ValidationError as exc:
        raise FixtureError(f"invalid module {text!r}: {exc.errors()[0]['msg']}", line) from None


def parse_fixture(text: str, policy: ScalePolicy) -> RouteGraph:
    backbone: Optional[List[ModuleSpec]] = None
    branches: Dict[int, Tuple[int, List[ModuleSpec]]] = {}
    current: Optional[List[ModuleSpec]] = None

    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        header = _SECTION.match(line)
        if header:
            if header.group(2) is None:
                if backbone is not None:
                    raise FixtureError("duplicate [backbone] section", number)
                backbone = current = []
            else:
                k = int(header.group(2))
                if k in branches:
                    raise FixtureError(f"duplicate [branch.{k}] section", number)
                current = []
                branches[k] = (number, current)
            continue
        if line.startswith("["):
            raise FixtureError(f"unknown section {line}", number)
        if current is None:
            raise FixtureError("module row outside of any section", number)
        current.append(_parse_row(line, number))

    if not backbone:
        raise FixtureError("fixture has no [backbone] modules")

    built = []
    for k, (number, rows) in sorted(branches.items()):
        try:
            modules = rows or build_branch_schedule(backbone, k, policy)
            built.append((number, Branch(attach_index=k, modules=tuple(modules))))
        except ArgumentError as exc:
            raise FixtureError(str(exc), number) from None
        except ValidationError as exc:
            raise FixtureError(exc.errors()[0]["msg"], number) from None

    try:
        return RouteGraph(backbone=tuple(backbone), branches=tuple(b for _, b in built))
    except ValidationError as exc:
        first = exc.errors()[0]["msg"]
        line = built[0][0] if built else None
        match = re.search(r"branch at (\d+)", first)
        if match:
            line = branches[int(match.group(1))][0]
        raise FixtureError(first, line) from None


def load_fixture(path: Union[str, Path], policy: ScalePolicy) -> RouteGraph:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise FixtureError(f"cannot read fixture {path}: {exc}") from exc
    graph = parse_fixture(text, policy)
    logger.info(
        "loaded %s: %d backbone modules, %d branches, SF=%s",
        path.name,
        graph.depth,
        len(graph.branches),
        policy.label(),
    )
    return graph
