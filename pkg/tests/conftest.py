"""Shared fixtures for the exitlab test suite."""

import json
from pathlib import Path

import numpy as np
import pytest

from exitlab.cost_model import ModuleSpec, ScalePolicy
from exitlab.difficulty_sim import OracleConfig, QualityOracle
from exitlab.fixtures import bundled_fixture, load_fixture

OASIS_GFLOPS = (120.0, 138.0, 168.0, 227.0)
OASIS_BACKBONE_GFLOPS = 319.0


@pytest.fixture
def quarter_policy():
    return ScalePolicy(scale_factor="1/4", min_channels=64)


@pytest.fixture
def oasis_graph(quarter_policy):
    return load_fixture(bundled_fixture("oasis"), quarter_policy)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_oracle():
    """Four exits, low noise, scores in roughly [0, 0.3]."""
    return QualityOracle(
        OracleConfig(
            input_dim=8,
            exit_capacities=(0.5, 1.0, 1.5, 2.0),
            noise_sd=0.01,
            link_scale=0.1,
            seed=7,
        )
    )


def make_backbone(depth: int, widths=None):
    """Backbone of ``depth`` 3x3 blocks halving width and doubling resolution."""
    widths = widths or [max(1024 >> i, 16) for i in range(depth + 1)]
    return [
        ModuleSpec(
            in_channels=widths[i],
            out_channels=widths[i + 1],
            height=4 << i,
            width=8 << i,
            kernel=3,
            convs_per_block=2,
        )
        for i in range(depth)
    ]


@pytest.fixture
def tiny_config(tmp_path: Path) -> Path:
    """Desk-scale experiment: 100 samples, 5 epochs."""
    document = {
        "fixture": "oasis",
        "scale_factor": "1/4",
        "scale_factors": ["1/2", "1/4"],
        "oracle": {
            "input_dim": 8,
            "exit_capacities": [0.5, 1.0, 1.5, 2.0],
            "noise_sd": 0.02,
            "link_scale": 0.1,
        },
        "train": {"epochs": 5, "batch_size": 16, "learning_rate": 0.01},
        "hidden": [16, 8],
        "thresholds": "0.02:0.2:0.02",
        "n_conditions": 10,
        "n_noise_vectors": 10,
        "val_fraction": 0.2,
        "output_dir": "run",
        "seed": 3,
    }
    path = tmp_path / "experiment.json"
    path.write_text(json.dumps(document), encoding="utf-8")
    return path
