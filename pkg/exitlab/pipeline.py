"""
Experiment orchestration.

``run_pipeline`` is a langgraph ``StateGraph``: each node is one stage, stages
hand each other files only, and the state carries artifact names and summary
numbers. The run happens in a staging folder next to the output folder; on
failure the staging folder is removed, on success its files are moved in.
Artifacts left in the output folder by an earlier run are removed first, so the
folder only ever holds files listed in the new manifest.

    simulate -> train -> [heldout] -> sweep -> ablation -> correlation -> slope -> manifest
"""

import functools
import hashlib
import json
import logging
import operator
import shutil
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import pandas as pd
from langgraph.graph import END, START, StateGraph
from typing_extensions import Annotated, TypedDict

from exitlab import datasets
from exitlab.config import ExperimentConfig
from exitlab.cost_model import ScalePolicy, cost_report, route_params, savings_slope
from exitlab.difficulty_sim import QualityOracle, TabulatedOracle
from exitlab.errors import DegenerateInputError, ExitLabError, StageError
from exitlab.fixtures import load_fixture
from exitlab.predictor import Mlp, evaluate, train
from exitlab.router import RoutingPolicy, branch_vs_predictor, difficulty_correlation, sweep

logger = logging.getLogger(__name__)

TRAIN_FILE = "dataset_train.fncds"
VAL_FILE = "dataset_val.fncds"
HELDOUT_FILE = "dataset_heldout.fncds"
MODEL_FILE = "predictor.fncmlp"
SWEEP_FILE = "sweep.csv"
ABLATION_FILE = "ablation.csv"
MANIFEST_FILE = "manifest.json"
ARTIFACT_FILES = (TRAIN_FILE, VAL_FILE, HELDOUT_FILE, MODEL_FILE, SWEEP_FILE, ABLATION_FILE, MANIFEST_FILE)


class PipelineState(TypedDict, total=False):
    """State schema for the experiment graph."""

    artifacts: Annotated[Dict[str, str], operator.or_]
    summary: Annotated[Dict[str, Any], operator.or_]


def cost_table(
    fixture: Path, scale_factors: Sequence[str], min_channels: int = 64, unit: float = 1e9
) -> pd.DataFrame:
    """One row per (scale factor, branch exit) followed by the backbone row."""
    records: List[Dict[str, Any]] = []
    backbone: Optional[Dict[str, Any]] = None
    for factor in scale_factors:
        policy = ScalePolicy(scale_factor=factor, min_channels=min_channels)
        graph = load_fixture(fixture, policy)
        report = cost_report(graph)
        for exit_id, flops in report.per_exit_flops:
            records.append(
                {
                    "scale_factor": policy.label(),
                    "exit_id": exit_id,
                    "route": "branch",
                    "flops": flops,
                    "gflops": flops / unit,
                    "params": route_params(graph, exit_id),
                }
            )
        if backbone is None:
            backbone = {
                "scale_factor": "1",
                "exit_id": report.backbone_id,
                "route": "backbone",
                "flops": report.backbone_flops,
                "gflops": report.backbone_flops / unit,
                "params": route_params(graph, report.backbone_id),
            }
    records.append(backbone)
    return pd.DataFrame.from_records(records)


def run_cost_table(cfg: ExperimentConfig) -> pd.DataFrame:
    return cost_table(cfg.fixture, cfg.scale_factors, cfg.min_channels, cfg.cost_unit)


def _stage(name: str) -> Callable:
    def decorate(fn: Callable) -> Callable:
        @functools.wraps(fn)
        def wrapper(*args: Any, **kwargs: Any) -> Dict[str, Any]:
            logger.info("stage %s", name)
            try:
                return fn(*args, **kwargs)
            except StageError:
                raise
            except (ExitLabError, OSError, ValueError) as exc:
                raise StageError(name, str(exc)) from exc

        return wrapper

    return decorate


class ExperimentRun:
    """Stage implementations bound to one config and one working folder."""

    def __init__(self, cfg: ExperimentConfig, workdir: Path):
        self.cfg = cfg
        self.workdir = workdir
        self.oracle = QualityOracle(cfg.oracle_config())

    def _path(self, name: str) -> Path:
        return self.workdir / name

    def _policy(self, threshold: float) -> RoutingPolicy:
        return RoutingPolicy.from_report(cost_report(self.cfg.route_graph()), threshold, self.cfg.cost_unit)

    @_stage("simulate")
    def simulate(self, state: PipelineState) -> Dict[str, Any]:
        split = self.oracle.make_dataset(
            self.cfg.n_conditions, self.cfg.n_noise_vectors, self.cfg.val_fraction
        )
        if not len(split.val):
            raise DegenerateInputError("validation split is empty; raise the sample counts or val_fraction")
        datasets.save_file(split.train, self._path(TRAIN_FILE))
        datasets.save_file(split.val, self._path(VAL_FILE))
        return {
            "artifacts": {"dataset_train": TRAIN_FILE, "dataset_val": VAL_FILE},
            "summary": {"train_rows": len(split.train), "val_rows": len(split.val)},
        }

    @_stage("train")
    def fit(self, state: PipelineState) -> Dict[str, Any]:
        train_set = datasets.load_file(self._path(state["artifacts"]["dataset_train"]))
        model = Mlp.initialise(self.cfg.layers(train_set.n_exits), seed=self.cfg.init_seed())
        result = train(model, train_set, self.cfg.train_config())
        result.model.save_file(self._path(MODEL_FILE))
        return {"artifacts": {"predictor": MODEL_FILE}, "summary": {"final_loss": result.history[-1]}}

    @_stage("heldout")
    def heldout(self, state: PipelineState) -> Dict[str, Any]:
        heldout = self.oracle.make_heldout_dataset(self.cfg.heldout_conditions, self.cfg.heldout_noise_vectors)
        datasets.save_file(heldout, self._path(HELDOUT_FILE))
        model = Mlp.load_file(self._path(state["artifacts"]["predictor"]))
        report = evaluate(model, heldout)
        return {
            "artifacts": {"dataset_heldout": HELDOUT_FILE},
            "summary": {"heldout_rel_error": report.overall},
        }

    def _load_eval_inputs(self, state: PipelineState):
        val = datasets.load_file(self._path(state["artifacts"]["dataset_val"]))
        model = Mlp.load_file(self._path(state["artifacts"]["predictor"]))
        return val, model

    @_stage("sweep")
    def route(self, state: PipelineState) -> Dict[str, Any]:
        val, model = self._load_eval_inputs(state)
        truth = TabulatedOracle(val)
        policy = self._policy(self.cfg.thresholds[0])
        rel_error = evaluate(model, val).overall
        strict = sweep(val.inputs, model, truth, self.cfg.thresholds, policy)
        banded = sweep(val.inputs, model, truth, self.cfg.thresholds, policy, tolerance=2.0 * rel_error)
        strict.to_frame().to_csv(self._path(SWEEP_FILE), index=False)
        return {
            "artifacts": {"sweep": SWEEP_FILE},
            "summary": {
                "val_rel_error": rel_error,
                "max_violation_rate": max(r.violation_rate for r in strict.rows),
                "max_violation_rate_outside_band": max(r.violation_rate for r in banded.rows),
            },
        }

    @_stage("ablation")
    def ablation(self, state: PipelineState) -> Dict[str, Any]:
        val, model = self._load_eval_inputs(state)
        result = branch_vs_predictor(
            val.inputs, model, TabulatedOracle(val), self.cfg.ablation_exit, self._policy(0.0)
        )
        result.to_frame().to_csv(self._path(ABLATION_FILE), index=False)
        summary = {f"ablation_{k}": v for k, v in result.summary().items()}
        return {"artifacts": {"ablation": ABLATION_FILE}, "summary": summary}

    @_stage("correlation")
    def correlation(self, state: PipelineState) -> Dict[str, Any]:
        val, model = self._load_eval_inputs(state)
        index = self.cfg.oracle.attribute_index
        policy = self._policy(self.cfg.correlation_at())
        try:
            rho: Optional[float] = difficulty_correlation(val.inputs, model, lambda x: x[index], policy)
        except DegenerateInputError as exc:
            logger.warning("correlation undefined: %s", exc)
            rho = None
        return {"summary": {"attribute_exit_spearman": rho}}

    @_stage("slope")
    def slope(self, state: PipelineState) -> Dict[str, Any]:
        frame = pd.read_csv(self._path(state["artifacts"]["sweep"]))
        try:
            value: Optional[float] = savings_slope(list(zip(frame["threshold"], frame["mean_flops"])))
        except DegenerateInputError as exc:
            logger.warning("savings slope undefined: %s", exc)
            value = None
        return {"summary": {"savings_slope": value}}

    @_stage("manifest")
    def manifest(self, state: PipelineState) -> Dict[str, Any]:
        entries = []
        for name, rel in sorted(state["artifacts"].items()):
            blob = self._path(rel).read_bytes()
            entries.append(
                {"name": name, "path": rel, "bytes": len(blob), "sha256": hashlib.sha256(blob).hexdigest()}
            )
        document = {"artifacts": entries, "seed": self.cfg.seed, "summary": state["summary"]}
        self._path(MANIFEST_FILE).write_text(json.dumps(document, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return {"summary": {}}

    def wants_heldout(self, state: PipelineState) -> str:
        return "heldout" if self.cfg.heldout_noise_vectors > 0 else "sweep"


def build_graph(run: ExperimentRun):
    graph_builder = StateGraph(PipelineState)

    graph_builder.add_node("simulate", run.simulate)
    graph_builder.add_node("train", run.fit)
    graph_builder.add_node("heldout", run.heldout)
    graph_builder.add_node("sweep", run.route)
    graph_builder.add_node("ablation", run.ablation)
    graph_builder.add_node("correlation", run.correlation)
    graph_builder.add_node("slope", run.slope)
    graph_builder.add_node("manifest", run.manifest)

    graph_builder.add_edge(START, "simulate")
    graph_builder.add_edge("simulate", "train")
    graph_builder.add_conditional_edges("train", run.wants_heldout, {"heldout": "heldout", "sweep": "sweep"})
    graph_builder.add_edge("heldout", "sweep")
    graph_builder.add_edge("sweep", "ablation")
    graph_builder.add_edge("ablation", "correlation")
    graph_builder.add_edge("correlation", "slope")
    graph_builder.add_edge("slope", "manifest")
    graph_builder.add_edge("manifest", END)

    return graph_builder.compile()


def run_pipeline(cfg: ExperimentConfig) -> Dict[str, Any]:
    """Run every stage and return the manifest document.

    Raises ``StageError`` naming the failed stage; nothing is left behind in
    the output folder in that case.
    """
    out = Path(cfg.output_dir)
    staging = out.parent / f".{out.name}.partial"
    if staging.exists():
        shutil.rmtree(staging)
    staging.mkdir(parents=True)

    try:
        graph = build_graph(ExperimentRun(cfg, staging))
        graph.invoke({"artifacts": {}, "summary": {}})
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise

    out.mkdir(parents=True, exist_ok=True)
    for name in ARTIFACT_FILES:
        stale = out / name
        if stale.is_file():
            logger.debug("removing stale %s", stale)
            stale.unlink()
    for produced in sorted(staging.iterdir()):
        shutil.move(str(produced), str(out / produced.name))
    staging.rmdir()
    manifest = json.loads((out / MANIFEST_FILE).read_text(encoding="utf-8"))
    logger.info("pipeline finished: %d artifacts in %s", len(manifest["artifacts"]), out)
    return manifest
