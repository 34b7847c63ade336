"""Command line entry point: ``exitlab <verb>``."""

import logging
from pathlib import Path
from typing import Optional, Sequence

import click
import numpy as np
import pandas as pd
from pydantic import ValidationError

from exitlab import datasets, patch_store
from exitlab.config import DEFAULT_CONFIG, load_config
from exitlab.cost_model import ScalePolicy, cost_report
from exitlab.difficulty_sim import OracleConfig, QualityOracle, TabulatedOracle
from exitlab.errors import ArgumentError, ExitLabError
from exitlab.fixtures import DATA_DIR, load_fixture
from exitlab.patch_store import DbEntry, FeatureMap
from exitlab.pipeline import TRAIN_FILE, VAL_FILE, cost_table, run_cost_table, run_pipeline
from exitlab.predictor import Mlp, TrainConfig, evaluate, predictor_preset, train
from exitlab.router import RoutingPolicy, kde, parse_thresholds, sweep


class ExitLabGroup(click.Group):
    """Turns library errors into one-line CLI failures."""

    def invoke(self, ctx: click.Context):
        try:
            return super().invoke(ctx)
        except (ExitLabError, ValidationError) as exc:
            raise click.ClickException(f"❌ {exc}") from exc


def _status(message: str) -> None:
    click.echo(message, err=True)


def _emit(frame: pd.DataFrame, out: Optional[Path]) -> None:
    if out is None:
        click.echo(frame.to_csv(index=False), nl=False)
        return
    out.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out, index=False)
    _status(f"✅ wrote {len(frame)} rows to {out}")


def _floats(text: str) -> Sequence[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ArgumentError(f"expected comma-separated numbers, got {text!r}") from None


def _require_arrays(arrays, source: Path, *names: str) -> None:
    missing = [name for name in names if name not in arrays.files]
    if missing:
        raise ArgumentError(f"{source} lacks array(s) {', '.join(missing)}; found {sorted(arrays.files)}")


def _fixture_path(value: str) -> Path:
    bundled = DATA_DIR / f"{value}.arch"
    return bundled if bundled.exists() else Path(value)


config_option = click.option(
    "--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path),
    default=None, help="Experiment config JSON",
)
seed_option = click.option("--seed", type=int, default=None, help="Master seed")
out_option = click.option("--out", type=click.Path(path_type=Path), default=None, help="Output file or folder")


@click.group(cls=ExitLabGroup)
@click.option("--verbose", is_flag=True, help="Debug logging")
def main(verbose: bool):
    """Early-exit routing lab: costs, patch database, predictor and routing experiments."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )


@main.command()
@config_option
@click.option("--fixture", default=None, help="Fixture file or bundled name (oasis, megaportraits)")
@click.option("--scale-factors", default="1/2,1/3,1/4", show_default=True)
@click.option("--min-channels", type=int, default=64, show_default=True)
@out_option
def cost(config_path: Optional[Path], fixture: Optional[str], scale_factors: str, min_channels: int, out: Optional[Path]):
    """Per-exit FLOPs for each scale factor, plus the backbone."""
    if config_path is not None:
        frame = run_cost_table(load_config(config_path))
    elif fixture is not None:
        factors = [f.strip() for f in scale_factors.split(",") if f.strip()]
        frame = cost_table(_fixture_path(fixture), factors, min_channels)
    else:
        raise click.UsageError("give --config or --fixture")
    _emit(frame, out)


@main.group(cls=ExitLabGroup)
def db():
    """Guiding patch database."""


@db.command("build")
@click.option("--input", "source", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True,
              help="npz with 'keys' (n,K), 'values' (n,C,H,W) and optional 'labels' (n,)")
@click.option("--cap", type=int, required=True, help="Entries kept per class")
@click.option("--start", type=int, default=0, show_default=True, help="First FPS pick")
@click.option("--out", type=click.Path(path_type=Path), required=True)
def db_build(source: Path, cap: int, start: int, out: Path):
    """Deduplicate entries with farthest point sampling and save the database."""
    _status(f"🔄 building database from {source}")
    with np.load(source) as arrays:
        _require_arrays(arrays, source, "keys", "values")
        keys, values = arrays["keys"], arrays["values"]
        labels = arrays["labels"] if "labels" in arrays.files else None
    entries = [
        DbEntry(key=keys[i], value=FeatureMap(values[i]), class_label=None if labels is None else int(labels[i]))
        for i in range(len(keys))
    ]
    database = patch_store.build_database(entries, cap, start)
    patch_store.save_file(database, out)
    _status(f"✅ {len(database)} of {len(entries)} entries saved to {out}")


@db.command("query")
@click.option("--db", "db_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--keys", "keys_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True,
              help="npz with 'keys' (m,K) and optional 'labels' (m,)")
@out_option
def db_query(db_path: Path, keys_path: Path, out: Optional[Path]):
    """Nearest stored entry for every query key."""
    database = patch_store.load_file(db_path)
    with np.load(keys_path) as arrays:
        _require_arrays(arrays, keys_path, "keys")
        keys = np.atleast_2d(arrays["keys"])
        labels = arrays["labels"] if "labels" in arrays.files else None
    records = []
    for i, key in enumerate(keys):
        label = None if labels is None else int(labels[i])
        entry = patch_store.query_nearest(database, key, label)
        gap = entry.key.astype(np.float64) - key.astype(np.float64)
        records.append({"query": i, "class_label": entry.class_label, "squared_distance": float(gap @ gap)})
    _emit(pd.DataFrame.from_records(records), out)


@db.command("stats")
@click.option("--db", "db_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
def db_stats(db_path: Path):
    """Entry counts and storage footprint."""
    stats = patch_store.database_stats(patch_store.load_file(db_path))
    for name, value in stats.items():
        click.echo(f"{name}: {value}")


@main.group(cls=ExitLabGroup)
def sim():
    """Synthetic difficulty oracle."""


@sim.command("gen")
@config_option
@seed_option
@click.option("--capacities", default=None, help="Comma-separated exit capacities")
@click.option("--noise-sd", type=float, default=None)
@click.option("--link-scale", type=float, default=None)
@click.option("--input-dim", type=int, default=None)
@click.option("--conditions", type=int, default=None, help="Condition vectors")
@click.option("--noise-vectors", type=int, default=None, help="Fixed noise vectors")
@click.option("--val-fraction", type=float, default=None)
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), required=True, help="Output folder")
def sim_gen(
    config_path: Optional[Path],
    seed: Optional[int],
    capacities: Optional[str],
    noise_sd: Optional[float],
    link_scale: Optional[float],
    input_dim: Optional[int],
    conditions: Optional[int],
    noise_vectors: Optional[int],
    val_fraction: Optional[float],
    out: Path,
):
    """Write a train/validation split of (input, per-exit scores) rows."""
    cfg = load_config(config_path or DEFAULT_CONFIG).with_overrides(seed=seed)
    fields = cfg.oracle_config().model_dump()
    overrides = {
        "exit_capacities": None if capacities is None else tuple(_floats(capacities)),
        "noise_sd": noise_sd,
        "link_scale": link_scale,
        "input_dim": input_dim,
    }
    fields.update({k: v for k, v in overrides.items() if v is not None})
    if input_dim is not None:
        fields.update(difficulty_weights=None, condition_dim=None)
    oracle = QualityOracle(OracleConfig(**fields))

    _status(f"🔄 sampling oracle with capacities {list(oracle.config.exit_capacities)}")
    split = oracle.make_dataset(
        conditions or cfg.n_conditions,
        noise_vectors or cfg.n_noise_vectors,
        cfg.val_fraction if val_fraction is None else val_fraction,
    )
    out.mkdir(parents=True, exist_ok=True)
    datasets.save_file(split.train, out / TRAIN_FILE)
    datasets.save_file(split.val, out / VAL_FILE)
    _status(f"✅ {len(split.train)} train / {len(split.val)} val rows in {out}")


@main.group(cls=ExitLabGroup)
def predictor():
    """Exit quality predictor."""


@predictor.command("train")
@click.option("--data", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--hidden", default="64,32", show_default=True, help="Hidden layer widths")
@click.option("--loss", type=click.Choice(["mse", "mae"]), default="mse", show_default=True)
@click.option("--lr", type=float, default=0.01, show_default=True)
@click.option("--epochs", type=int, default=50, show_default=True)
@click.option("--batch-size", type=int, default=32, show_default=True)
@seed_option
@click.option("--out", type=click.Path(path_type=Path), required=True, help="Model file")
@click.option("--history", type=click.Path(path_type=Path), default=None, help="Per-epoch loss CSV")
def predictor_train(
    data: Path, hidden: str, loss: str, lr: float, epochs: int, batch_size: int,
    seed: Optional[int], out: Path, history: Optional[Path],
):
    """Fit a predictor on a dataset file."""
    dataset = datasets.load_file(data)
    widths = [int(w) for w in _floats(hidden)]
    seed = seed or 0
    model = Mlp.initialise(predictor_preset(dataset.input_dim, dataset.n_exits, widths), seed=seed)
    cfg = TrainConfig(loss=loss, learning_rate=lr, epochs=epochs, batch_size=batch_size, seed=seed)
    _status(f"🔄 training on {len(dataset)} rows for {epochs} epochs")
    result = train(model, dataset, cfg)
    result.model.save_file(out)
    if history is not None:
        result.to_frame().to_csv(history, index=False)
    _status(f"✅ final loss {result.history[-1]:.6g}, model saved to {out}")


@predictor.command("eval")
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--data", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@out_option
def predictor_eval(model_path: Path, data: Path, out: Optional[Path]):
    """Per-exit mean relative error."""
    report = evaluate(Mlp.load_file(model_path), datasets.load_file(data))
    _emit(report.to_frame(), out)


@main.group(cls=ExitLabGroup)
def route():
    """Threshold routing experiments."""


@route.command("sweep")
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--data", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True,
              help="Dataset whose recorded scores are the ground truth")
@click.option("--fixture", default="oasis", show_default=True)
@click.option("--scale-factor", default="1/4", show_default=True)
@click.option("--min-channels", type=int, default=64, show_default=True)
@click.option("--thresholds", default="0.02:0.2:0.02", show_default=True)
@click.option("--tolerance", type=float, default=0.0, show_default=True)
@click.option("--unit", type=float, default=1e9, show_default=True, help="FLOPs per cost unit")
@out_option
def route_sweep(
    model_path: Path, data: Path, fixture: str, scale_factor: str, min_channels: int,
    thresholds: str, tolerance: float, unit: float, out: Optional[Path],
):
    """Exit counts, cost and violation rate for every threshold."""
    graph = load_fixture(_fixture_path(fixture), ScalePolicy(scale_factor=scale_factor, min_channels=min_channels))
    values = parse_thresholds(thresholds)
    policy = RoutingPolicy.from_report(cost_report(graph), values[0], unit)
    dataset = datasets.load_file(data)
    report = sweep(dataset.inputs, Mlp.load_file(model_path), TabulatedOracle(dataset), values, policy, tolerance)
    _emit(report.to_frame(), out)


@route.command("kde")
@click.option("--samples", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True,
              help="CSV file holding the samples")
@click.option("--column", required=True, help="Column of the CSV to estimate")
@click.option("--bandwidth", type=float, default=0.3, show_default=True)
@click.option("--grid", default="0:1:0.01", show_default=True, help="start:stop:step or a list")
@out_option
def route_kde(samples: Path, column: str, bandwidth: float, grid: str, out: Optional[Path]):
    """Gaussian kernel density of one CSV column."""
    frame = pd.read_csv(samples)
    if column not in frame.columns:
        raise ArgumentError(f"{samples} has no column {column!r}")
    points = parse_thresholds(grid)
    density = kde(frame[column].to_numpy(dtype=np.float64), bandwidth, points)
    _emit(pd.DataFrame({"x": points, "density": density}), out)


@main.command()
@config_option
@seed_option
@out_option
def run(config_path: Optional[Path], seed: Optional[int], out: Optional[Path]):
    """Full experiment: simulate, train, sweep, ablation, correlation, savings slope."""
    cfg = load_config(config_path or DEFAULT_CONFIG)
    if out is None and config_path is None:
        out = Path("out")
    cfg = cfg.with_overrides(seed=seed, output_dir=out)
    _status(f"🔄 running pipeline into {cfg.output_dir}")
    manifest = run_pipeline(cfg)
    for entry in manifest["artifacts"]:
        _status(f"   {entry['path']}  {entry['sha256'][:12]}")
    for name, value in sorted(manifest["summary"].items()):
        _status(f"   {name} = {value}")
    _status(f"✅ {len(manifest['artifacts'])} artifacts written")


if __name__ == "__main__":
    main()
