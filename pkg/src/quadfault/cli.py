"""Main CLI application for quadfault."""

from __future__ import annotations

from contextlib import contextmanager
import json
from pathlib import Path
import sys
from typing import TYPE_CHECKING, Annotated

from rich.console import Console
from rich.table import Table
import typer

from quadfault import __version__
from quadfault.config import default_workers, load_experiment
from quadfault.dataio import load_dataset, save_dataset
from quadfault.exceptions import ConfigError, QuadFaultError
from quadfault.experiments import (
    fit_model,
    load_splits,
    model_inputs,
    prepare,
    run_ablation,
    run_scenario,
)
from quadfault.log import setup_logging
from quadfault.metrics import evaluate as evaluate_model
from quadfault.networks import load_model, save_model
from quadfault.reporting import build_table, load_bundle, write_bundle


if TYPE_CHECKING:
    from collections.abc import Iterator

    from quadfault.config import ExperimentConfig
    from quadfault.metrics import EvalReport
    from quadfault.pairing import WindowedDataset


app = typer.Typer(
    name="quadfault",
    help="Imbalanced fault diagnosis with quadruplet deep metric learning",
    no_args_is_help=True,
)
console = Console()
err_console = Console(stderr=True)

ConfigOption = Annotated[
    Path | None, typer.Option("--config", "-c", help="Experiment YAML file")
]
SetOption = Annotated[
    list[str] | None,
    typer.Option("--set", "-s", help="Override a config key, e.g. train.epochs=5"),
]
WorkersOption = Annotated[
    int | None,
    typer.Option(
        "--workers", "-j", help="Parallel cells (default: QUADFAULT_WORKERS or CPUs)"
    ),
]


def version_callback(value: bool) -> None:
    """Print version and exit."""
    if value:
        console.print(f"quadfault version: {__version__}")
        raise typer.Exit


@app.callback()
def main(
    version: Annotated[
        bool | None,
        typer.Option("--version", callback=version_callback, is_eager=True),
    ] = None,
    verbose: Annotated[
        bool, typer.Option("--verbose", "-v", help="Log every training step")
    ] = False,
) -> None:
    """Quadfault - LSTM fault diagnosis under class imbalance."""
    setup_logging(verbose=verbose)


@contextmanager
def _errors() -> Iterator[None]:
    """Turn library errors into a JSON line on stderr and exit code 1."""
    try:
        yield
    except QuadFaultError as e:
        payload = {"error": type(e).__name__, "message": str(e)}
        err_console.print(
            json.dumps(payload), markup=False, highlight=False, soft_wrap=True
        )
        raise typer.Exit(1) from e


def _load(config: Path | None, overrides: list[str] | None) -> ExperimentConfig:
    return load_experiment(config, overrides or [])


def _counts_table(title: str, parts: dict[str, WindowedDataset]) -> Table:
    table = Table(title=title)
    table.add_column("Split", style="cyan")
    table.add_column("Windows", justify="right")
    table.add_column("Per class", style="dim")
    table.add_column("Fingerprint", style="yellow")
    for name, ds in parts.items():
        counts = ", ".join(f"{c}: {n}" for c, n in ds.class_counts().items())
        table.add_row(name, str(len(ds)), counts, ds.fingerprint)
    return table


def _report_table(report: EvalReport, names: dict[int, str]) -> Table:
    table = Table(title="Evaluation")
    table.add_column("Class", style="cyan")
    table.add_column("Recall", justify="right")
    table.add_column("F1", justify="right")
    table.add_column("Support", justify="right", style="dim")
    for cls, metrics in sorted(report.per_class.items()):
        table.add_row(
            names.get(cls, str(cls)),
            f"{metrics.recall * 100:.2f}",
            f"{metrics.f1 * 100:.2f}",
            str(metrics.support),
        )
    table.add_row(
        "Macro", f"{report.macro_recall * 100:.2f}", f"{report.macro_f1 * 100:.2f}"
    )
    return table


@app.command()
def ingest(
    output: Annotated[Path, typer.Argument(help="Directory for train.npz and test.npz")],
    config: ConfigOption = None,
    overrides: SetOption = None,
) -> None:
    """Load and window the configured dataset into reusable containers."""
    with _errors():
        cfg = _load(config, overrides)
        splits = load_splits(cfg.dataset, seed=cfg.seed_base)
        output.mkdir(parents=True, exist_ok=True)
        save_dataset(splits.train, output / "train.npz")
        save_dataset(splits.test, output / "test.npz")
    console.print(_counts_table("Ingested", {"train": splits.train, "test": splits.test}))
    console.print(f"\n[bold]Written to:[/bold] {output}")


@app.command()
def train(
    output: Annotated[Path, typer.Argument(help="Model file to write (.npz)")],
    config: ConfigOption = None,
    overrides: SetOption = None,
    method: Annotated[
        str | None, typer.Option("--method", "-m", help="Method (default: first listed)")
    ] = None,
    repeat: Annotated[
        int, typer.Option("--repeat", help="Repeat index selecting seed and subset")
    ] = 0,
    checkpoint_dir: Annotated[
        Path | None, typer.Option("--checkpoint-dir", help="Write epoch checkpoints")
    ] = None,
    resume: Annotated[
        Path | None, typer.Option("--resume", help="Continue from a checkpoint")
    ] = None,
    log_file: Annotated[
        Path | None, typer.Option("--log-file", help="JSON-lines step log")
    ] = None,
) -> None:
    """Train one model on the scenario's imbalanced training split."""
    with _errors():
        if method is not None:
            overrides = [*(overrides or []), f"methods=[{method}]"]
        cfg = _load(config, overrides)
        selected = cfg.methods[0]
        if not 0 <= repeat < cfg.repeats:
            msg = f"repeat must lie in [0, {cfg.repeats}), got {repeat}"
            raise ConfigError(msg)
        prepared = prepare(cfg)
        train_cfg = cfg.train_config_for(selected, repeat)
        result = fit_model(
            prepared.imbalanced[repeat],
            train_cfg,
            standardize_inputs=cfg.dataset.standardize,
            validation_fraction=cfg.validation_fraction,
            checkpoint_dir=checkpoint_dir,
            resume=resume,
            log_path=log_file,
        )
        save_model(result.model, output, config_hash=result.config_hash)
    name = selected.display_name
    console.print(f"[green]✓[/green] Trained {name} for {result.epochs_run} epochs")
    if result.losses:
        console.print(f"  [dim]final loss {result.losses[-1]:.6f}[/dim]")
    console.print(f"[bold]Model:[/bold] {output} ({result.config_hash})")


@app.command()
def evaluate(
    model_path: Annotated[Path, typer.Argument(help="Model file written by train")],
    data: Annotated[
        Path | None, typer.Option("--data", help="Dataset container to evaluate on")
    ] = None,
    config: ConfigOption = None,
    overrides: SetOption = None,
    output: Annotated[
        Path | None, typer.Option("--output", "-o", help="Write the report as JSON")
    ] = None,
) -> None:
    """Diagnose a test split with a trained model and print recall and F1."""
    with _errors():
        model, digest = load_model(model_path)
        if data is not None:
            ds = load_dataset(data)
        else:
            cfg = _load(config, overrides)
            ds = load_splits(cfg.dataset, seed=cfg.seed_base).test
        report = evaluate_model(
            model,
            model_inputs(model, ds),
            normal_class=ds.label_map.get("normal"),
            metadata={"model_config_hash": digest},
        )
    names = {c: name for name, c in ds.label_map.items()}
    console.print(_report_table(report, names))
    if output is not None:
        output.write_text(json.dumps(report.to_dict(), indent=2) + "\n", "utf-8")
        console.print(f"\n[bold]Report:[/bold] {output}")


def _resolve_workers(workers: int | None) -> int:
    return workers if workers is not None else default_workers()


@app.command()
def scenario(
    config: ConfigOption = None,
    overrides: SetOption = None,
    output: Annotated[
        Path | None, typer.Option("--output", "-o", help="Bundle directory")
    ] = None,
    workers: WorkersOption = None,
) -> None:
    """Compare methods on one imbalance scenario over repeated seeds."""
    with _errors():
        cfg = _load(config, overrides)
        max_workers = _resolve_workers(workers)
        result = run_scenario(cfg, parallel=max_workers > 1, max_workers=max_workers)
        directory = write_bundle(result, output or Path(cfg.output_dir) / cfg.name)
    console.print(build_table(result))
    console.print(f"\n[bold]Bundle:[/bold] {directory}")
    if result.failures:
        for failure in result.failures:
            console.print(f"[red]✗[/red] {failure['key']}: {failure['error']}")
        sys.exit(1)


@app.command()
def ablate(
    config: ConfigOption = None,
    overrides: SetOption = None,
    output: Annotated[
        Path | None, typer.Option("--output", "-o", help="Bundle directory")
    ] = None,
    workers: WorkersOption = None,
) -> None:
    """Sweep loss presets and beta values for LSTM-QDM."""
    with _errors():
        cfg = _load(config, overrides)
        max_workers = _resolve_workers(workers)
        result = run_ablation(cfg, parallel=max_workers > 1, max_workers=max_workers)
        directory = write_bundle(
            result, output or Path(cfg.output_dir) / f"{cfg.name}-ablation"
        )
    console.print(build_table(result))
    console.print(f"\n[bold]Bundle:[/bold] {directory}")
    failed = [p for p in result.points if not p.success]
    if failed:
        console.print(f"[red]Failed cells: {len(failed)}[/red]")
        sys.exit(1)


@app.command()
def report(
    bundle: Annotated[Path, typer.Argument(help="Bundle directory or result.json")],
) -> None:
    """Print the table of a saved result bundle."""
    with _errors():
        result = load_bundle(bundle)
    console.print(build_table(result))
    console.print(f"\n[bold]Seeds:[/bold] {result.seeds}")
    for name, fingerprint in result.fingerprints.items():
        console.print(f"  [dim]{name}: {fingerprint}[/dim]")


if __name__ == "__main__":
    app()
