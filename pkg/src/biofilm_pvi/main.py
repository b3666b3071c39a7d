#!/usr/bin/env python
"""
biofilm_pvi - Main Entry Point

Command-line interface for running builtin or config-file experiments,
convergence studies and the enumeration-oracle self-check.
"""

import logging
import sys
from pathlib import Path
from typing import Any, Dict, NoReturn, Optional

import click
from dotenv import load_dotenv
from rich.console import Console
from rich.progress import BarColumn, Progress, SpinnerColumn, TextColumn, TimeElapsedColumn
from rich.table import Table

from biofilm_pvi import __version__
from biofilm_pvi.analysis import convergence_study
from biofilm_pvi.config import Settings, merge_run_config, read_config_file
from biofilm_pvi.exceptions import BiofilmPVIError, RunFailedError
from biofilm_pvi.experiments import (
    builtin_experiment,
    builtin_study,
    default_catalogue,
    list_experiments,
)
from biofilm_pvi.output import CONVERGENCE_FILENAME, write_convergence_csv, write_run_outputs
from biofilm_pvi.oracle import run_oracle_suite
from biofilm_pvi.timeloop import Trajectory, free_boundary_activity, run
from biofilm_pvi.utils.logging_config import setup_logging
from biofilm_pvi.utils.validators import validate_overrides

logger = logging.getLogger("biofilm_pvi.main")
console = Console()


def fail(message: str, code: int = 1) -> NoReturn:
    console.print(f"[bold red]Error: {message}[/bold red]")
    sys.exit(code)


def check_overrides(overrides: Dict[str, Any]) -> None:
    ok, errors = validate_overrides(overrides)
    if not ok:
        for error in errors:
            console.print(f"[red]  - {error}[/red]")
        fail("invalid options", code=2)


def display_run_summary(trajectory: Trajectory) -> None:
    frame = trajectory.to_frame()
    activity = free_boundary_activity(trajectory)
    activation = trajectory.activation_time

    table = Table(title=f"Run summary: {trajectory.model_name}")
    table.add_column("Quantity", style="cyan")
    table.add_column("Value", style="yellow")
    table.add_row("mesh", trajectory.mesh.summary())
    table.add_row("steps", str(trajectory.completed_steps))
    table.add_row("dt", f"{trajectory.dt:.6g}")
    table.add_row("mean Newton iterations", f"{trajectory.mean_newton_iterations:.2f}")
    table.add_row("max Newton iterations", str(int(frame["newton_iters"].max())))
    table.add_row("activation time", "never" if activation is None else f"{activation:.6g}")
    table.add_row("final total B", f"{frame['total_B'].iloc[-1]:.6e}")
    table.add_row("final total N", f"{frame['total_N'].iloc[-1]:.6e}")
    trend = "plateau" if activity.plateaued else "growing"
    table.add_row("Σ m(D_n)", f"{activity.total:.6g} ({trend})")
    table.add_row("clamped nutrient values", str(trajectory.clamp_total))
    console.print(table)


def display_convergence(table_data) -> None:
    table = Table(title=f"Convergence: {table_data.experiment}")
    for column in ("h", "dt", "ERR1", "order", "ERR2", "order"):
        table.add_column(column, justify="right")
    for row in table_data.rows:
        table.add_row(
            f"{row.h:.4g}",
            f"{row.dt:.4g}",
            f"{row.err1:.4e}",
            "" if row.order1 is None else f"{row.order1:.4f}",
            f"{row.err2:.4e}",
            "" if row.order2 is None else f"{row.order2:.4f}",
        )
    console.print(table)


@click.group()
@click.version_option(__version__, prog_name="biofilm-pvi")
@click.option("--verbose", is_flag=True, help="Log every Newton iteration")
@click.pass_context
def cli(ctx: click.Context, verbose: bool) -> None:
    """Finite element solver for the constrained biofilm-nutrient system."""
    load_dotenv()
    settings = Settings()
    setup_logging(
        "DEBUG" if verbose else settings.log_level,
        settings.log_dir,
        console=Console(stderr=True),
    )
    ctx.obj = settings


@cli.command("list")
def list_command() -> None:
    """List the builtin experiments."""
    catalogue = default_catalogue()
    table = Table(title="Builtin experiments")
    table.add_column("Name", style="cyan")
    table.add_column("Study", justify="center")
    table.add_column("Description", style="yellow")
    for name, description in list_experiments():
        table.add_row(name, "yes" if catalogue.has_study(name) else "", description)
    console.print(table)


@cli.command("run")
@click.argument("experiment", required=False)
@click.option(
    "--config", "config_path", type=click.Path(dir_okay=False), help="Flat YAML run config"
)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), help="Output directory")
@click.option("--dt", type=float, help="Time step")
@click.option("--T", "T", type=float, help="Final time")
@click.option("--refinements", type=int, help="Uniform refinements of the base mesh")
@click.option("--mode", type=click.Choice(["lagged", "implicit"]), help="Reaction treatment")
@click.option("--lumped/--consistent", default=None, help="Mass matrix")
def run_command(
    experiment: Optional[str],
    config_path: Optional[str],
    out_dir: Optional[str],
    dt: Optional[float],
    T: Optional[float],
    refinements: Optional[int],
    mode: Optional[str],
    lumped: Optional[bool],
) -> None:
    """Run a builtin EXPERIMENT (or --config file) and write series.csv and VTK snapshots."""
    overrides = {"dt": dt, "T": T, "refinements": refinements, "mode": mode}
    check_overrides(overrides)
    if (experiment is None) == (config_path is None):
        fail("give exactly one of EXPERIMENT or --config", code=2)

    try:
        if config_path is not None:
            experiment, file_overrides = read_config_file(config_path)
            model, config = builtin_experiment(experiment)
            config = merge_run_config(config, file_overrides)
        else:
            model, config = builtin_experiment(experiment)
        config = config.with_overrides(**overrides, lumped_mass=lumped)
    except BiofilmPVIError as exc:
        fail(str(exc), code=2)

    out = Path(out_dir or Path("outputs") / experiment)
    console.print(
        f"[bold green]Running {experiment}[/bold green]: {config.mesh.describe()}, "
        f"dt={config.time_step:.6g}, T={config.T:g}, mode={config.mode}"
    )

    try:
        with Progress(
            SpinnerColumn(),
            TextColumn("[progress.description]{task.description}"),
            BarColumn(),
            TextColumn("{task.completed}/{task.total}"),
            TimeElapsedColumn(),
            console=console,
        ) as progress:
            task = progress.add_task("time stepping", total=config.n_steps)
            trajectory = run(
                model, config, progress=lambda step, total: progress.update(task, completed=step)
            )
    except RunFailedError as exc:
        written = write_run_outputs(exc.trajectory, out)
        console.print(f"[yellow]Partial results ({len(written)} files) saved to {out}[/yellow]")
        fail(str(exc))
    except BiofilmPVIError as exc:
        fail(str(exc))
    except Exception as exc:
        logger.error("Run failed: %s", exc, exc_info=True)
        fail(str(exc))

    written = write_run_outputs(trajectory, out)
    display_run_summary(trajectory)
    console.print(f"\n[bold green]{len(written)} files saved to: {out}[/bold green]\n")


@cli.command("converge")
@click.argument("experiment")
@click.option("--levels", type=int, help="Number of coarse levels")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), help="Output directory")
@click.option("--mode", type=click.Choice(["lagged", "implicit"]), help="Reaction treatment")
@click.pass_obj
def converge_command(
    settings: Settings,
    experiment: str,
    levels: Optional[int],
    out_dir: Optional[str],
    mode: Optional[str],
) -> None:
    """Convergence study of EXPERIMENT against a fine-grid surrogate; writes convergence.csv."""
    check_overrides({"levels": levels, "mode": mode})
    try:
        model, run_config, study = builtin_study(experiment)
        study = study.with_levels(levels)
        run_config = run_config.with_overrides(mode=mode)
    except BiofilmPVIError as exc:
        fail(str(exc), code=2)

    out = Path(out_dir or Path("outputs") / experiment)
    try:
        with console.status(f"[bold green]Convergence study {experiment}..."):
            table = convergence_study(
                model,
                study,
                run_config,
                max_workers=settings.worker_count(study.levels + 1),
                progress=lambda message: console.print(f"  {message}"),
            )
    except BiofilmPVIError as exc:
        partial = getattr(exc, "partial", None)
        if partial is not None and partial.rows:
            write_convergence_csv(partial, out / CONVERGENCE_FILENAME)
            display_convergence(partial)
        fail(str(exc))
    except Exception as exc:
        logger.error("Convergence study failed: %s", exc, exc_info=True)
        fail(str(exc))

    path = write_convergence_csv(table, out / CONVERGENCE_FILENAME)
    display_convergence(table)
    console.print(f"\n[bold green]Convergence table saved to: {path}[/bold green]\n")


@cli.command("oracle-check")
@click.option("--instances", type=int, default=20, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option(
    "--inject-sign-flip", is_flag=True, help="Negate the Newton multiplier (fault injection)"
)
def oracle_check_command(instances: int, seed: int, inject_sign_flip: bool) -> None:
    """Compare semismooth Newton with active-set enumeration on random small steps."""
    check_overrides({"instances": instances})
    try:
        results = run_oracle_suite(instances, seed, flip_multiplier_sign=inject_sign_flip)
    except BiofilmPVIError as exc:
        fail(str(exc))

    failed = [result for result in results if not result.passed]
    for result in failed:
        console.print(f"[red]{result.report}[/red]")
    if failed:
        fail(f"{len(failed)} of {instances} oracle checks disagree")
    console.print(f"[bold green]All {instances} oracle checks agree[/bold green]")


def main() -> None:
    """Main entry point for CLI"""
    cli(prog_name="biofilm-pvi")


if __name__ == "__main__":
    main()
