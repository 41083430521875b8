import logging

import typer
from rich.console import Console
from rich.table import Table

from longrun.dependencies import (
    build_control,
    build_family,
    build_grid,
    build_model,
    build_reward,
    build_weight,
    write_resolved,
)
from longrun.exceptions import EXIT_NUMERICAL, EXIT_OK, handle_error
from longrun.models.average import convergence_sweep, stability_sweep
from longrun.models.sde import DiscretizationLevel
from longrun.utils.csv_utils import CsvHandler, format_value

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

exit_codes = {
    EXIT_OK: "Sweep written",
    1: "The config or a flag is invalid",
    EXIT_NUMERICAL: "A path diverged or a kernel is not ergodic",
}

SWEEP_COLUMNS = ["sweep_var", "value", "std_error", "method", "m", "seed"]

console = Console()
err_console = Console(stderr=True)


def cmd_avg(ctx: typer.Context):
    run = ctx.obj
    try:
        config = run.load()
        out_dir = run.out_dir(config)
        model = build_model(config.model)
        reward = build_reward(config.reward)
        grid = build_grid(config.grid, model)
        weight = None if grid is None else build_weight(config.weight, grid)
        common = dict(
            seed=config.seed,
            method=config.method,
            horizon=config.horizon,
            replicates=config.replicates,
            grid=grid,
            samples_per_state=config.samples_per_state,
            weight=weight,
            threads=run.threads,
        )

        if config.sweep == "convergence":
            table = convergence_sweep(
                model,
                build_control(config.control, model),
                reward,
                config.levels,
                inner_substeps=config.inner_substeps,
                **common,
            )
        else:
            level = DiscretizationLevel(
                m=config.stability.level, inner_substeps=config.inner_substeps
            )
            table = stability_sweep(
                model, build_family(config, model), reward, level, **common
            )

        write_resolved(config, out_dir)
        CsvHandler.write_rows(
            out_dir / "avg_sweep.csv",
            SWEEP_COLUMNS,
            [
                [r.sweep_var, r.value, r.std_error, r.method, r.m, r.seed]
                for r in table.rows
            ],
        )
        gaps = table.measure_gaps or [float("nan")] * len(table.differences)
        CsvHandler.write_rows(
            out_dir / "avg_differences.csv",
            ["index", "difference", "error", "measure_gap"],
            [
                [i, d, e, g]
                for i, (d, e, g) in enumerate(
                    zip(table.differences, table.difference_errors, gaps)
                )
            ],
        )
    except Exception as e:
        code, message = handle_error(e)
        err_console.print(f"[red]Error:[/red] {message}")
        raise typer.Exit(code) from e

    summary = Table(title=f"Average reward ({config.sweep})")
    for column in ("sweep_var", "value", "std_error", "method"):
        summary.add_column(column)
    for r in table.rows:
        summary.add_row(
            format_value(r.sweep_var),
            format_value(r.value),
            format_value(r.std_error),
            r.method,
        )
    console.print(summary)
