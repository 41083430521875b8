import logging
from typing import Annotated

import typer
from rich.console import Console
from rich.table import Table

from longrun.dependencies import (
    build_control,
    build_family,
    build_grid,
    build_model,
    build_reward,
    write_resolved,
)
from longrun.exceptions import EXIT_NUMERICAL, EXIT_OK, handle_error
from longrun.models.risk import (
    RiskParams,
    risk_convergence_sweep,
    risk_stability_sweep,
)
from longrun.models.sde import DiscretizationLevel
from longrun.utils.csv_utils import CsvHandler, format_value

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

exit_codes = {
    EXIT_OK: "Sweeps written, one file per alpha",
    1: "The config or a flag is invalid",
    EXIT_NUMERICAL: "The Poisson iteration stalled or the audit gate failed",
}

RISK_COLUMNS = [
    "sweep_var",
    "lambda",
    "span_w",
    "iterations",
    "residual",
    "oracle_lambda",
    "oracle_gap",
]

console = Console()
err_console = Console(stderr=True)


def risk_file_name(alpha: float) -> str:
    return f"risk_alpha_{alpha:g}.csv"


def differences_file_name(alpha: float) -> str:
    return f"risk_differences_alpha_{alpha:g}.csv"


def cmd_risk(
    ctx: typer.Context,
    alpha: Annotated[
        list[float] | None,
        typer.Option("--alpha", help="Risk factor; repeat for several"),
    ] = None,
    tol: Annotated[
        float | None, typer.Option("--tol", help="Span residual tolerance")
    ] = None,
    max_iters: Annotated[
        int | None, typer.Option("--max-iters", min=1)
    ] = None,
    x_ref: Annotated[
        int | None, typer.Option("--x-ref", min=0, help="Reference state")
    ] = None,
):
    run = ctx.obj
    try:
        config = run.load()
        flags = {"tolerance": tol, "max_iterations": max_iters, "x_ref": x_ref}
        risk = config.risk.model_copy(
            update={k: v for k, v in flags.items() if v is not None}
        )
        update = {"risk": risk}
        if alpha:
            update["alphas"] = list(alpha)
        # alpha and tolerance are checked again by RiskParams
        config = config.model_copy(update=update)
        out_dir = run.out_dir(config)
        model = build_model(config.model)
        reward = build_reward(config.reward)
        grid = build_grid(config.grid, model)

        tables = {}
        for a in config.alphas:
            params = RiskParams(
                alpha=a,
                tolerance=config.risk.tolerance,
                max_iterations=config.risk.max_iterations,
                x_ref=config.risk.x_ref,
            )
            if config.sweep == "convergence":
                tables[a] = risk_convergence_sweep(
                    model,
                    build_control(config.control, model),
                    reward,
                    params,
                    config.levels,
                    config.seed,
                    method=config.method,
                    grid=grid,
                    samples_per_state=config.samples_per_state,
                    inner_substeps=config.inner_substeps,
                    threads=run.threads,
                )
            else:
                level = DiscretizationLevel(
                    m=config.stability.level,
                    inner_substeps=config.inner_substeps,
                )
                tables[a] = risk_stability_sweep(
                    model,
                    build_family(config, model),
                    reward,
                    params,
                    level,
                    config.seed,
                    method=config.method,
                    grid=grid,
                    samples_per_state=config.samples_per_state,
                    k=config.audit.k,
                    threads=run.threads,
                )

        write_resolved(config, out_dir)
        for a, table in tables.items():
            CsvHandler.write_rows(
                out_dir / risk_file_name(a),
                RISK_COLUMNS,
                [
                    [
                        r.sweep_var,
                        r.lambda_,
                        r.span_w,
                        r.iterations,
                        r.residual,
                        r.oracle_lambda,
                        r.oracle_gap,
                    ]
                    for r in table.rows
                ],
            )
            CsvHandler.write_rows(
                out_dir / differences_file_name(a),
                ["index", "difference", "error"],
                [
                    [i, d, e]
                    for i, (d, e) in enumerate(
                        zip(table.differences, table.difference_errors)
                    )
                ],
            )
    except Exception as e:
        code, message = handle_error(e)
        err_console.print(f"[red]Error:[/red] {message}")
        raise typer.Exit(code) from e

    summary = Table(title=f"Risk-sensitive values ({config.sweep})")
    for column in ("alpha", "sweep_var", "lambda", "oracle_gap", "iterations"):
        summary.add_column(column)
    for a, table in tables.items():
        for r in table.rows:
            summary.add_row(
                format_value(a),
                format_value(r.sweep_var),
                format_value(r.lambda_),
                format_value(r.oracle_gap),
                str(r.iterations),
            )
    console.print(summary)
