import logging

import typer
from rich.console import Console
from rich.table import Table

from longrun.dependencies import (
    build_control,
    build_grid,
    build_kernel_family,
    build_model,
    build_reward,
    build_weight,
    write_resolved,
)
from longrun.exceptions import EXIT_NUMERICAL, EXIT_OK, handle_error
from longrun.models.audit import (
    audit,
    kernel_convergence_gap,
    tilted_variation_gap,
    verify_geometric_bound,
)
from longrun.utils.csv_utils import CsvHandler, format_value

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

exit_codes = {
    EXIT_OK: "All audited conditions pass",
    1: "The config or a flag is invalid",
    EXIT_NUMERICAL: "Some condition fails or a computation broke down",
}

console = Console()
err_console = Console(stderr=True)


def cmd_audit(ctx: typer.Context):
    """Certificate for the configured kernel family, one CSV row per condition."""
    run = ctx.obj
    try:
        config = run.load()
        out_dir = run.out_dir(config)
        model = build_model(config.model)
        control = build_control(config.control, model)
        grid = build_grid(config.grid, model)
        reward = build_reward(config.reward)
        family = build_kernel_family(
            config, model, control, grid, reward=reward, threads=run.threads
        )
        space = next(iter(family.kernels.values())).space
        V = build_weight(config.weight, space)

        logger.info(f"Auditing levels {family.levels}")
        certificate = audit(
            family, V, k=config.audit.k, fpv_steps=config.audit.fpv_steps
        )
        checks = certificate.checks()
        write_resolved(config, out_dir)
        CsvHandler.write_rows(
            out_dir / "certificate.csv",
            ["name", "value", "threshold", "pass"],
            [[c.name, c.value, c.threshold, c.passed] for c in checks],
        )

        top = family.kernels[family.levels[-1]]
        if certificate.rho < 1.0:
            report = verify_geometric_bound(
                top, V, config.audit.x_star, config.audit.n_max
            )
            CsvHandler.write_rows(
                out_dir / "geometric_bound.csv",
                ["n", "lhs", "rhs", "pass"],
                [[r.n, r.lhs, r.rhs, r.passed] for r in report.rows],
            )
        else:
            logger.warning("Skipping the geometric bound: rho is not below 1")

        if family.limit is not None:
            gaps = kernel_convergence_gap(family, V, config.audit.gap_horizon)
            CsvHandler.write_rows(
                out_dir / "kernel_gaps.csv",
                ["m", "step", "state", "gap"],
                [
                    [m, j + 1, space.labels[x], gaps.gaps[i, j, x]]
                    for i, m in enumerate(gaps.levels)
                    for j in range(gaps.gaps.shape[1])
                    for x in range(space.n)
                ],
            )
            if family.substeps is not None or family.blocks is not None:
                rows = []
                for alpha in config.alphas:
                    tilted = tilted_variation_gap(family, reward, control, alpha)
                    rows += [
                        [alpha, m, space.labels[x], gap[x]]
                        for m, gap in tilted.items()
                        for x in range(space.n)
                    ]
                CsvHandler.write_rows(
                    out_dir / "tilted_gaps.csv",
                    ["alpha", "m", "state", "gap"],
                    rows,
                )
    except Exception as e:
        code, message = handle_error(e)
        err_console.print(f"[red]Error:[/red] {message}")
        raise typer.Exit(code) from e

    table = Table(title="Ergodicity certificate")
    for column in ("condition", "value", "threshold", "pass"):
        table.add_column(column)
    for c in checks:
        table.add_row(
            c.name,
            format_value(c.value),
            format_value(c.threshold),
            "[green]pass" if c.passed else "[red]fail",
        )
    console.print(table)

    if not certificate.all_pass:
        raise typer.Exit(EXIT_NUMERICAL)
