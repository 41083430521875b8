import logging
from pathlib import Path
from typing import Annotated

import typer
from rich.console import Console

from longrun.commands import audit, avg, manifest, risk
from longrun.dependencies import RunContext
from longrun.exceptions import handle_error
from longrun.utils.settings import Settings

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

app = typer.Typer(
    name="longrun",
    help="Long-run average and risk-sensitive functionals of controlled "
    "Markov processes.",
    no_args_is_help=True,
    add_completion=False,
)
console = Console(stderr=True)


@app.callback()
def main(
    ctx: typer.Context,
    config: Annotated[
        Path | None, typer.Option("--config", help="Experiment YAML file")
    ] = None,
    seed: Annotated[
        int | None, typer.Option("--seed", min=0, help="Overrides the config")
    ] = None,
    out: Annotated[
        Path | None, typer.Option("--out", help="Output directory")
    ] = None,
    threads: Annotated[
        int | None, typer.Option("--threads", min=1, help="Worker threads")
    ] = None,
):
    try:
        settings = Settings()
        logging.getLogger().setLevel(settings.get_log_level())
        threads = threads or settings.get_threads()
    except Exception as e:
        code, message = handle_error(e)
        console.print(f"[red]Error:[/red] {message}")
        raise typer.Exit(code) from e

    ctx.obj = RunContext(
        config_path=config, seed=seed, out=out, threads=threads
    )


app.command("audit", help="Audit the ergodicity conditions")(audit.cmd_audit)
app.command("avg", help="Average-reward sweep")(avg.cmd_avg)
app.command("risk", help="Risk-sensitive sweep")(risk.cmd_risk)
app.command("manifest", help="Write or verify the run manifest")(
    manifest.cmd_manifest
)


if __name__ == "__main__":
    app()
