import json
import logging
from datetime import datetime, timezone
from typing import Annotated

import typer
from rich.console import Console
from rich.table import Table

from longrun import __version__
from longrun.dependencies import RESOLVED_CONFIG, load_config
from longrun.exceptions import (
    EXIT_NUMERICAL,
    EXIT_OK,
    ConfigError,
    handle_error,
)
from longrun.models.config import RunManifest
from longrun.utils.csv_utils import CsvHandler

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"

exit_codes = {
    EXIT_OK: "Manifest written or verified",
    1: "Outputs or the manifest are missing",
    EXIT_NUMERICAL: "Checksum mismatch or missing file on verify",
}

console = Console()
err_console = Console(stderr=True)


def build_manifest(out_dir) -> RunManifest:
    resolved = out_dir / RESOLVED_CONFIG
    csvs = sorted(out_dir.glob("*.csv"))
    missing = [str(resolved)] if not resolved.is_file() else []
    if not csvs:
        missing.append(str(out_dir / "*.csv"))
    if missing:
        logger.error(f"Cannot write a manifest, missing: {missing}")
        raise ConfigError(f"missing outputs: {', '.join(missing)}")

    config = load_config(resolved)
    return RunManifest(
        config_hash=config.digest(),
        version=__version__,
        seed=config.seed,
        created_at=datetime.now(timezone.utc).isoformat(),
        files={path.name: CsvHandler.sha256(path) for path in csvs},
    )


def verify_manifest(out_dir) -> tuple[list[str], list[str]]:
    """Files whose checksum changed, and files that disappeared."""
    path = out_dir / MANIFEST_FILE
    if not path.is_file():
        logger.error(f"No manifest at {path}")
        raise ConfigError(f"no manifest at {path}")
    manifest = RunManifest.model_validate(json.loads(path.read_text()))
    mismatched, missing = [], []
    for name, digest in manifest.files.items():
        target = out_dir / name
        if not target.is_file():
            missing.append(name)
        elif CsvHandler.sha256(target) != digest:
            mismatched.append(name)
    return mismatched, missing


def cmd_manifest(
    ctx: typer.Context,
    verify: Annotated[
        bool, typer.Option("--verify", help="Check the existing manifest")
    ] = False,
):
    run = ctx.obj
    out_dir = run.out_dir()
    try:
        if verify:
            mismatched, missing = verify_manifest(out_dir)
        else:
            manifest = build_manifest(out_dir)
            (out_dir / MANIFEST_FILE).write_text(
                manifest.model_dump_json(indent=2) + "\n", encoding="utf-8"
            )
            logger.info(f"Wrote {out_dir / MANIFEST_FILE}")
    except Exception as e:
        code, message = handle_error(e)
        err_console.print(f"[red]Error:[/red] {message}")
        raise typer.Exit(code) from e

    if verify:
        if mismatched or missing:
            for name in mismatched:
                err_console.print(f"[red]checksum mismatch:[/red] {name}")
            for name in missing:
                err_console.print(f"[red]missing:[/red] {name}")
            raise typer.Exit(EXIT_NUMERICAL)
        console.print(f"[green]All files in {out_dir} match the manifest")
        return

    table = Table(title=f"Manifest for {out_dir}")
    table.add_column("file")
    table.add_column("sha256")
    for name, digest in manifest.files.items():
        table.add_row(name, digest)
    console.print(table)
