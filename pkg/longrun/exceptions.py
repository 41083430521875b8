import logging

from pydantic import ValidationError

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2


class LongrunError(Exception):
    def __init__(self, message: str, exit_code: int = EXIT_NUMERICAL):
        super().__init__(message)
        self.message = message
        self.exit_code = exit_code


class ConfigError(LongrunError):
    def __init__(self, message: str):
        super().__init__(message, exit_code=EXIT_CONFIG)


class NumericalError(LongrunError):
    def __init__(self, message: str):
        super().__init__(message, exit_code=EXIT_NUMERICAL)


def format_validation_error(exc: ValidationError) -> str:
    """One line per offending field, keyed by its dotted path."""
    lines = []
    for err in exc.errors():
        path = ".".join(str(part) for part in err["loc"]) or "<root>"
        lines.append(f"{path}: {err['msg']}")
    return "; ".join(lines)


def handle_error(exc: Exception) -> tuple[int, str]:
    """Map an exception raised by a command to (exit code, message)."""
    if isinstance(exc, ValidationError):
        return EXIT_CONFIG, f"invalid config: {format_validation_error(exc)}"
    if isinstance(exc, LongrunError):
        return exc.exit_code, exc.message
    if isinstance(exc, (FileNotFoundError, IsADirectoryError)):
        return EXIT_CONFIG, str(exc)

    logger.error(f"Unexpected error: {exc!r}")
    return EXIT_NUMERICAL, f"unexpected error: {exc}"
