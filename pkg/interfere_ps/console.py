"""Console output and logging setup."""

import logging

from rich.console import Console
from rich.logging import RichHandler

console = Console()
error_console = Console(stderr=True)

LOGGER_NAME = "interfere_ps"


def configure_logging(verbose: bool = False) -> logging.Logger:
    """Route the package logger through rich on stderr.

    Args:
        verbose: Log at DEBUG instead of WARNING.

    Returns:
        The package root logger.
    """
    logger = logging.getLogger(LOGGER_NAME)
    logger.setLevel(logging.DEBUG if verbose else logging.WARNING)
    if not any(isinstance(h, RichHandler) for h in logger.handlers):
        handler = RichHandler(console=error_console, show_path=False, rich_tracebacks=True)
        handler.setFormatter(logging.Formatter("%(message)s"))
        logger.addHandler(handler)
    logger.propagate = False
    return logger
