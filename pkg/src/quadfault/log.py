"""Logging configuration for quadfault."""

from __future__ import annotations

import logging

from rich.logging import RichHandler


ROOT_LOGGER = "quadfault"


def get_logger(name: str) -> logging.Logger:
    """Get a logger for the given name.

    Args:
        name: The name of the logger, will be prefixed with 'quadfault.'

    Returns:
        A logger instance
    """
    return logging.getLogger(f"{ROOT_LOGGER}.{name}")


def setup_logging(*, verbose: bool = False) -> None:
    """Attach a rich handler to the package logger.

    Library modules never configure handlers themselves; only the CLI calls this.

    Args:
        verbose: Log DEBUG records instead of INFO
    """
    logger = logging.getLogger(ROOT_LOGGER)
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)
    if not any(isinstance(h, RichHandler) for h in logger.handlers):
        logger.addHandler(RichHandler(show_path=False, rich_tracebacks=True))
    logger.propagate = False
