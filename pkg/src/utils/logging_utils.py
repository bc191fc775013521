"""Logging utilities for the gang-of-bandits harness."""

import logging
import sys
from typing import Optional

LOGGER_NAME = "gob_bandits"


def setup_logger(name: str = LOGGER_NAME, level: int = logging.INFO) -> logging.Logger:
    """
    Set up a logger with the specified name and level.

    Calling it again for the same name only changes the level, so the CLI can
    re-level the shared logger without stacking handlers.

    Args:
        name: Name of the logger
        level: Logging level

    Returns:
        logging.Logger: Configured logger
    """
    logger = logging.getLogger(name)
    logger.setLevel(level)

    if logger.handlers:
        for handler in logger.handlers:
            handler.setLevel(level)
        return logger

    # Create console handler
    handler = logging.StreamHandler(sys.stdout)
    handler.setLevel(level)

    # Create formatter
    formatter = logging.Formatter(
        '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    handler.setFormatter(formatter)

    logger.addHandler(handler)
    logger.propagate = False

    return logger


# Create a default logger for the application
logger = setup_logger(LOGGER_NAME)


def log_exception(e: Exception, message: Optional[str] = None) -> None:
    """
    Log an exception with an optional message.

    Args:
        e: Exception to log
        message: Optional message to include
    """
    if message:
        logger.error(f"{message}: {type(e).__name__}: {str(e)}")
    else:
        logger.error(f"{type(e).__name__}: {str(e)}")
    logger.debug("Exception details:", exc_info=e)
