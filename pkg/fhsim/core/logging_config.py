"""
Centralized logging configuration for fhsim.
Provides structured console logging with emoji prefixes and an optional plain-text log file.
"""

import logging
import os
import sys
from datetime import datetime
from pathlib import Path
from typing import Optional

ROOT_LOGGER_NAME = 'fhsim'


class EmojiFormatter(logging.Formatter):
    """Custom formatter that adds emoji prefixes for different log levels."""

    LEVEL_EMOJIS = {
        'DEBUG': '🔍',
        'INFO': '📝',
        'WARNING': '⚠️',
        'ERROR': '❌',
        'CRITICAL': '🚨'
    }

    def format(self, record):
        record.emoji = self.LEVEL_EMOJIS.get(record.levelname, '📝')
        return super().format(record)


def level_from_verbosity(verbosity: int) -> int:
    """
    Map a Django management command ``--verbosity`` value to a logging level.

    ``FHSIM_LOG_LEVEL`` in the environment wins over the verbosity flag.
    """
    override = os.environ.get('FHSIM_LOG_LEVEL')
    if override:
        level = logging.getLevelName(override.upper())
        if isinstance(level, int):
            return level
    if verbosity <= 0:
        return logging.WARNING
    if verbosity == 1:
        return logging.INFO
    return logging.DEBUG


def _console_handlers(logger: logging.Logger):
    return [h for h in logger.handlers if not isinstance(h, logging.FileHandler)]


def _file_handlers(logger: logging.Logger):
    return [h for h in logger.handlers if isinstance(h, logging.FileHandler)]


def setup_logging(
    level: int = logging.INFO,
    log_to_file: bool = False,
    log_dir: str = "logs"
) -> logging.Logger:
    """
    Set up the ``fhsim`` logger.

    Repeated calls never duplicate handlers; they only adjust the console level
    and attach the file handler if it was requested and is still missing.

    Args:
        level: Logging level for the console handler
        log_to_file: Whether to also log to ``<log_dir>/fhsim_YYYYMMDD.log``
        log_dir: Directory for log files

    Returns:
        Configured logger instance
    """
    logger = logging.getLogger(ROOT_LOGGER_NAME)

    consoles = _console_handlers(logger)
    if consoles:
        for handler in consoles:
            handler.setLevel(level)
    else:
        console_handler = logging.StreamHandler(sys.stdout)
        console_handler.setLevel(level)
        console_handler.setFormatter(EmojiFormatter('%(emoji)s %(name)s: %(message)s'))
        logger.addHandler(console_handler)

    if log_to_file and not _file_handlers(logger):
        try:
            log_path = Path(log_dir)
            log_path.mkdir(parents=True, exist_ok=True)

            timestamp = datetime.now().strftime('%Y%m%d')
            file_handler = logging.FileHandler(log_path / f'fhsim_{timestamp}.log')
            file_handler.setLevel(logging.DEBUG)
            file_handler.setFormatter(logging.Formatter(
                '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
            ))
            logger.addHandler(file_handler)
        except Exception as e:
            logger.warning(f"Could not set up file logging: {e}")

    # The file handler records DEBUG even when the console is quieter
    logger.setLevel(logging.DEBUG if _file_handlers(logger) else level)
    return logger


def get_logger(name: str) -> logging.Logger:
    """
    Get a logger for a specific module.

    Args:
        name: Logger name (typically __name__)

    Returns:
        Child logger of ``fhsim``
    """
    if name == ROOT_LOGGER_NAME or name.startswith(ROOT_LOGGER_NAME + '.'):
        return logging.getLogger(name)
    return logging.getLogger(f'{ROOT_LOGGER_NAME}.{name}')


def reset_logging(logger: Optional[logging.Logger] = None) -> None:
    """Detach and close every handler of the ``fhsim`` logger."""
    logger = logger or logging.getLogger(ROOT_LOGGER_NAME)
    for handler in logger.handlers[:]:
        logger.removeHandler(handler)
        handler.close()


# Create default logger instance
default_logger = setup_logging()
