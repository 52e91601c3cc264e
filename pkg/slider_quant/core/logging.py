from pathlib import Path
import typing as t
import logging

LogLevel = t.Literal["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]

LOG_LEVELS = {
    "DEBUG": logging.DEBUG,
    "INFO": logging.INFO,
    "WARNING": logging.WARNING,
    "ERROR": logging.ERROR,
    "CRITICAL": logging.CRITICAL
}

CONSOLE_FORMAT = "[%(levelname)s] %(message)s"
DEBUG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def setup_logging(level: LogLevel = "INFO", log_file: t.Optional[t.Union[str, Path]] = None) -> None:
    """
    Configure the root logger with console output at the specified level.
    Call this once at the start of a CLI run.

    :param level: Root logging level
    :param log_file: Optional file that receives a copy of every record in the debug format
    """
    log_level = LOG_LEVELS.get(level, logging.INFO)
    format_str = CONSOLE_FORMAT if log_level > logging.DEBUG else DEBUG_FORMAT

    root_logger = logging.getLogger()
    root_logger.setLevel(log_level)

    # Clear existing handlers
    for handler in root_logger.handlers[:]:
        root_logger.removeHandler(handler)

    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter(format_str))
    root_logger.addHandler(handler)

    if log_file is not None:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_file, mode="w", encoding="utf-8")
        file_handler.setFormatter(logging.Formatter(DEBUG_FORMAT))
        root_logger.addHandler(file_handler)

    logging.debug(f"Logging configured at {level}")


def get_logger(name: str, level: t.Optional[LogLevel] = None) -> logging.Logger:
    """
    Get a logger with the specified name and optional level.

    :param name: Logger name (typically __name__ for module loggers)
    :param level: Optional level override for this specific logger
    :returns: Logger instance
    """
    logger = logging.getLogger(name)
    if level:
        logger.setLevel(LOG_LEVELS[level])
    return logger
