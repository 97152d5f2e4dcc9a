"""
Logging configuration for pbns.

This module configures logging for the command line and the library, including
the run ID of the active command in every record.
"""

import logging
import sys

from pbns.utils.run_id import get_run_id

root_logger = logging.getLogger()

LOG_FORMAT = "%(asctime)s - %(name)s - [%(run_id)s] - %(levelname)s - %(message)s"


class RunFormatter(logging.Formatter):
    """
    Formatter that includes the run ID in log messages.
    """

    def format(self, record: logging.LogRecord) -> str:
        """
        Format the log record, adding the run ID if one is active.

        Args:
            record: The log record to format

        Returns:
            str: The formatted log message
        """
        record.run_id = get_run_id() or "-"
        return super().format(record)


def configure_logging(log_level: str = "INFO") -> None:
    """
    Configure logging for the process.

    Safe to call more than once; the pbns handler is installed a single time.

    Args:
        log_level: The log level to use (default: INFO)
    """
    level = getattr(logging, log_level.upper(), logging.INFO)
    root_logger.setLevel(level)

    for handler in root_logger.handlers:
        if getattr(handler, "_pbns_handler", False):
            handler.setLevel(level)
            return

    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setLevel(level)
    console_handler.setFormatter(RunFormatter(LOG_FORMAT))
    console_handler._pbns_handler = True  # type: ignore[attr-defined]
    root_logger.addHandler(console_handler)
