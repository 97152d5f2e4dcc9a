"""
Middleware for the command line.

This module provides the wrapper every command runs inside: it assigns the run
ID, configures logging and turns exceptions into exit codes.
"""

import logging
import sys
import traceback
from functools import wraps
from typing import Any, Callable, Optional

import click

from pbns.utils.config import load_environment, log_level
from pbns.utils.exceptions import PbnsError
from pbns.utils.logging_config import configure_logging
from pbns.utils.run_id import set_run_id

logger = logging.getLogger(__name__)


def handle_command_errors(fn: Callable[..., Any]) -> Callable[..., Any]:
    """
    Wrap a command so pbns errors become their exit codes.

    Args:
        fn: The command callback

    Returns:
        Callable: The wrapped callback
    """

    @wraps(fn)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return fn(*args, **kwargs)
        except PbnsError as error:
            logger.error("Command failed: %s - %s - %s", error.error_code, error.message, error.details)
            click.echo(f"error: {error.message}", err=True)
            sys.exit(error.exit_code)
        except click.exceptions.Exit:
            raise
        except click.ClickException:
            raise
        except Exception as error:
            logger.error("Unhandled exception: %s\n%s", str(error), traceback.format_exc())
            click.echo(f"error: unexpected failure: {error}", err=True)
            sys.exit(1)

    return wrapper


def start_run(level: Optional[str] = None, run_id: Optional[str] = None) -> str:
    """
    Prepare the process for a command: environment, logging and run ID.

    Args:
        level: Log level overriding ``LOG_LEVEL``
        run_id: Run ID to reuse, or None to generate one

    Returns:
        str: The active run ID
    """
    load_environment()
    configure_logging(level or log_level())
    run_id = set_run_id(run_id)
    logger.info("Run %s started", run_id)
    return run_id
