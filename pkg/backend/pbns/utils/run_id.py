"""
Run ID tracking utilities.

Every command invocation gets a run ID that is attached to log records, to the
run manifest and to checkpoint headers, so outputs can be correlated with the
log lines that produced them.
"""

import contextvars
import logging
import uuid
from typing import Optional

logger = logging.getLogger(__name__)

_current_run_id: contextvars.ContextVar[Optional[str]] = contextvars.ContextVar("pbns_run_id", default=None)


def generate_run_id() -> str:
    """
    Generate a unique run ID.

    Returns:
        str: A unique run ID
    """
    return uuid.uuid4().hex[:12]


def get_run_id() -> Optional[str]:
    """
    Get the current run ID.

    Returns:
        Optional[str]: The current run ID, or None if no run is active
    """
    return _current_run_id.get()


def set_run_id(run_id: Optional[str] = None) -> str:
    """
    Set the run ID for the current context.

    Args:
        run_id: The run ID to set, or None to generate a new one

    Returns:
        str: The run ID that was set
    """
    if run_id is None:
        run_id = generate_run_id()
    _current_run_id.set(run_id)
    return run_id
