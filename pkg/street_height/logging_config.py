"""
Street Height Estimation - Logging
structlog configuration and the per-run correlation context
"""

import hashlib
import logging
import sys
import time
import uuid
from typing import Any, Optional

import structlog


def configure_logging(level: str = "INFO", json_output: bool = False) -> None:
    """Configure structlog to write to stderr.

    Args:
        level: Standard logging level name.
        json_output: Render events as JSON lines instead of key/value text.
    """
    numeric_level = getattr(logging, level.upper(), logging.INFO)
    processors = [
        structlog.contextvars.merge_contextvars,
        structlog.processors.add_log_level,
        structlog.processors.TimeStamper(fmt="iso"),
    ]
    if json_output:
        processors += [structlog.processors.format_exc_info, structlog.processors.JSONRenderer()]
    else:
        processors.append(structlog.dev.ConsoleRenderer(colors=False))
    structlog.configure(
        processors=processors,
        wrapper_class=structlog.make_filtering_bound_logger(numeric_level),
        logger_factory=structlog.PrintLoggerFactory(file=sys.stderr),
        cache_logger_on_first_use=False,
    )


def get_logger(name: str) -> Any:
    return structlog.get_logger(name)


def run_id_for_seed(seed: Optional[int]) -> str:
    """Reproducible 8-character run id for a seed, random when seed is None"""
    if seed is None:
        return uuid.uuid4().hex[:8]
    return hashlib.sha1(f"street-height:{seed}".encode()).hexdigest()[:8]


class RunContext:
    """Correlation context for one CLI command or pipeline run"""

    def __init__(self, run_id: Optional[str] = None, component: str = "street_height"):
        self.run_id = run_id or uuid.uuid4().hex[:8]
        self.start_time = time.time()
        self.logger = structlog.get_logger(component).bind(run_id=self.run_id)

    def log_info(self, message: str, **kwargs):
        """Log info message with run ID"""
        self.logger.info(message, **kwargs)

    def log_warning(self, message: str, **kwargs):
        """Log warning message with run ID"""
        self.logger.warning(message, **kwargs)

    def log_error(self, message: str, **kwargs):
        """Log error message with run ID"""
        self.logger.error(message, **kwargs)

    def log_debug(self, message: str, **kwargs):
        """Log debug message with run ID"""
        self.logger.debug(message, **kwargs)

    def get_duration(self) -> float:
        """Get elapsed time since context creation"""
        return time.time() - self.start_time
