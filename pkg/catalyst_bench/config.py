"""
Environment configuration and logging setup for catalyst_bench.

Defaults for the benchmark harness come from environment variables, optionally
loaded from a `.env` file. Every variable is optional; present values are
validated before any experiment starts.

Variables:
    CATALYST_BENCH_LOG_FILE: Log file path ('' disables the file handler)
    CATALYST_BENCH_LOG_LEVEL: Logging level name
    CATALYST_BENCH_OUT_DIR: Default output directory for results
    CATALYST_BENCH_WORKERS: Default number of concurrent runs
    CATALYST_BENCH_INNER_CAP: Inner-loop budget cap, as a multiple of n
"""

import logging
import os

from dotenv import find_dotenv, load_dotenv
from pydantic import BaseModel, Field

load_dotenv(find_dotenv(usecwd=True))

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

_LEVELS = ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL')


class Settings(BaseModel):
    log_file: str = 'catalyst_bench.log'
    log_level: str = 'INFO'
    out_dir: str = 'results'
    workers: int = Field(default=1, ge=1)
    inner_cap: int = Field(default=100, ge=1)


def validate_env_variables():
    """
    Validate the catalyst_bench environment variables that are present.

    Raises:
        ValueError: If any variable holds a value of the wrong type or range.
            The message lists every offending variable.
    """
    problems = []

    level = os.getenv('CATALYST_BENCH_LOG_LEVEL')
    if level is not None and level.upper() not in _LEVELS:
        problems.append(f"CATALYST_BENCH_LOG_LEVEL={level!r} (expected one of {', '.join(_LEVELS)})")

    for var in ('CATALYST_BENCH_WORKERS', 'CATALYST_BENCH_INNER_CAP'):
        value = os.getenv(var)
        if value is None:
            continue
        try:
            if int(value) < 1:
                raise ValueError
        except ValueError:
            problems.append(f"{var}={value!r} (expected a positive integer)")

    if problems:
        raise ValueError(f"Invalid environment variables: {'; '.join(problems)}")


def load_settings():
    """Read the environment into a Settings object (validated first)."""
    validate_env_variables()
    return Settings(
        log_file=os.getenv('CATALYST_BENCH_LOG_FILE', 'catalyst_bench.log'),
        log_level=os.getenv('CATALYST_BENCH_LOG_LEVEL', 'INFO').upper(),
        out_dir=os.getenv('CATALYST_BENCH_OUT_DIR', 'results'),
        workers=int(os.getenv('CATALYST_BENCH_WORKERS', '1')),
        inner_cap=int(os.getenv('CATALYST_BENCH_INNER_CAP', '100')),
    )


def configure_logging(settings=None):
    """
    Configure root logging for command-line use.

    Library modules only create loggers; handlers are installed here, once,
    by the entry point.
    """
    settings = settings or load_settings()
    handlers = [logging.StreamHandler()]
    if settings.log_file:
        handlers.insert(0, logging.FileHandler(settings.log_file))

    logging.basicConfig(
        level=getattr(logging, settings.log_level),
        format=LOG_FORMAT,
        handlers=handlers,
        force=True,
    )
