"""
Shared utilities for mvp_rerank.

This module provides the common error base class, path handling helpers and
the worker-thread helpers used by modules that fan work out per passage or
per record.
"""

from __future__ import print_function

import os
from concurrent.futures import ThreadPoolExecutor

from typing import Callable, Iterable, List, Tuple, TypeVar

T = TypeVar("T")
R = TypeVar("R")

THREADS_ENV_VAR = "MVP_THREADS"


class MvpError(Exception):
    """Base class of every domain error raised by mvp_rerank."""

    def __init__(self, message, details=""):
        # type: (str, str) -> None
        self.message = message
        self.details = details
        super(MvpError, self).__init__(message)

    @property
    def reason(self):
        # type: () -> str
        """
        Single-line, machine-parseable description of the error.

        Returns:
            String of the form "<ErrorClass>: <message>".
        """
        text = "{}: {}".format(self.__class__.__name__, self.message)
        return " ".join(text.split())


class ConfigError(MvpError):
    """Exception raised for invalid configuration values or files."""


class PathError(MvpError):
    """Exception raised when an input or output path is unusable."""


def require_input_path(path):
    # type: (str) -> str
    """
    Normalized input path.

    Raises:
        PathError: If the file is missing or unreadable.
    """
    valid, error_msg = validate_input_path(path)
    if not valid:
        raise PathError(error_msg)
    return normalize_path(path)


def require_output_path(path):
    # type: (str) -> str
    """
    Normalized output path.

    Raises:
        PathError: If the file cannot be written.
    """
    valid, error_msg = validate_output_path(path)
    if not valid:
        raise PathError(error_msg)
    return normalize_path(path)


def normalize_path(path):
    # type: (str) -> str
    """
    Normalize a path for cross-platform compatibility.

    Args:
        path: The path to normalize.

    Returns:
        The normalized absolute path.
    """
    return os.path.normpath(os.path.abspath(path))


def validate_output_path(path):
    # type: (str) -> Tuple[bool, str]
    """
    Validate that the output path is writable.

    Args:
        path: The output file path to validate.

    Returns:
        Tuple of (valid, error_message). error_message is empty if valid.
    """
    path = normalize_path(path)

    directory = os.path.dirname(path)
    if not directory:
        directory = "."

    if not os.path.exists(directory):
        return False, "Directory '{}' does not exist".format(directory)

    if not os.access(directory, os.W_OK):
        return False, "Directory '{}' is not writable".format(directory)

    if os.path.exists(path) and not os.access(path, os.W_OK):
        return False, "File '{}' is not writable".format(path)

    return True, ""


def validate_input_path(path):
    # type: (str) -> Tuple[bool, str]
    """
    Validate that the input path exists and is a readable file.

    Args:
        path: The input file path to validate.

    Returns:
        Tuple of (valid, error_message). error_message is empty if valid.
    """
    path = normalize_path(path)
    if not os.path.isfile(path):
        return False, "File '{}' does not exist".format(path)
    if not os.access(path, os.R_OK):
        return False, "File '{}' is not readable".format(path)
    return True, ""


def worker_count():
    # type: () -> int
    """
    Number of worker threads allowed by the MVP_THREADS environment variable.

    Returns:
        Positive thread count, 1 when the variable is unset.

    Raises:
        ConfigError: If the variable is set to something other than a
            positive integer.
    """
    raw = os.environ.get(THREADS_ENV_VAR, "").strip()
    if not raw:
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError("{} must be a positive integer, got '{}'".format(
            THREADS_ENV_VAR, raw
        ))
    if value < 1:
        raise ConfigError("{} must be a positive integer, got {}".format(
            THREADS_ENV_VAR, value
        ))
    return value


def map_ordered(func, items, threads=None):
    # type: (Callable[[T], R], Iterable[T], int) -> List[R]
    """
    Apply func to every item, optionally on worker threads.

    Results are returned in input order whatever the thread count, and the
    first exception raised by any call is re-raised.

    Args:
        func: Function to apply.
        items: Inputs.
        threads: Worker thread cap; defaults to worker_count().

    Returns:
        List of results in input order.
    """
    items = list(items)
    if threads is None:
        threads = worker_count()
    if threads <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(threads, len(items))) as pool:
        return list(pool.map(func, items))
