"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: input/validation problems exit 2,
backend (remote service) problems exit 3.
"""

from __future__ import annotations


class QAPyramidError(Exception):
    """Base class for all toolkit errors."""


class InputError(QAPyramidError):
    """Invalid input data, file, or configuration."""


class UndefinedStatisticError(InputError):
    """A statistic is undefined for the given data (e.g. zero variance)."""


class BackendError(QAPyramidError):
    """A judgment or generation backend failed (network, HTTP, contract)."""


class ParseError(BackendError):
    """A backend reply could not be parsed; carries the raw reply."""

    def __init__(self, message: str, raw: str = ""):
        super().__init__(message)
        self.raw = raw
