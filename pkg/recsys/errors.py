"""
recsys/errors.py

Exception hierarchy shared by the training pipeline, the CLI and the HTTP layer.
Routes map these to status codes; the CLI turns them into click errors.
"""
from __future__ import annotations

from typing import Iterable, Optional


class RecsysError(Exception):
    """Base class for every error raised on purpose by this package."""


class DataFormatError(RecsysError, ValueError):
    """A record in an input file could not be parsed."""

    def __init__(self, message: str, path: Optional[str] = None,
                 line_no: Optional[int] = None, token: Optional[str] = None):
        self.path = path
        self.line_no = line_no
        self.token = token
        where = ""
        if path is not None:
            where = f"{path}"
            if line_no is not None:
                where += f":{line_no}"
            where += ": "
        elif line_no is not None:
            where = f"line {line_no}: "
        super().__init__(where + message)


class UnknownSignalError(DataFormatError):
    """Signal token outside the closed set of SignalKind values."""


class ConfigError(RecsysError, ValueError):
    pass


class EmptyInputError(RecsysError, ValueError):
    pass


class UnknownItemError(RecsysError, KeyError):
    """One or more item ids could not be resolved."""

    def __init__(self, ids: Iterable[str], what: str = "item"):
        self.ids = sorted(set(ids))
        shown = ", ".join(self.ids[:20])
        more = f" (+{len(self.ids) - 20} more)" if len(self.ids) > 20 else ""
        super().__init__(f"unknown {what} id(s): {shown}{more}")

    def __str__(self) -> str:
        # KeyError quotes its argument; keep the message readable
        return self.args[0]


class MissingPostcodeError(RecsysError, ValueError):
    """Known ads that carry no postcode were passed where one is required."""

    def __init__(self, ids: Iterable[str]):
        self.ids = sorted(set(ids))
        shown = ", ".join(self.ids[:20])
        more = f" (+{len(self.ids) - 20} more)" if len(self.ids) > 20 else ""
        super().__init__(f"ad(s) without postcode: {shown}{more}")


class DimensionMismatchError(RecsysError, ValueError):
    pass


class NumericalError(RecsysError, ArithmeticError):
    pass


class NegativeSamplingError(RecsysError):
    pass


class SnapshotError(RecsysError):
    pass


class PipelineError(RecsysError):
    """A refresh stage failed; the previous snapshot stays current."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")
