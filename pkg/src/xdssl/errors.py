"""Exception hierarchy shared by every module.

Each class carries the process exit code the CLI maps it to.
"""

from __future__ import annotations


class XdsslError(Exception):
    exit_code = 5


class ConfigError(XdsslError):
    exit_code = 2


class InvalidInputError(XdsslError, ValueError):
    exit_code = 3


class DataError(XdsslError):
    exit_code = 3


class UndefinedLossError(InvalidInputError):
    pass


class IntegrityError(XdsslError):
    exit_code = 4


class CheckpointParseError(IntegrityError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class TransferError(XdsslError):
    exit_code = 4
