"""Exception hierarchy.

Every error carries a short machine-readable ``category`` which the CLI prints
as the first token of its single-line error report.
"""

from __future__ import annotations


class EssdError(Exception):
    category = "EssdError"


class ConfigError(EssdError):
    category = "ConfigError"


class MalformedRow(EssdError):
    category = "MalformedRow"

    def __init__(self, path, line: int, column: str, detail: str):
        self.path = str(path)
        self.line = line
        self.column = column
        super().__init__(f"{self.path}:{line}: column {column!r}: {detail}")


class IntegrityError(EssdError):
    category = "IntegrityError"


class EmptyDataset(EssdError):
    category = "EmptyDataset"


class UnknownCode(EssdError, KeyError):
    category = "UnknownCode"

    def __str__(self) -> str:
        return Exception.__str__(self)


class UnknownPatient(EssdError, KeyError):
    category = "UnknownPatient"

    def __str__(self) -> str:
        return Exception.__str__(self)


class EmptyCohort(EssdError):
    category = "EmptyCohort"


class NoControls(EssdError):
    category = "NoControls"


class EmptyPopulation(EssdError):
    category = "EmptyPopulation"


class InsufficientFollowUp(EssdError):
    category = "InsufficientFollowUp"


class SingleClassTraining(EssdError):
    category = "SingleClassTraining"


class TooFewRows(EssdError):
    category = "TooFewRows"


class LengthMismatch(EssdError, ValueError):
    category = "LengthMismatch"


class SingleClassScores(EssdError, ValueError):
    category = "SingleClassScores"


class NoPositives(EssdError, ValueError):
    category = "NoPositives"


class UnknownPreset(EssdError, KeyError):
    category = "UnknownPreset"

    def __str__(self) -> str:
        return Exception.__str__(self)
