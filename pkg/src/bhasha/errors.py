"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI:
    ConfigError -> 1, MissingPrerequisiteError -> 2,
    MissingArtifactError -> 3, NumericError -> 4.
"""


class BhashaError(Exception):
    """Base class for all package errors."""


class ShapeError(BhashaError):
    """Tensor shapes violate an operation's contract."""


class ContractError(BhashaError):
    """An operation precondition was violated by the caller."""


class NumericError(BhashaError):
    """Non-finite values or other numeric breakdown."""


class ConfigError(BhashaError):
    """Invalid configuration value or combination."""


class ParseError(BhashaError):
    """Malformed input file."""


class SchemaError(BhashaError):
    """Well-formed input violating a dataset/lexicon invariant."""


class PlanningError(BhashaError):
    """Batch planning cannot satisfy its balance guarantees."""


class MissingPrerequisiteError(BhashaError):
    """A required input (e.g. lexicon for TET) is absent."""


class MissingArtifactError(BhashaError):
    """A required artifact (e.g. checkpoint) is absent."""
