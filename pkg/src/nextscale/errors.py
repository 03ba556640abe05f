"""Exception taxonomy shared across the package.

Contract violations (bad shapes, bad arguments) raise ContractError.
Non-finite values where finite ones are required raise NumericError;
the CLI maps that to exit code 3.  Configuration problems raise
ConfigError (CLI exit code 2).
"""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class NumericError(RuntimeError):
    """A NaN or Inf showed up where only finite values are allowed."""


class VocabularyError(ContractError):
    """A prompt used a word outside the closed template vocabulary."""


class ConfigError(ValueError):
    """A run configuration is malformed or incomplete."""


class CheckpointError(RuntimeError):
    """Base class for checkpoint load failures."""


class CorruptCheckpointError(CheckpointError):
    """Checkpoint bytes are truncated or fail the integrity check."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written by an unsupported format version."""
