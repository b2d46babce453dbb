"""Exception hierarchy shared by every module.

The CLI maps any EslongError to exit code 2 (invalid input or configuration);
unexpected exceptions are left to propagate as bugs.
"""


class EslongError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(EslongError):
    """Operand dimensions are incompatible."""


class ConfigError(EslongError):
    """A configuration value violates its invariants."""


class ContractError(EslongError):
    """An operation precondition was violated at call time."""


class InputError(EslongError):
    """Runtime input (token ids, weight values) is out of domain."""


class LengthError(EslongError):
    """A sequence exceeds the model's position capacity."""


class FormatError(EslongError):
    """A binary container is corrupt or has an unknown magic/version."""


class IngestionError(EslongError):
    """A data file (FASTA, annotations) failed validation."""


class OntologyError(EslongError):
    """An ontology graph is malformed (cycle, dangling parent, bad root)."""


class EvaluationError(EslongError):
    """Evaluation inputs are inconsistent (id mismatch, empty set)."""


class DataError(EslongError):
    """Embeddings and annotations disagree (ids or dimensions)."""
