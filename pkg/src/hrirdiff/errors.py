"""Exception types shared across the package.

Every error raised on purpose by hrirdiff derives from HrirDiffError, so
callers (and the CLI) can tell contract/usage problems apart from genuine
bugs. The CLI maps ConfigurationError/SchemaError to exit code 2 and the
rest to exit code 1.
"""


class HrirDiffError(Exception):
    """Base class for all hrirdiff errors."""


class FormatError(HrirDiffError):
    """A binary or on-disk file does not match its documented format."""


class SchemaError(HrirDiffError):
    """Tabular or vector data has the wrong dimensions or columns."""


class ConfigurationError(HrirDiffError):
    """A configuration value is out of its valid range."""


class InsufficientDataError(HrirDiffError):
    """Not enough records to carry out the requested computation."""


class DegenerateFeatureError(HrirDiffError):
    """An anthropometric feature has zero variance across subjects."""

    def __init__(self, feature_index: int):
        self.feature_index = feature_index
        super().__init__(f"feature {feature_index} has zero variance across subjects")


class ShapeError(HrirDiffError):
    """Array shapes are inconsistent with what an operation requires."""


class NumericError(HrirDiffError):
    """A computation produced non-finite values."""


class SamplingDivergenceError(NumericError):
    """The reverse diffusion chain produced non-finite intermediates."""

    def __init__(self, step: int):
        self.step = step
        super().__init__(f"non-finite intermediate at reverse step {step}")


class ContractViolation(HrirDiffError):
    """A caller violated a documented precondition."""


class UndefinedItdError(HrirDiffError):
    """ITD is undefined because at least one channel is silent."""


class EmptySelectionError(HrirDiffError):
    """A selection (e.g. horizontal-plane directions) matched nothing."""


class ManifestConflictError(HrirDiffError):
    """Existing experiment outputs were produced with a different config."""


class DomainError(HrirDiffError):
    """An input value lies outside the mathematical domain of an operation."""
