"""Exception types shared across the package."""


class ContractError(ValueError):
    """An API contract was violated (shape mismatch, wrong stage, bad component)."""


class ConfigError(ContractError):
    """A configuration value is unknown or inconsistent."""


class ParameterError(ValueError):
    """An operation parameter is outside its legal range."""


class ManifestParseError(ValueError):
    """A manifest line could not be parsed."""


class ManifestValidationError(ValueError):
    """A manifest record failed validation (missing file, dimension mismatch)."""


class EditError(ValueError):
    """An edge edit could not be applied (e.g. empty donor region)."""


class SelectionError(ValueError):
    """A region selection had nothing to select from."""


class NumericalError(RuntimeError):
    """A computation produced non-finite values."""


class ProtocolError(ValueError):
    """An evaluation protocol constraint was violated."""


class UndefinedScoreError(ValueError):
    """A score is undefined for the given inputs (e.g. single-class ground truth)."""
