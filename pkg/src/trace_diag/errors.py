"""Exception hierarchy. ``exit_code`` is what the CLI returns for each family."""


class TraceDiagError(Exception):
    exit_code = 2


class ValidationError(TraceDiagError):
    """Bad configuration or malformed input files."""

    exit_code = 1


class ConfigError(ValidationError):
    pass


class FormatError(ValidationError):
    pass


class CompositionError(ValidationError):
    pass


class ComputationError(TraceDiagError):
    exit_code = 2


class DegenerateInputError(ComputationError):
    pass


class UndefinedCKAError(ComputationError):
    pass


class EmptyViewError(ComputationError):
    pass


class VerdictParseError(ValidationError):
    pass
