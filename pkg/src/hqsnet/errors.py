"""Exception hierarchy. Each family maps onto a CLI exit code."""


class HqsError(Exception):
    exit_code = 1


class ConfigError(HqsError, ValueError):
    """Invalid user configuration (bad flags, impossible mask budget, ...)."""

    exit_code = 2


class DataError(HqsError, ValueError):
    """Malformed or inconsistent input data."""

    exit_code = 3


class ValidationError(DataError):
    pass


class DegenerateInputError(DataError):
    pass


class ContainerError(DataError):
    """Array container manifest and blob disagree."""


class ContractError(HqsError, RuntimeError):
    """A pluggable component (e.g. a denoiser) broke its shape contract."""


class DivergenceError(HqsError, FloatingPointError):
    exit_code = 4
