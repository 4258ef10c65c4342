"""Exception types; each carries the CLI exit code it maps to."""


class MeltGraphError(Exception):
    exit_code = 1


class ConfigError(MeltGraphError, ValueError):
    """Invalid model or layer spec, argument or configuration."""

    exit_code = 2


class DataContractError(MeltGraphError, ValueError):
    """Input data violates a contract, e.g. anomalous nodes in training data."""

    exit_code = 3


class NumericalError(MeltGraphError, ArithmeticError):
    """Non-finite values appeared during computation."""

    exit_code = 4
