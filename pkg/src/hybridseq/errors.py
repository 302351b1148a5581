"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation does not hold."""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class UnsupportedArchitectureError(ConfigError):
    """The operation is not defined for this architecture kind."""


class TransferError(ValueError):
    """Parameters cannot be copied between the source and target model."""


class TrainingDivergedError(RuntimeError):
    """The training loss became non-finite."""


class FormatError(ValueError):
    """A file does not follow the expected on-disk layout."""
