"""Exception types raised across the package."""


class RejectedInputError(ValueError):
    """Input has the wrong shape, range or type for the operation."""


class NumericalFailureError(FloatingPointError):
    """A non-finite value appeared; ``where`` names the layer or loss term."""

    def __init__(self, where: str, message: str = "non-finite values"):
        super().__init__(f"{where}: {message}")
        self.where = where


class ImmutablePrototypeError(RuntimeError):
    pass


class IncompleteTaskError(RuntimeError):
    pass


class EmptyStoreError(LookupError):
    pass


class ProtocolViolationError(RuntimeError):
    """The class-incremental protocol was broken, e.g. a class reappears."""


class IngestionError(OSError):
    pass


class ConfigError(KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "config error"
