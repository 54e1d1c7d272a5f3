"""Exception hierarchy shared by every module."""


class GroupPoisonError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(GroupPoisonError, ValueError):
    """Invalid configuration value; ``path`` names the offending field when known."""

    def __init__(self, message: str, path: str | None = None):
        self.path = path
        self.message = message
        super().__init__(f"{path}: {message}" if path else message)


class DomainError(GroupPoisonError, ValueError):
    """An operation was called outside its mathematical domain."""


class CraftingError(GroupPoisonError, RuntimeError):
    pass


class DefenseError(GroupPoisonError, RuntimeError):
    pass
