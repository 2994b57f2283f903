"""Exception types shared across the package."""


class InvalidConfigError(ValueError):
    """A configuration value violates its documented constraints."""


class InvalidInputError(ValueError):
    """An argument lies outside the domain of the operation."""


class ContractViolation(RuntimeError):
    """A caller broke an operation's precondition (e.g. unmasked position)."""
