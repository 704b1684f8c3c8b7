"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration, dataset spec, or operation preconditions."""


class ParseError(ValueError):
    """Malformed input file (CSV, config, checkpoint)."""


class ContractError(RuntimeError):
    """An internal invariant was violated (stale trace, empty context, ...)."""
