"""Exception types shared across the simulator."""


class ConfigError(ValueError):
    """A deployment or scenario configuration violates an invariant."""


class ScenarioError(ValueError):
    """A scenario file failed to parse or validate.

    ``line`` is set for syntax errors, ``field`` for semantic ones.
    """

    def __init__(self, message: str, *, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        prefix = ""
        if line is not None:
            prefix = f"line {line}: "
        elif field is not None:
            prefix = f"{field}: "
        super().__init__(prefix + message)


class UnrecoverableError(RuntimeError):
    """Recovery cannot proceed (no survivors, no healthy dense FFN group, no permitted plan)."""


class IntegrityError(RuntimeError):
    """A simulation invariant was violated; indicates a bug, never a recoverable condition."""


class OutOfBlocksError(RuntimeError):
    """The KV block pool is exhausted; surfaced to the scheduler, not to recovery."""


class RoutingError(ValueError):
    """A routing request cannot be satisfied (for example a catastrophic expert mask)."""
