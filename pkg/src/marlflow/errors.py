"""Shared exception types."""


class ConfigError(ValueError):
    """Run configuration is malformed or violates workflow invariants."""


class DeadlockError(RuntimeError):
    """Frontier is empty while the workflow is not done (misconfigured graph)."""


class ToolError(RuntimeError):
    """A tool invocation failed; the owning trajectory is marked failed."""


class RoutingMismatchError(ValueError):
    """A fragment was offered to a buffer owned by a different model."""


class BufferCapacityError(RuntimeError):
    """Model buffer is full; on-policy data must never be dropped silently."""


class DivergenceError(RuntimeError):
    """Non-finite loss or ratio during an update; parameters were rolled back."""
