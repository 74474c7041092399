"""Exception types shared across the package.

The CLI maps :class:`ConfigError` to exit code 2 and everything derived from
:class:`RuntimeFailure` to exit code 3.
"""


class ConfigError(ValueError):
    """Invalid configuration, spec, or input geometry."""

    def __init__(self, message, field=None, path=None):
        super().__init__(message)
        self.field = field
        self.path = path


class RuntimeFailure(RuntimeError):
    """A command failed after its inputs were validated."""


class TrainingDivergedError(RuntimeFailure):
    """A loss component became NaN or infinite.

    ``component`` names the offending term; ``checkpoint`` holds the last
    finite-epoch checkpoint if one had already been written.
    """

    def __init__(self, component, epoch=None, checkpoint=None):
        msg = f"non-finite loss component {component!r}"
        if epoch is not None:
            msg += f" at epoch {epoch}"
        super().__init__(msg)
        self.component = component
        self.epoch = epoch
        self.checkpoint = checkpoint
