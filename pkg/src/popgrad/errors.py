"""Exception types shared across the package."""


class PopgradError(Exception):
    pass


class ConfigError(PopgradError, ValueError):
    """Invalid configuration, shape mismatch or bad meta-parameter."""


class DataError(PopgradError):
    """Missing or malformed dataset files."""


class UsageError(PopgradError, ValueError):
    """A function was called outside its contract."""


class NumericDivergenceError(PopgradError, FloatingPointError):
    """A loss, gradient or update became non-finite.

    ``epoch``, ``batch`` and ``member`` are filled in by whichever layer knows
    them; any of them may be None.
    """

    def __init__(self, message, epoch=None, batch=None, member=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.member = member

    def to_dict(self):
        return {
            "kind": "numeric_divergence",
            "message": str(self.args[0]) if self.args else "",
            "epoch": self.epoch,
            "batch": self.batch,
            "member": self.member,
        }
