"""Exception types shared across the package."""


class DivergenceError(RuntimeError):
    """Raised when parameters or loss stop being finite during training.

    ``report`` carries a JSON-serializable description of the failure
    (see :func:`emrlab.regularizer.stability_report`).
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = dict(report or {})


class ConfigError(ValueError):
    """Invalid experiment configuration."""
