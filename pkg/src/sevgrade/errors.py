class SevgradeError(Exception):
    """Base class for all user-facing errors raised by sevgrade."""


class ConfigError(SevgradeError):
    pass


class ManifestError(SevgradeError):
    def __init__(self, message, row=None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class LeakageError(SevgradeError):
    """A patient or sample crosses a boundary it must not cross."""


class LabelError(SevgradeError):
    """A diagnosis cannot be resolved from the grades available."""


class CapacityError(SevgradeError):
    pass


class GeometryError(SevgradeError):
    pass


class MetricUndefinedError(SevgradeError):
    pass


class MissingStageError(SevgradeError):
    def __init__(self, stage, path):
        self.stage = stage
        super().__init__(f"missing upstream artifacts for {stage} (expected {path}); run that stage first")


class ProviderError(SevgradeError):
    """Similarity provider failure. Safe to retry."""

    retryable = True


class TrainingError(SevgradeError):
    def __init__(self, message, snapshot=None):
        self.snapshot = snapshot or {}
        super().__init__(message)
