"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class SsmXbarError(Exception):
    exit_code = 4


class ConfigError(SsmXbarError, ValueError):
    exit_code = 2


class LayoutError(ConfigError):
    pass


class CapacityError(ConfigError):
    pass


class DataError(SsmXbarError):
    exit_code = 3


class IngestError(DataError):
    pass


class NumericDomainError(SsmXbarError, ValueError):
    exit_code = 4


class RangeError(NumericDomainError):
    pass


class TrainingDivergence(SsmXbarError, RuntimeError):
    exit_code = 4

    def __init__(self, message, epoch=None, step=None, report=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
        self.report = report


class StageError(SsmXbarError, RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 4)
