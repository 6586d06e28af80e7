"""Exception hierarchy shared by every stage of the pipeline."""


class FMMError(Exception):
    """Base class; ``code`` is the machine-readable tag used by the CLI."""

    code = "fmm_error"

    def to_record(self):
        return {"error": self.code, "message": str(self)}


class ConfigurationError(FMMError, ValueError):
    code = "configuration_error"


class ContractViolation(FMMError, ValueError):
    code = "contract_violation"


class NumericError(FMMError, FloatingPointError):
    code = "numeric_error"

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class TrainingError(FMMError, RuntimeError):
    code = "training_error"

    def __init__(self, message, epoch=None, step=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step


class CalibrationError(FMMError, ValueError):
    code = "calibration_error"


class UndefinedNormalizerError(FMMError, ZeroDivisionError):
    code = "undefined_normalizer"


class DependencyError(FMMError, FileNotFoundError):
    code = "dependency_error"

    def __init__(self, message, producer=None):
        super().__init__(message)
        self.producer = producer

    def to_record(self):
        record = super().to_record()
        record["producer"] = self.producer
        return record


class ConfigHashMismatch(FMMError, ValueError):
    code = "config_hash_mismatch"
