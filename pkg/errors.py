"""
Eraser Error Types
One hierarchy for every failure the toolkit reports. Each error carries a stable
code, a description and an optional suggested fix, so the CLI and the proxy can
emit machine-readable error documents.
"""

from typing import Any, Dict, Optional


class EraserError(Exception):
    """Base class for all toolkit errors"""

    code = "ERASER_ERROR"
    description = "Unclassified toolkit failure"
    suggested_fix: Optional[str] = None

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_dict(self) -> Dict[str, Any]:
        doc: Dict[str, Any] = {
            "error": self.code,
            "message": self.message,
            "description": self.description,
            "details": {k: _jsonable(v) for k, v in self.details.items()},
        }
        if self.suggested_fix:
            doc["suggested_fix"] = self.suggested_fix
        return doc


def _jsonable(value: Any) -> Any:
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return str(value)


# ==================== PROBABILITY ALGEBRA ====================

class InvalidInputError(EraserError):
    code = "INVALID_INPUT"
    description = "Input values are not finite or not a valid distribution"


class ShapeError(EraserError):
    code = "SHAPE_MISMATCH"
    description = "Vector or matrix dimensions do not agree"


class NumericError(EraserError):
    code = "NUMERIC_ERROR"
    description = "A computation produced a non-finite value"


class NumericDivergenceError(NumericError):
    code = "NUMERIC_DIVERGENCE"
    description = "Training loss became NaN or infinite"
    suggested_fix = "Lower the learning rate or normalize the input features."

    def __init__(self, epoch: int, loss: float):
        super().__init__(f"Training diverged at epoch {epoch} (loss={loss})", epoch=epoch, loss=loss)
        self.epoch = epoch


class ModelLoadError(EraserError):
    code = "MODEL_LOAD_ERROR"
    description = "Model document is malformed, inconsistent or of an unsupported version"


# ==================== DATA ====================

class DatasetError(EraserError):
    code = "DATASET_ERROR"
    description = "Dataset is invalid"


class CsvFormatError(DatasetError):
    code = "CSV_FORMAT_ERROR"
    description = "A CSV row could not be parsed"

    def __init__(self, line: int, reason: str, path: Optional[str] = None):
        super().__init__(f"line {line}: {reason}", line=line, path=path)
        self.line = line


class SchemaError(DatasetError):
    code = "SCHEMA_ERROR"
    description = "Data does not conform to the task schema"


class GenerationError(DatasetError):
    code = "GENERATION_ERROR"
    description = "Synthetic data settings cannot be realized"
    suggested_fix = "Increase n or the feature dimension."


class SplitError(DatasetError):
    code = "SPLIT_ERROR"
    description = "Split would leave one side empty"


# ==================== ORACLE ====================

class ProtocolError(EraserError):
    code = "PROTOCOL_ERROR"
    description = "Oracle response violates the probability protocol"
    suggested_fix = "Use normalize_policy 'renormalize' for oracles emitting unnormalized scores."


class UpstreamUnavailableError(EraserError):
    code = "UPSTREAM_UNAVAILABLE"
    description = "Oracle could not be reached after all retries"
    suggested_fix = "Check the oracle URL and that the deployed model service is running."


# ==================== DISTILLATION / EVALUATION ====================

class ContrastCellError(EraserError):
    code = "CONTRAST_CELL_MISSING"
    description = "Calibration set lacks (target, bias) cells required for distillation"
    suggested_fix = "Enlarge the calibration split so every target class appears with every bias value."


class EvaluationError(EraserError):
    code = "EVALUATION_ERROR"
    description = "Metrics cannot be computed for this prediction set"


class ConfigError(EraserError):
    code = "CONFIG_ERROR"
    description = "Configuration is missing or invalid"


class IoError(EraserError):
    code = "IO_ERROR"
    description = "A file or directory could not be read or written"
    suggested_fix = "Check that input paths exist and the output directory is writable."

    @classmethod
    def from_os_error(cls, e: OSError) -> "IoError":
        reason = e.strerror or str(e)
        where = f": {e.filename}" if e.filename else ""
        return cls(f"{reason}{where}", path=e.filename, errno=e.errno)
