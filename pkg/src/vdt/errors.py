"""Exception hierarchy shared by every vdt module."""


class VDTError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(VDTError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(VDTError, ValueError):
    """A documented precondition of an operation does not hold."""


class ConfigError(VDTError, ValueError):
    """Invalid configuration values or config-file contents."""


class InputError(VDTError, ValueError):
    """Invalid data handed to a model, loss or evaluator."""


class NonFiniteError(VDTError, FloatingPointError):
    """A NaN or Inf appeared at an operation boundary."""


class ManifestParseError(VDTError, ValueError):
    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class CheckpointError(VDTError):
    """Base class for checkpoint loading failures."""


class MagicMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class TrainingDivergedError(VDTError, FloatingPointError):
    def __init__(self, component, step, detail=""):
        msg = f"non-finite {component} at step {step}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.component = component
        self.step = step
