"""Exception hierarchy shared by every Device Tuning module"""

from typing import Optional


class DeviceTuningError(Exception):
    """Base class for all errors raised by this package"""


class DimensionError(DeviceTuningError, ValueError):
    """Operand shapes do not agree"""


class ConfigurationError(DeviceTuningError, ValueError):
    """Invalid configuration value"""

    def __init__(self, message: str, field: Optional[str] = None):
        super().__init__(message)
        self.field = field


class InputError(DeviceTuningError, ValueError):
    """Model input outside the configured vocabulary or length"""


class ContractError(DeviceTuningError, ValueError):
    """A caller broke an operation's precondition"""


class TaskNotFoundError(DeviceTuningError, KeyError):
    """Unknown task id"""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown task"


class WireFormatError(DeviceTuningError, ValueError):
    """Malformed compressed-representation message.

    Attributes:
        field: Name of the header field (or "payload") that failed validation
        offset: Byte offset of that field within the message
    """

    def __init__(self, message: str, field: str, offset: int):
        super().__init__(f"{message} (field={field}, offset={offset})")
        self.field = field
        self.offset = offset


class MagicError(WireFormatError):
    """Message does not start with the expected magic bytes"""


class VersionError(WireFormatError):
    """Unsupported message version"""


class UnsupportedDtypeError(WireFormatError):
    """Unknown payload dtype code"""


class TruncationError(WireFormatError):
    """Declared lengths disagree with the dims or with the bytes actually present"""


class TrainingDivergedError(DeviceTuningError, RuntimeError):
    """A task loss became NaN or infinite during training"""

    def __init__(self, step: int, task_id: str, loss: float):
        super().__init__(
            f"training diverged at step {step}: loss for task '{task_id}' is {loss}"
        )
        self.step = step
        self.task_id = task_id
        self.loss = loss
