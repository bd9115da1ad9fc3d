"""Exception types shared across the package."""


class DpqError(Exception):
    """Base class for package errors."""


class ShapeError(DpqError, ValueError):
    """Operands have incompatible shapes for the requested op."""


class ContractError(DpqError, ValueError):
    """A caller violated an operation's precondition."""


class ConfigError(DpqError, ValueError):
    """Invalid or inconsistent configuration."""


class TrainingError(DpqError, RuntimeError):
    """Training diverged (non-finite loss)."""


class DetectorError(DpqError, ValueError):
    """Transition detector fed a non-finite loss."""


class ReconstructionError(DpqError, RuntimeError):
    """Block reconstruction diverged."""


class CalibrationError(DpqError, ValueError):
    """Calibration data missing or unusable."""


class DegenerateStepError(DpqError, ArithmeticError):
    """Two-step teacher target has a near-zero denominator."""


class SizeError(DpqError, ValueError):
    """Batch exceeds a size bound."""
