"""Exception types shared across the package."""


class VartexError(Exception):
    """Base class for every error raised by this package."""


# -- gridded data ------------------------------------------------------------

class ConstantChannel(VartexError):
    """A variable has (near-)zero variance, so it cannot be standardized."""


class IndivisibleGrid(VartexError):
    """Grid dimensions are not compatible with the requested split or patch."""


class BadMagic(VartexError):
    """File does not start with the expected magic bytes."""


class VersionMismatch(VartexError):
    """File/container version is not supported by this reader."""


class HeaderCorrupt(VartexError):
    """Header failed to parse or is missing a required field."""


class PayloadTruncated(VartexError):
    """Payload is shorter than the header declares."""

    def __init__(self, expected: int, actual: int, detail: str = ""):
        msg = f"payload truncated: expected {expected} bytes, got {actual}"
        if detail:
            msg = f"{detail} ({msg})"
        super().__init__(msg)
        self.expected = expected
        self.actual = actual


# -- numerics ----------------------------------------------------------------

class ShapeMismatch(VartexError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteInput(VartexError):
    """An operation received NaN or Inf where finite values are required."""


class HeadDivisibility(VartexError):
    """Attention width is not divisible by the number of heads."""


class RateOutOfRange(VartexError):
    """Dropout/drop-path rate outside [0, 1)."""


class VariableCountMismatch(VartexError):
    """Input variable count disagrees with the model configuration."""


# -- metrics -----------------------------------------------------------------

class EmptyLatitudes(VartexError):
    """Latitude vector is empty."""


class EmptySeries(VartexError):
    """Series contains no samples."""


class ZeroAnomalyVariance(VartexError):
    """Anomaly correlation is undefined: an anomaly field has zero variance."""


# -- training ----------------------------------------------------------------

class NonFiniteGradient(VartexError):
    """A gradient turned NaN/Inf during optimization."""


class NonFiniteLoss(VartexError):
    """The training loss turned NaN/Inf."""


class ConfigMismatch(VartexError):
    """A checkpoint was produced under a different configuration."""
