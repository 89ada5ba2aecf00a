"""Exception hierarchy shared by every module in the package."""


class FreqBiasError(Exception):
    """Base class for all package errors."""


class ShapeError(FreqBiasError, ValueError):
    pass


class ContractError(FreqBiasError, RuntimeError):
    """A precondition of an operation was violated by the caller."""


class SymmetryError(FreqBiasError, ValueError):
    """Inverse DFT produced a non-negligible imaginary part."""


class ConfigError(FreqBiasError, ValueError):
    pass


class FormatError(FreqBiasError, ValueError):
    pass


class IoError(FreqBiasError, OSError):
    pass


class ChecksumError(FreqBiasError, ValueError):
    pass


class VersionError(FreqBiasError, ValueError):
    pass


class TrainingError(FreqBiasError, RuntimeError):
    def __init__(self, message: str, epoch: int):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch
