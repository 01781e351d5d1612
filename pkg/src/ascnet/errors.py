"""Exception hierarchy shared across the package."""


class ASCNetError(Exception):
    pass


class ShapeMismatch(ASCNetError, ValueError):
    pass


# wfdb ingestion
class MalformedHeader(ASCNetError, ValueError):
    pass


class UnsupportedFormat(ASCNetError, ValueError):
    pass


class TruncatedFile(ASCNetError, ValueError):
    pass


class ZeroGain(ASCNetError, ValueError):
    pass


class ChannelOutOfRange(ASCNetError, IndexError):
    pass


# signal pipeline
class SignalTooShort(ASCNetError, ValueError):
    pass


class ZeroPowerClean(ASCNetError, ValueError):
    pass


class ZeroPowerNoise(ASCNetError, ValueError):
    pass


class LengthMismatch(ASCNetError, ValueError):
    pass


class InsufficientRecords(ASCNetError, ValueError):
    pass


# tfr
class BadWindow(ASCNetError, ValueError):
    pass


class EmptyInput(ASCNetError, ValueError):
    pass


# autograd
class NonScalarLoss(ASCNetError, ValueError):
    pass


class TapeConsumed(ASCNetError, RuntimeError):
    pass


class DegenerateBatch(ASCNetError, ValueError):
    pass


class NonFiniteValue(ASCNetError, FloatingPointError):
    pass


# model / trainer
class InvalidConfig(ASCNetError, ValueError):
    pass


class ConfigMismatch(ASCNetError, ValueError):
    pass


class ResolutionMismatch(ASCNetError, ValueError):
    pass


class EmptyDataset(ASCNetError, ValueError):
    pass


class Divergence(ASCNetError, FloatingPointError):
    def __init__(self, step, value):
        super().__init__(f"loss became non-finite ({value}) at step {step}")
        self.step = step
        self.value = value


class VersionMismatch(ASCNetError, ValueError):
    pass


class CorruptFile(ASCNetError, ValueError):
    pass
