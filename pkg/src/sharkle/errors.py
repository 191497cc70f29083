"""Exception hierarchy shared by every sharkle subsystem."""


class SharkleError(Exception):
    pass


# pool
class InvalidConfig(SharkleError, ValueError):
    pass


class IoFailure(SharkleError, OSError):
    pass


class BadMagic(SharkleError):
    pass


class VersionMismatch(SharkleError):
    pass


class OutOfRange(SharkleError, IndexError):
    pass


class NotInPool(SharkleError, ValueError):
    pass


# broker
class PoolExhausted(SharkleError, MemoryError):
    pass


class SizeTooLarge(SharkleError, ValueError):
    pass


class NotOwner(SharkleError):
    pass


class DoubleFree(SharkleError):
    pass


class SimulatedCrash(BaseException):
    """Raised by fault-injection hooks. Derives from BaseException so that
    no ``except Exception`` cleanup path can run after the injected crash."""


# shuffle
class DuplicateMapWrite(SharkleError):
    pass


class StageIncomplete(SharkleError):
    pass


class BadReducerId(SharkleError, IndexError):
    pass


# store
class UnsortedInput(SharkleError, ValueError):
    pass


class DuplicateKey(SharkleError, ValueError):
    pass


class KeyAbsent(SharkleError, KeyError):
    pass


class WidthMismatch(SharkleError, ValueError):
    pass


class DuplicatePartitionId(SharkleError, ValueError):
    pass


# checkpoint
class DiskFull(SharkleError, OSError):
    pass


class ConcurrentWriter(SharkleError):
    pass


class NoCommonVersion(SharkleError):
    pass


class ChecksumMismatch(SharkleError):
    pass


class UnknownVersion(SharkleError, KeyError):
    pass


# dataflow
class NonPositivePotential(SharkleError, ValueError):
    pass
