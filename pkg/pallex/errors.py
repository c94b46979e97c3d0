"""
Domain errors shared by all pallex modules.

Everything a user can trigger with bad input derives from PallexError so the
CLI can turn it into exit code 1 with the message unchanged.
"""


class PallexError(RuntimeError):
    pass


class ManifestError(PallexError):
    pass


class MissingEntryError(PallexError):
    def __init__(self, kind: str, key: str):
        super().__init__(f"missing {kind} entry: {key}")
        self.kind = kind
        self.key = key


class UnitGenError(PallexError):
    pass


class CatalogError(PallexError):
    pass


class SimulationError(PallexError):
    pass


class TraceError(PallexError):
    pass


class LifetimeError(PallexError):
    pass


class HandoffError(PallexError):
    pass


class AddressInUse(HandoffError):
    pass


class HandoffTimeout(HandoffError):
    def __init__(self, message: str, delivered: int = 0, missing=()):
        super().__init__(message)
        self.delivered = delivered
        self.missing = tuple(missing)


class FrameError(HandoffError):
    producer: str | None = None

    def with_producer(self, producer: str) -> "FrameError":
        err = type(self)(f"{producer}: {self}")
        err.producer = producer
        return err


class BadMagic(FrameError):
    pass


class BadVersion(FrameError):
    pass


class Truncated(FrameError):
    pass


class CrcMismatch(FrameError):
    pass


class TrailingData(FrameError):
    pass


class BadProducerId(FrameError):
    pass
