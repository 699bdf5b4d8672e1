"""Exception types shared across the toolkit."""


class GeopipeError(Exception):
    """Base class for all toolkit errors."""


class DuplicateName(GeopipeError):
    pass


class UnknownArgReference(GeopipeError):
    pass


class CycleDetected(GeopipeError):
    def __init__(self, cycle):
        self.cycle = list(cycle)
        super().__init__(f"cycle detected: {' -> '.join(self.cycle)}")


class UnassignedNode(GeopipeError):
    pass


class MissingShapeAttr(GeopipeError):
    pass


class InsufficientSamples(GeopipeError):
    pass


class DegenerateFit(GeopipeError):
    pass


class InvalidMicroBatchCount(GeopipeError):
    pass


class ZeroTime(GeopipeError):
    pass


class InvalidRatio(GeopipeError):
    pass


class EmptyVector(GeopipeError):
    pass


class IndexOutOfRange(GeopipeError):
    pass


class NoCommunication(GeopipeError):
    pass


class EmptyGraph(GeopipeError):
    pass


class InfeasibleMemory(GeopipeError):
    pass


class DisconnectedNetwork(GeopipeError):
    pass


class Deadlock(GeopipeError):
    def __init__(self, blocked):
        self.blocked = sorted(blocked)
        super().__init__(f"deadlock: blocked tasks {self.blocked}")


class ShapeMismatch(GeopipeError):
    pass


class MissingActivationCache(GeopipeError):
    pass


class NonFiniteLoss(GeopipeError):
    pass


class UnknownConsumer(GeopipeError):
    pass


class ScenarioSchemaError(GeopipeError):
    """Raised when a scenario file fails validation; names the offending field."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"scenario field '{field}': {message}")
