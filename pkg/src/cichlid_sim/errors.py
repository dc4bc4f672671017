"""Exception hierarchy shared by every layer of the simulator."""


class SimError(Exception):
    """Base class for all simulator errors."""


# -- capability system -------------------------------------------------------

class CapError(SimError):
    pass


class InvalidSize(CapError):
    pass


class LookupFailed(CapError):
    pass


class DisallowedTransition(CapError):
    pass


class HasConflictingDescendants(CapError):
    pass


class HasDescendants(CapError):
    pass


class SlotExhausted(CapError):
    pass


class NotEmpty(CapError):
    pass


# -- kernel invocations ------------------------------------------------------

class InvocationError(CapError):
    """A kernel invocation was rejected.

    ``index`` is the position of the offending argument inside a batched
    call, or ``None`` when the failure is not tied to one entry.
    """

    def __init__(self, message: str = "", index: int | None = None):
        super().__init__(message)
        self.index = index


class RuleViolation(InvocationError):
    pass


class AlreadyMapped(InvocationError):
    pass


class EntryOccupied(InvocationError):
    pass


class RightsExceeded(InvocationError):
    pass


class InvalidEntry(InvocationError):
    pass


class NotMapped(InvocationError):
    pass


class WrongType(InvocationError):
    pass


class InvalidRoot(SimError):
    pass


class UnhandledFault(SimError):
    """The faulting process had no handler, or its handler did not fix the fault."""

    def __init__(self, fault, reason: str):
        super().__init__(f"{reason}: {fault}")
        self.fault = fault
        self.reason = reason


# -- allocators and runtime library ------------------------------------------

class OutOfMemory(SimError):
    pass


class InvalidAttr(SimError):
    pass


class StillMapped(SimError):
    pass


class OutOfVA(SimError):
    pass


class UnknownRegion(SimError):
    pass


class NoFrames(SimError):
    pass


class StoreFull(SimError):
    pass


class MachineFileError(SimError):
    pass
