"""Exception types shared across the package."""


class ContractError(ValueError):
    """An argument violates a documented precondition (shape, range, finiteness)."""


class CapacityError(RuntimeError):
    """The KV pool has no free frames left for the request."""


class DoubleReleaseError(RuntimeError):
    """A sequence handle was released twice."""
