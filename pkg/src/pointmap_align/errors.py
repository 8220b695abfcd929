"""Exception types raised across the package."""


class AlignError(Exception):
    """Base class for all errors raised by pointmap_align."""


class InvalidInputError(AlignError, ValueError):
    """Input arrays or arguments violate a documented precondition."""


class DegenerateInputError(AlignError, ValueError):
    """Input is well-formed but carries too little information to solve the problem."""


class InvalidStateError(AlignError, ValueError):
    """An optimization state violates its invariants (e.g. a non-positive scale)."""


class GraphError(AlignError):
    """The view graph cannot support alignment."""


class MissingReverseError(GraphError, InvalidInputError):
    """A pair prediction lacks its reverse-direction counterpart."""

    def __init__(self, missing, present):
        self.missing = tuple(missing)
        self.present = tuple(present)
        super().__init__(f"missing reverse prediction {self.missing} for pair {self.present}")


class DisconnectedGraphError(GraphError):
    """The view graph has more than one connected component."""

    def __init__(self, components):
        self.components = [sorted(c) for c in components]
        super().__init__(f"view graph is disconnected; components: {self.components}")


class DivergenceError(AlignError):
    """The optimizer produced a non-finite objective or gradient."""

    def __init__(self, step, what="objective"):
        self.step = step
        super().__init__(f"non-finite {what} at step {step}")
