"""Exception types shared across the planner."""


class FairwayError(Exception):
    """Base class for all planner errors."""


class ValidationError(FairwayError):
    """Malformed input: bad polygon, bad config file, bad scenario."""


class OffLatticeError(FairwayError):
    """A pose could not be snapped onto the lattice within tolerance."""


class PlanInfeasibleError(FairwayError):
    """The lattice search exhausted the open set without reaching the goal."""


class PredictionHorizonError(FairwayError):
    """An obstacle prediction ends before a time the planner must evaluate."""


class CorridorInfeasibleError(FairwayError):
    """No sound convex corridor exists around a reference point.

    Carries the index of the offending trajectory node.
    """

    def __init__(self, node_index: int, message: str = ""):
        self.node_index = node_index
        super().__init__(message or f"no feasible corridor at node {node_index}")


class TranscriptionError(FairwayError):
    """The warm start violates the transcribed constraints.

    Carries the index of the offending trajectory node.
    """

    def __init__(self, node_index: int, message: str = ""):
        self.node_index = node_index
        super().__init__(message or f"warm start infeasible at node {node_index}")


class LibraryMismatchError(FairwayError):
    """A primitive library was built for a different ship model or lattice."""


class LibraryNotFoundError(FairwayError):
    """The primitive library file referenced by a scenario does not exist."""


class NumericBlowupError(FairwayError):
    """Integration or optimization produced non-finite values."""
