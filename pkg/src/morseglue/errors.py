"""Exception types shared across the package."""


class MorseGlueError(Exception):
    """Base class for all package errors."""


class UnknownSetup(MorseGlueError):
    pass


class OutOfAtlas(MorseGlueError):
    """A point landed outside every chart of the atlas."""


class ChartRadiusTooLarge(MorseGlueError):
    """Normal chart would leave its host parametrization patch."""


class EpsilonTooLarge(MorseGlueError):
    """Gauge constant exceeds a critical-value gap."""


class NoCapture(MorseGlueError):
    """Flow ran out of horizon without entering any capture ball.

    Carries the last integrated point (ambient coordinates).
    """

    def __init__(self, message, last_point=None):
        super().__init__(message)
        self.last_point = last_point


class TailsTooShort(MorseGlueError):
    """Trajectory tails do not reach the required depth inside normal charts."""


class SpectralGapAmbiguous(MorseGlueError):
    """Rank decision has no clear spectral gap; carries both candidate ranks."""

    def __init__(self, message, candidates=()):
        super().__init__(message)
        self.candidates = tuple(candidates)


class FredholmMismatch(MorseGlueError):
    """dim ker - dim coker disagrees with the index difference of the ends."""


class EmptyFiber(MorseGlueError):
    """Requested an obstruction fiber on a trajectory with zero cokernel."""


class WindowTooShort(MorseGlueError):
    """Asymptotic fit window contains too few usable samples."""


class NotTransverse(MorseGlueError):
    """A perturbation value on an obstructed component is zero."""


class UnstableCount(MorseGlueError):
    """Zero count changed under grid refinement; carries both answers."""

    def __init__(self, message, counts=()):
        super().__init__(message)
        self.counts = tuple(counts)


class MissingModuli(MorseGlueError):
    """No catalog entry with the demanded source/target."""


class InvalidCollection(MorseGlueError):
    """Sub-index collection is overlapping, non-contiguous or ill-chained."""


class IncomparableContractions(MorseGlueError):
    """Two index tuples with different full contractions were compared."""


class NotAComplex(MorseGlueError):
    """Boundary matrices do not square to zero."""


class IncompleteData(MorseGlueError):
    """Chain complex assembly is missing resolved moduli; carries the gaps."""

    def __init__(self, message, gaps=()):
        super().__init__(message)
        self.gaps = tuple(gaps)


class MissingSeries(MorseGlueError):
    """Plot data was requested that the report does not contain."""
