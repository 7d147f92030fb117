"""Exception hierarchy shared by every cdrl module."""


class CDRLError(Exception):
    """Base class for all errors raised by this package."""


class NotFound(CDRLError, FileNotFoundError):
    pass


class FormatError(CDRLError, ValueError):
    pass


class LayoutError(CDRLError, ValueError):
    pass


class SizeError(CDRLError, ValueError):
    pass


class ShapeError(CDRLError, ValueError):
    pass


class ParamError(CDRLError, ValueError):
    pass


class EmptyDataset(CDRLError, ValueError):
    pass


class EmptyDomain(CDRLError, ValueError):
    pass


class MissingModel(CDRLError, ValueError):
    pass


class ProvenanceError(CDRLError, ValueError):
    pass


class DegenerateLabels(CDRLError, ValueError):
    pass


class PackingError(CDRLError, ValueError):
    pass


class Collision(CDRLError, FileExistsError):
    pass


class TrainingDiverged(CDRLError, RuntimeError):
    """Raised when a loss becomes non-finite.

    ``checkpoint`` holds the path of the last checkpoint written while all
    losses were still finite (None if no checkpoint existed yet).
    """

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
