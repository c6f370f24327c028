class PlatenetError(ValueError):
    """Base class for validation errors raised by the library.

    The CLI maps any subclass to exit code 2.
    """


class ShapeError(PlatenetError):
    pass


class DegenerateQuadError(PlatenetError):
    pass


class ArchiveError(PlatenetError):
    pass


class MissingStageError(PlatenetError):
    pass
