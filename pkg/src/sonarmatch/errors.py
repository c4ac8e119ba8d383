"""Exception hierarchy shared by all pipeline stages."""


class SonarMatchError(Exception):
    """Base class for every error raised by this package."""


class PGMError(SonarMatchError):
    pass


class MalformedHeaderError(PGMError):
    pass


class PixelCountError(PGMError):
    pass


class SingularTransformError(SonarMatchError, ValueError):
    pass


class ImageTooSmallError(SonarMatchError, ValueError):
    pass


class BoundaryError(SonarMatchError):
    """A patch window does not fit inside its image."""


class DatasetError(SonarMatchError, ValueError):
    pass


class ModelFormatError(SonarMatchError):
    pass


class ShapeMismatchError(SonarMatchError, ValueError):
    pass


class InsufficientMatchesError(SonarMatchError):
    pass


class NoConsensusError(InsufficientMatchesError):
    pass


class NoKeypointsError(SonarMatchError):
    pass
