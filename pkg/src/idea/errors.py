"""Exception hierarchy shared by every module of the package."""


class IdeaError(Exception):
    pass


class InvalidInputError(IdeaError, ValueError):
    pass


class EmptyLibraryError(IdeaError):
    pass


class DegenerateProblemError(IdeaError):
    """Raised when the bridge Hessian stays singular after maximal jitter."""


class OptimizationError(IdeaError):
    """Raised when prompt optimization never produced a finite iterate."""


class AssetFormatError(IdeaError):
    pass


class UnsupportedVersionError(AssetFormatError):
    pass


class CorruptLibraryError(AssetFormatError):
    pass


class AssetParseError(AssetFormatError):
    pass


class ConfigError(IdeaError):
    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
