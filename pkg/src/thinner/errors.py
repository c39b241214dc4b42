class ThinnerError(Exception):
    pass


class ShapeError(ThinnerError, ValueError):
    pass


class ModelFormatError(ThinnerError):
    pass


class VersionError(ModelFormatError):
    pass


class ChecksumError(ModelFormatError):
    pass


class DataFormatError(ThinnerError, ValueError):
    pass


class InfeasibleSelectionError(ThinnerError, ValueError):
    pass


class ConfigError(ThinnerError, ValueError):
    pass
