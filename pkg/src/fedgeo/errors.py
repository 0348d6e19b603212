"""Exception types raised across the package."""


class FedGeoError(Exception):
    """Base class for all package errors."""


class ConfigError(FedGeoError, ValueError):
    pass


class OutOfBounds(FedGeoError, ValueError):
    pass


class DimensionMismatch(FedGeoError, ValueError):
    pass


class ShapeMismatch(DimensionMismatch):
    pass


class DegenerateRow(FedGeoError, ValueError):
    pass


class ParseError(FedGeoError, ValueError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)


class EmptyFile(FedGeoError, ValueError):
    pass


class ClientTooSmall(FedGeoError, ValueError):
    pass


class DegenerateDataset(FedGeoError, ValueError):
    pass


class EmptyDataset(FedGeoError, ValueError):
    pass


class EmptyTestSet(EmptyDataset):
    pass


class InvalidLocationId(FedGeoError, IndexError):
    pass


class InvalidLayerIndex(FedGeoError, IndexError):
    pass
