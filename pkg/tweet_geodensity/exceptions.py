"""
Error types for the geolocation density system
Each family maps to one CLI exit code
"""


class GeoDensityError(Exception):
    """Base class for every error raised by the package"""

    exit_code = 2


class ConfigError(GeoDensityError):
    """Invalid run configuration or command-line usage"""

    exit_code = 1


class DataError(GeoDensityError):
    """Malformed or inconsistent input data"""

    exit_code = 2


class ShapeError(DataError, ValueError):
    """Tensor shapes that an operation cannot combine"""


class NumericalError(GeoDensityError):
    """Training or verification produced non-finite or out-of-tolerance numbers"""

    exit_code = 3

    def __init__(self, message: str, partial=None):
        super().__init__(message)
        # Whatever was salvaged before the failure (e.g. last good training result)
        self.partial = partial
