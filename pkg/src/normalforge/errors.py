"""Exception types shared across the package."""


class NormalForgeError(Exception):
    pass


class DegenerateNeighborhood(NormalForgeError):
    """Covariance of a neighborhood has rank < 2."""


class DegeneratePatch(NormalForgeError):
    """No non-collinear point triple could be drawn from a patch."""


class DegenerateTensor(NormalForgeError):
    pass


class DimensionMismatch(NormalForgeError):
    pass


class ShapeMismatch(NormalForgeError):
    pass


class ZeroQuaternion(NormalForgeError):
    pass


class ZeroVector(NormalForgeError):
    pass


class LengthMismatch(NormalForgeError):
    pass


class ConfigError(NormalForgeError):
    pass
