"""Exception hierarchy shared by all gradcone modules."""


class GradconeError(Exception):
    """Base class; the CLI maps these to exit code 1."""


class GeometryError(GradconeError, ValueError):
    pass


class AngleUndefined(GradconeError, ValueError):
    pass


class AngleWrapError(GradconeError, ValueError):
    pass


class HypothesisError(GradconeError, ValueError):
    """A hypothesis of the cone theorem is violated."""


class ReflectionDiverged(GradconeError, RuntimeError):
    pass


class CalibrationError(GradconeError, ValueError):
    pass


class PopulationExplosion(GradconeError, RuntimeError):
    pass


class StabilityError(GradconeError, ValueError):
    pass


class SolverError(GradconeError, RuntimeError):
    pass


class PicardDiverged(SolverError):
    pass


class ConfigError(GradconeError, ValueError):
    pass
