"""Exception hierarchy for bmdp."""


class BmdpError(Exception):
    """Base class for all errors raised by this package."""


class InvalidMeasure(BmdpError, ValueError):
    pass


class ZeroAtomInKL(BmdpError, ValueError):
    """A zero weight was passed where the relative entropy needs a log-density."""


class SinkhornDiverged(BmdpError, RuntimeError):
    pass


class InnerSolveFailed(BmdpError, RuntimeError):
    pass


class SizeExceeded(BmdpError, ValueError):
    pass


class LevelMismatch(BmdpError, ValueError):
    pass


class NonFiniteState(BmdpError, FloatingPointError):
    pass


class ImplicitStepDiverged(BmdpError, RuntimeError):
    pass


class CalibrationFailed(BmdpError, RuntimeError):
    pass


class OracleDidNotConverge(BmdpError, RuntimeError):
    pass


class OracleTooLarge(BmdpError, ValueError):
    pass


class InsufficientData(BmdpError, ValueError):
    pass


class IncompatibleReports(BmdpError, ValueError):
    pass


class ConfigError(BmdpError):
    """Problem with an experiment configuration file."""


class ParseError(ConfigError):
    pass


class SchemaError(ConfigError):
    def __init__(self, key_path, message):
        self.key_path = key_path
        super().__init__(f"{key_path}: {message}")


class RangeError(ConfigError):
    def __init__(self, keys, message):
        self.keys = tuple(keys)
        super().__init__(f"{', '.join(self.keys)}: {message}")
