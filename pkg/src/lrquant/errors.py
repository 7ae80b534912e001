"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class LrqError(Exception):
    exit_code = 1
    code = "error"


class ConfigError(LrqError):
    exit_code = 2
    code = "config"


class PlanError(ConfigError):
    code = "plan"


class RankError(ConfigError):
    code = "rank"


class FormatError(LrqError):
    exit_code = 3
    code = "format"


class DataError(LrqError):
    exit_code = 3
    code = "data"


class ShapeError(DataError):
    code = "shape"


class RangeError(DataError):
    code = "range"


class StatError(DataError):
    code = "stat"


class IoError(LrqError):
    exit_code = 3
    code = "io"


class NumericError(LrqError):
    exit_code = 4
    code = "numeric"


class AcceptanceError(LrqError):
    exit_code = 5
    code = "acceptance"
