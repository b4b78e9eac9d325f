"""Exception types; CLI exit codes hang off these."""


class OccMotionError(Exception):
    exit_code = 1


class ConfigError(OccMotionError, ValueError):
    exit_code = 1


class ContractError(OccMotionError, ValueError):
    exit_code = 1


class DimensionError(OccMotionError, ValueError):
    exit_code = 2


class DataError(OccMotionError, ValueError):
    exit_code = 2


class NumericError(OccMotionError, ArithmeticError):
    exit_code = 3


class DegenerateInputError(NumericError, ValueError):
    pass


class ProjectionError(DataError):
    pass
