"""
Error hierarchy shared by every service.
Each class carries the process exit code the CLI maps it to:
1 = usage/config, 2 = data/schema, 3 = numeric.
"""


class OmniFuseError(Exception):
    exit_code = 1


# Usage / configuration
class UsageError(OmniFuseError):
    exit_code = 1


class ConfigError(OmniFuseError):
    exit_code = 1


# Data / schema
class DataError(OmniFuseError):
    exit_code = 2


class SchemaError(DataError):
    pass


class FormatError(DataError):
    pass


class FitError(DataError):
    pass


class SplitError(DataError):
    pass


class RegionEmpty(DataError):
    pass


class FeatureUndefined(DataError):
    pass


class ArityError(DataError):
    pass


class MetricsError(DataError):
    pass


class SelectionEmpty(DataError):
    """Only ever recorded as a warning; combined_rank returns [] instead."""


# Numeric
class NumericError(OmniFuseError):
    exit_code = 3


class ShapeError(NumericError):
    pass


class AllMaskedRow(NumericError):
    pass


class DomainError(NumericError):
    pass
