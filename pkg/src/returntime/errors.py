"""Exception types shared across the package, mapped to CLI exit codes."""

from __future__ import annotations


class ReturnTimeError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(ReturnTimeError):
    """Invalid run configuration or generator parameters."""

    exit_code = 2


class ValidationError(ReturnTimeError):
    """Input data violates a documented invariant."""

    exit_code = 2


class DataError(ReturnTimeError):
    """Dataset is structurally valid but unusable for the requested operation."""

    exit_code = 2


class DataModelMismatchError(ReturnTimeError):
    """Model artifact and dataset disagree (schema, windows, or missing files)."""

    exit_code = 3


class NumericalError(ReturnTimeError):
    """Numerical failure: overflow guard tripped, divergence, or non-finite values."""

    exit_code = 4


class QuadratureError(NumericalError):
    """Adaptive quadrature failed to reach the requested tolerance."""
