"""Exception types shared across the package.

The CLI maps these onto its exit-code scheme: configuration problems exit 1,
file-format/IO problems exit 2, numerical failures exit 3.
"""


class SonotraceError(Exception):
    """Base class for all package errors."""


class ConfigError(SonotraceError):
    """Invalid or missing configuration (bad JSON schema, missing input file,
    out-of-range parameter)."""


class VolumeFormatError(SonotraceError):
    """Malformed or unsupported volume/image file content."""


class NumericalError(SonotraceError):
    """Base class for numerical failures."""


class SingularSystemError(NumericalError):
    """Wave system is singular or near-singular; coefficients are degenerate."""


class FitError(NumericalError):
    """Model fitting failed (ill-posed data or non-convergence)."""

    def __init__(self, message, final_loss=None):
        super().__init__(message)
        self.final_loss = final_loss


class RegistrationDivergence(NumericalError):
    """Line search could not find a descent step; carries the loss trace."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace if trace is not None else []
