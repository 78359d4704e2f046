"""Exception types shared across the package."""


class CMFlowError(Exception):
    """Base class for all package errors."""


class DegenerateGeometry(CMFlowError, ValueError):
    """Point set is collinear/coincident, so a rigid fit is not unique."""


class InvalidConfig(CMFlowError, ValueError):
    pass


class EmptyFrame(CMFlowError, ValueError):
    pass


class ZeroRangePoint(CMFlowError, ValueError):
    """A radar point sits exactly at the sensor origin (no radial direction)."""


class ShapeMismatch(CMFlowError, ValueError):
    pass


class DomainError(CMFlowError, ValueError):
    """log/sqrt evaluated outside their real domain."""


class NonScalarOutput(CMFlowError, ValueError):
    pass


class InvariantViolation(CMFlowError, ValueError):
    """Input data breaks a documented invariant (e.g. a label bundle rule)."""


class NonFiniteLoss(CMFlowError, FloatingPointError):
    pass
