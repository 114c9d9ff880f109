"""Exception hierarchy shared by every layer of the engine."""


class SmpcError(Exception):
    """Base class for all errors raised by this package."""


class RangeError(SmpcError, ValueError):
    """A value does not fit the fixed-point range or a parameter is out of range."""


class ShapeMismatch(SmpcError, ValueError):
    pass


class MissingShare(SmpcError):
    pass


class ProtocolError(SmpcError):
    """Malformed frame, unknown message type or out-of-order message."""


class HandshakeMismatch(ProtocolError):
    pass


class ConnectTimeout(SmpcError, TimeoutError):
    pass


class ChannelClosed(SmpcError):
    pass


class TripleExhausted(SmpcError):
    pass


class BoundViolation(SmpcError):
    """A debug-mode check found a secret outside its declared public bound."""


class MalformedPlan(SmpcError, ValueError):
    pass


class Underdetermined(SmpcError):
    """The revealed equations do not pin down the other parties' inputs."""


class AuditFailure(SmpcError):
    def __init__(self, report):
        super().__init__(f"plan failed audit: {'; '.join(report.reasons)}")
        self.report = report


class ParseError(SmpcError, ValueError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class DimensionMismatch(ParseError):
    pass


class ZeroVector(SmpcError, ArithmeticError):
    pass


class ZeroVariance(SmpcError, ArithmeticError):
    pass


class NotSymmetric(SmpcError, ValueError):
    pass


class ChildFailure(SmpcError):
    def __init__(self, message, logs=""):
        super().__init__(message)
        self.logs = logs
