"""Exception hierarchy.

Two families matter to callers: configuration problems (bad input, unknown
names) and numerical failures (a computation could not meet its contract).
The CLI maps them to distinct exit codes.
"""


class PdlabError(Exception):
    pass


class ConfigError(PdlabError):
    pass


class ParseError(ConfigError):
    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)


class ValidationError(ConfigError):
    pass


class UnknownName(ConfigError):
    pass


class UnsupportedPair(ConfigError):
    pass


class NumericalError(PdlabError):
    pass


class NotSquare(NumericalError):
    pass


class DimensionMismatch(NumericalError):
    pass


class NonConvergence(NumericalError):
    pass


class OverflowRisk(NumericalError):
    pass


class SpectralGapViolation(NumericalError):
    pass


class KernelDimensionUnsupported(NumericalError):
    pass


class ContinuationFailure(NumericalError):
    pass


class TruncationOverflow(NumericalError):
    pass


class ZoneCollapse(NumericalError):
    pass


class PositivityViolation(NumericalError):
    def __init__(self, message, t=None):
        self.t = t
        super().__init__(message)


class StepUnderflow(NumericalError):
    pass


class ToleranceUnreachable(NumericalError):
    pass


class QuadratureFailure(NumericalError):
    pass


class NonContraction(NumericalError):
    def __init__(self, message, factor=None):
        self.factor = factor
        super().__init__(message)


class TailNotIntegrable(NumericalError):
    pass


class NoAdmissibleEpsilon(NumericalError):
    def __init__(self, message, worst=None):
        self.worst = worst
        super().__init__(message)
