"""Exception hierarchy shared across the package."""


class MirrorError(Exception):
    """Base class for all errors raised by this package."""


class SequenceTooLong(MirrorError):
    pass


class EmptyText(MirrorError):
    pass


class Misaligned(MirrorError):
    """A character span does not fall on token boundaries."""


class InvalidInstance(MirrorError):
    pass


class ParseError(MirrorError):
    def __init__(self, message, line=None, field=None):
        self.message = message
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field:
            where.append(f"field {field!r}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class PositionOutOfRange(MirrorError):
    pass


class BudgetExceeded(MirrorError):
    """Chain enumeration grew past the configured cap."""


class InfeasibleSize(MirrorError):
    pass


class MalformedSegment(MirrorError):
    pass


class DivergenceDetected(MirrorError):
    pass


class SpaceMismatch(MirrorError):
    pass


class LengthMismatch(MirrorError):
    pass


class SpecInfeasible(MirrorError):
    pass
