"""Exception types raised across volnet.

Every error derives from :class:`VolnetError` so callers (the CLI in
particular) can catch the whole family at once.  I/O failures are left as the
builtin :class:`OSError`.
"""


class VolnetError(Exception):
    pass


class ShapeMismatch(VolnetError, ValueError):
    pass


class InvalidRange(VolnetError, ValueError):
    pass


class FormatError(VolnetError, ValueError):
    pass


class SizeMismatch(FormatError):
    pass


class DegenerateAxis(VolnetError, ValueError):
    pass


class CenterOutside(VolnetError, ValueError):
    pass


class ParseError(VolnetError, ValueError):
    def __init__(self, message, row=None, column=None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.row = row
        self.column = column


class DuplicateId(VolnetError, ValueError):
    pass


class BadLabel(ParseError):
    pass


class EmptySplit(VolnetError, ValueError):
    pass


class EmptyClass(VolnetError, ValueError):
    pass


class EmptyInput(VolnetError, ValueError):
    pass


class OneClassOnly(VolnetError, ValueError):
    pass


class StaleCache(VolnetError, RuntimeError):
    pass
