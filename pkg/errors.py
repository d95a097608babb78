"""
Error types shared by the value identification pipeline
Each family maps to one CLI exit code (see cli.EXIT_CODES)
"""


class ValueIdError(Exception):
    """Base class for every error raised on purpose by this package"""


class UsageError(ValueIdError):
    """Bad command line (unknown subcommand, missing flag)"""


class StructuralError(ValueIdError, ValueError):
    """A precondition on shapes or sizes does not hold"""


class DataFormatError(ValueIdError):
    """A file on disk does not follow its documented format

    Args:
        message: What is wrong
        path: File being read (optional)
        line: 1-based line number (optional)
        field: Offending field name (optional)
    """

    def __init__(self, message, path=None, line=None, field=None):
        self.path = path
        self.line = line
        self.field = field
        where = []
        if path is not None:
            where.append(str(path) if line is None else f"{path}:{line}")
        if field is not None:
            where.append(f"field '{field}'")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(f"{prefix}{message}")


class InvariantError(ValueIdError):
    """An internal guarantee was violated - always a bug"""
