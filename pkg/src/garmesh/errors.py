"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class GarmeshError(Exception):
    """Base class for every error raised by this package."""


class InputError(GarmeshError, ValueError):
    """Malformed or inconsistent input (CLI exit code 2)."""


class MeshError(InputError):
    pass


class ObjParseError(MeshError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(where + message)


class TopologyMismatchError(InputError):
    pass


class NumericalError(GarmeshError, ArithmeticError):
    """Non-finite values or divergence (CLI exit code 3)."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
