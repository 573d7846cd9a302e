"""Exception types shared across the package.

Each carries an ``exit_code`` so the command line can map failures onto
its documented status codes without inspecting messages.
"""


class ScriptFuseError(Exception):
    exit_code = 1


class ConfigError(ScriptFuseError, ValueError):
    exit_code = 1


class DimensionError(ScriptFuseError, ValueError):
    exit_code = 1


class DataError(ScriptFuseError, ValueError):
    exit_code = 2


class ParseError(DataError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class LabelError(DataError):
    pass


class VocabError(DataError):
    pass


class EmptyCorpusError(DataError):
    pass


class NumericError(ScriptFuseError, ArithmeticError):
    exit_code = 3


class DegenerateRowError(NumericError):
    pass


class GraphError(ScriptFuseError, RuntimeError):
    exit_code = 3
