"""Exception hierarchy shared by every module of the package."""


class MMFedError(Exception):
    """Base class for all errors raised by mmfed."""


class ShapeError(MMFedError, ValueError):
    pass


class ConfigError(MMFedError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DataError(MMFedError, ValueError):
    pass


class UsageError(MMFedError, RuntimeError):
    pass


class FormatError(MMFedError, ValueError):
    """Container file has the wrong magic, version or dtype code."""


class CorruptionError(FormatError):
    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


class DivergenceError(MMFedError, FloatingPointError):
    def __init__(self, message, round=None, client=None):
        self.round = round
        self.client = client
        context = []
        if round is not None:
            context.append(f"round={round}")
        if client is not None:
            context.append(f"client={client}")
        if context:
            message = f"{message} [{', '.join(context)}]"
        super().__init__(message)
