"""Exception hierarchy shared across the package."""


class ZeroRegError(Exception):
    """Base class for all errors raised by zeroreg."""


class InvalidArgumentError(ZeroRegError, ValueError):
    pass


class InsufficientDataError(ZeroRegError):
    """Too few points / correspondences / structure to continue a stage."""


class DegenerateError(ZeroRegError):
    """Rank-deficient geometry (collinear patch, flat yaw score, ...)."""


class ParseError(ZeroRegError):
    def __init__(self, message, path=None, offset=None):
        self.path = path
        self.offset = offset
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte {offset}")
        super().__init__(f"{': '.join(where)}: {message}" if where else message)


class ConfigError(ZeroRegError, ValueError):
    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class RegistrationFailure(ZeroRegError):
    """A pipeline stage could not produce a usable result."""

    def __init__(self, stage, message):
        self.stage = stage
        super().__init__(f"[{stage}] {message}")
