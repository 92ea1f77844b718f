class AutoQError(Exception):
    """Base class for every error raised by the search engine."""


class SpecError(AutoQError, ValueError):
    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        location = []
        if line is not None:
            location.append(f"line {line}")
        if field:
            location.append(field)
        prefix = f"{', '.join(location)}: " if location else ""
        super().__init__(f"{prefix}{message}")
        self.field = field
        self.line = line


class ShapeMismatchError(SpecError):
    pass


class PolicyCodecError(SpecError):
    pass


class ConfigError(AutoQError, ValueError):
    pass


class BudgetInfeasibleError(AutoQError):
    pass


class SearchSpaceTooLargeError(AutoQError):
    pass


class EpisodeDoneError(AutoQError, RuntimeError):
    pass
