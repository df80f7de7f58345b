"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration; carries every violation found, not just the first."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class FormatError(ValueError):
    """A file does not match its declared binary/text layout."""


class MetricUndefinedError(ValueError):
    """A point-set metric was requested on an empty set."""


class NumericalError(RuntimeError):
    """NaN/inf encountered, or an iteration diverged."""
