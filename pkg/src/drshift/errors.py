"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A spec, config file, or model was constructed with invalid values."""


class ContractError(ValueError):
    """A caller violated a documented precondition."""


class CsvParseError(ConfigError):
    """A CSV cell could not be parsed; carries 1-based row/column."""

    def __init__(self, path, row, column, message):
        super().__init__(f"{path}: row {row}, column {column}: {message}")
        self.path = str(path)
        self.row = row
        self.column = column


class DivergenceError(RuntimeError):
    """Training hit a non-finite value; carries a diagnostic snapshot."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = dict(state or {})
