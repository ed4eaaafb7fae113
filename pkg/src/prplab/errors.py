class PRPError(Exception):
    """Base class for errors raised by prplab."""


class InputError(PRPError, ValueError):
    """Bad argument or out-of-range request."""


class DatasetError(PRPError):
    """Dataset is empty or cannot satisfy the sampling request."""


class ConfigError(PRPError, ValueError):
    """Invalid or incompatible configuration."""


class DivergenceError(PRPError, RuntimeError):
    """Training produced a non-finite loss."""
