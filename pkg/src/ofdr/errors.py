class OFDRError(Exception):
    """Base class for package errors."""


class ConfigError(OFDRError, ValueError):
    """A configuration value violates an invariant.

    ``field`` names the offending parameter (dotted path where relevant) so
    callers can produce machine-readable diagnostics.
    """

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.message = message


class CalibrationError(OFDRError):
    def __init__(self, message: str, achieved_db: float):
        super().__init__(f"{message} (achievable bound {achieved_db:.2f} dB)")
        self.achieved_db = achieved_db


class FrameError(OFDRError):
    """Raised for frames that fail magic, version or CRC checks."""
