# ─── EXCEPTIONS ─────────────────────────────────────────────────────────────


class FloodLossError(Exception):
    """Base class for every error raised by the floodloss library."""


class SchemaError(FloodLossError):
    """Claims file or schema registry violates the schema contract."""


class ImputationError(FloodLossError):
    pass


class RainDataError(FloodLossError):
    """Rain grid cannot answer a query (empty box, absent cells, out of coverage)."""


class FitError(FloodLossError):
    """Parametric distribution fitting failed or was not attempted."""


class RegressorError(FloodLossError):
    """A regressor could not be trained or evaluated."""


class QuadratureError(FloodLossError):
    pass


class ProtocolError(FloodLossError):
    """Backtest plan or fold layout is degenerate."""


class ConfigError(FloodLossError):
    """Experiment configuration names an unknown key or an invalid value."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


class ManifestError(FloodLossError):
    """A recorded input digest no longer matches the file on disk."""
