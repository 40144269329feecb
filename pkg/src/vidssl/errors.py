"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration value or combination of values is invalid."""


class ContractError(ValueError):
    """A caller violated a documented precondition or invariant."""


class PlacementError(RuntimeError):
    """A sampled crop/window placement fell outside the frame; retryable."""


class SampleGenerationError(RuntimeError):
    """Pair generation failed after exhausting retries.

    Carries a ``diagnostics`` dict describing the last attempted geometry.
    """

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
