"""Exception types shared across the package."""


class DomainError(ValueError):
    """Input outside its admissible range."""


class FitError(RuntimeError):
    """An emulator could not be fitted or updated."""


class AcceptanceTooLow(RuntimeError):
    """Rejection sampling accepts too few candidates; switch to MCMC."""

    def __init__(self, message, accepted=None, rate=None):
        super().__init__(message)
        self.accepted = accepted
        self.rate = rate


class SamplerStuck(RuntimeError):
    """All Markov chains failed to move."""


class DiagnosticsFailure(RuntimeError):
    """A wave failed emulator diagnostics and was aborted."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class EmptyRegion(RuntimeError):
    """No non-implausible points remain."""
