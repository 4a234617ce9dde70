"""Exception types raised across the toolkit."""


class ToneProbeError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(ToneProbeError):
    """Configuration failed validation. Carries every problem found."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors) or "invalid configuration")


class ParseError(ToneProbeError):
    """A transcript token could not be parsed."""

    def __init__(self, token: str, reason: str):
        self.token = token
        self.reason = reason
        super().__init__(f"cannot parse {token!r}: {reason}")


class CorpusError(ToneProbeError):
    """Corpus ingestion failed as a whole."""


class FeatureError(ToneProbeError):
    """Feature extraction violated its contract."""


class ProbeError(ToneProbeError):
    """A probing dataset or classifier could not be built."""


class ReportError(ToneProbeError):
    """A report could not be emitted."""
