"""Exception types shared across the pipeline and CLI."""


class FedADError(Exception):
    """Base class for pipeline errors."""


class ConfigError(FedADError):
    """Invalid experiment configuration; maps to CLI exit code 2."""


class MissingArtifactError(FedADError):
    """A required prior-stage artifact is absent; maps to CLI exit code 3."""


class StageError(FedADError):
    """A pipeline stage failed at runtime; maps to CLI exit code 4."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[stage:{stage}] {message}")
        self.stage = stage
