"""Exception types shared across the package."""


class DocCleanError(Exception):
    """Base class for all package errors."""


class ConfigurationError(DocCleanError, ValueError):
    """Invalid model, layer or run configuration."""


class CheckpointError(DocCleanError):
    """A checkpoint container could not be read."""


class ManifestError(CheckpointError):
    """The text manifest is malformed."""


class VersionError(CheckpointError):
    """The container declares an unsupported format version."""


class ShapeMismatchError(CheckpointError):
    """A stored tensor does not match the shape the caller expects."""


class TruncatedPayloadError(CheckpointError):
    """The file ends before a tensor payload does."""


class ChecksumError(CheckpointError):
    """A tensor payload does not match its recorded CRC32."""


class MissingTensorError(CheckpointError):
    """Required tensors are absent from the container."""

    def __init__(self, missing):
        self.missing = sorted(missing)
        super().__init__("missing tensors: " + ", ".join(self.missing))


class DatasetError(DocCleanError):
    """Problems found while scanning a paired dataset.

    ``problems`` holds one human-readable line per offending file.
    """

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class TrainingDiverged(DocCleanError):
    """Loss or gradients became non-finite during training."""
