"""Exception types shared across the codec."""


class RfdError(Exception):
    """Base class for codec-specific failures."""


class DegenerateTransmissionError(RfdError, ValueError):
    """Transmission map fell below the restoration floor."""


class DictionaryFormatError(RfdError, ValueError):
    """Dictionary file is truncated or carries a bad magic/layout."""


class FingerprintMismatchError(RfdError, ValueError):
    """Dictionary and model were built from different backbone weights."""


class CheckpointFormatError(RfdError, ValueError):
    """Checkpoint file is truncated or carries a bad magic/layout."""


class ContainerVersionError(RfdError, ValueError):
    """Container was written by an unknown format version."""


class ContainerCorruptionError(RfdError, ValueError):
    """Container checksum does not validate."""


class CurveOverlapError(RfdError, ValueError):
    """Two R-D curves share no common quality or rate interval."""


class CodecIntegrityError(RfdError, RuntimeError):
    """Encoder-side and decoder-side reconstructions differ."""


class TrainingDivergedError(RfdError, RuntimeError):
    """Loss went non-finite; carries a diagnostic dump of the last batch."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
