"""Exceptions raised across the pipeline. The cli module maps them to exit
codes."""


class ConfigurationError(ValueError):
    """A configuration or parameter value is outside its valid domain."""


class WavFormatError(ValueError):
    """A WAV file is not RIFF PCM16 mono."""


class MissingArtifactError(FileNotFoundError):
    """A prerequisite artifact of a pipeline stage does not exist."""

    def __init__(self, artifact: str, path: object):
        """
        Class constructor for MissingArtifactError.

        Parameters
        ----------
        artifact : str
          Human-readable artifact name, e.g. 'codebook'
        path : object
          Location where the artifact was expected
        """
        self.artifact = artifact
        self.path = path
        super().__init__(f"Missing {artifact}: {path} does not exist")


class PluginNotProvidedError(NotImplementedError):
    """A perturbation strategy needs a plug-in that was not supplied."""


class EncoderMismatchError(RuntimeError):
    """A frozen encoder differs from the one recorded downstream."""


class CheckpointError(ValueError):
    """A checkpoint file is corrupt, of the wrong kind, or untrained."""
