"""Exception hierarchy shared across the package."""

from __future__ import annotations


class PdspeechError(Exception):
    """Base class for all errors raised by this package."""


class ManifestError(PdspeechError):
    """Manifest file is malformed or internally inconsistent."""


class AudioError(PdspeechError):
    """Waveform input violates a precondition (empty, bad rate, bad format)."""


class PlanningError(PdspeechError):
    """Fold planning is impossible for the given roster or parameters."""


class BackboneError(PdspeechError):
    """Backbone adapter failure: unknown name, missing assets, bad shapes."""


class HeadInputError(PdspeechError):
    """Classifier head received inconsistent or degenerate inputs."""


class TrainingError(PdspeechError):
    """Training precondition violated, or the loop hit a non-finite loss."""


class ConfigError(PdspeechError):
    """Run or schedule configuration is invalid."""


class StageError(PdspeechError):
    """An enhancement stage failed on a clip."""


class PipelineError(PdspeechError):
    """Enhancement pipeline configuration is invalid."""


class EvaluationError(PdspeechError):
    """Metric computation is undefined or inputs cannot be joined."""


class FusionError(PdspeechError):
    """Prediction sets cannot be fused (key sets differ)."""


class PartialBatchFailure(PdspeechError):
    """A batch command finished but some clips failed."""
