"""ampgan: guitar amplifier timbre emulation from unpaired recordings."""

__version__ = "0.1.0"

from .audio import AudioBuffer, DatasetManifest, load_audio, save_audio
from .discriminator import DiscriminatorConfig, MultiScaleDiscriminator, SpectralDiscriminator
from .dsp import MelConfig, SpectrogramConfig, spectrogram
from .errors import AmpGanError
from .generator import Generator, GeneratorConfig, receptive_field
from .metrics import MetricReport, compute_metrics
from .streaming import StreamState, stream_process, stream_reset

__all__ = [
    "AmpGanError",
    "AudioBuffer",
    "DatasetManifest",
    "DiscriminatorConfig",
    "Generator",
    "GeneratorConfig",
    "MelConfig",
    "MetricReport",
    "MultiScaleDiscriminator",
    "SpectralDiscriminator",
    "SpectrogramConfig",
    "StreamState",
    "compute_metrics",
    "load_audio",
    "receptive_field",
    "save_audio",
    "spectrogram",
    "stream_process",
    "stream_reset",
]
