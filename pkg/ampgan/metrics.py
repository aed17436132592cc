"""
Validation metrics: multi-scale spectral L1 (linear and log), mel L1
(linear and log) and pre-emphasized error-to-signal ratio.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import torch

from .dsp import MelConfig, SpectrogramConfig, apply_scale, spectrogram, stft_magnitude
from .errors import SilentTargetError

log = logging.getLogger(__name__)

DEFAULT_FFT_SIZES = (64, 128, 256, 512, 1024, 2048)
MEL_WINDOW = 1024
METRIC_KEYS = ("e_ms", "e_lms", "e_mel", "e_lmel", "e_esr")

# metric used for best-checkpoint selection, keyed by discriminator input
MATCHED_METRIC = {"spec": "e_ms", "log-spec": "e_lms", "mel": "e_mel", "log-mel": "e_lmel", "supervised": "e_esr"}


def _check_pair(output: torch.Tensor, target: torch.Tensor, min_length: int = 1) -> None:
    if output.shape != target.shape:
        raise ValueError(f"output {tuple(output.shape)} and target {tuple(target.shape)} differ in shape")
    if output.shape[-1] < min_length:
        raise ValueError(f"signal of {output.shape[-1]} samples is shorter than the {min_length}-sample window")


def multiscale_spectral_loss(output: torch.Tensor, target: torch.Tensor,
                             fft_sizes: Sequence[int] = DEFAULT_FFT_SIZES, scale: str = "linear",
                             log_epsilon: float = 1e-5) -> torch.Tensor:
    """Mean over FFT sizes of the mean absolute magnitude difference (hop N/4)."""
    _check_pair(output, target, max(fft_sizes))
    terms = []
    for n in fft_sizes:
        config = SpectrogramConfig.with_quarter_hop(n)
        a = apply_scale(stft_magnitude(output, config), scale, log_epsilon)
        b = apply_scale(stft_magnitude(target, config), scale, log_epsilon)
        terms.append(torch.mean(torch.abs(a - b)))
    return torch.stack(terms).mean()


def mel_l1_loss(output: torch.Tensor, target: torch.Tensor, scale: str = "linear", sample_rate: int = 44100,
                n_mels: int = 160, log_epsilon: float = 1e-5) -> torch.Tensor:
    _check_pair(output, target, MEL_WINDOW)
    config = SpectrogramConfig.with_quarter_hop(MEL_WINDOW, scale, MelConfig(n_mels=n_mels), sample_rate, log_epsilon)
    return torch.mean(torch.abs(spectrogram(output, config) - spectrogram(target, config)))


def pre_emphasis(x: torch.Tensor, coeff: float) -> torch.Tensor:
    """First-order high-pass 1 - c z^-1 along the last axis, zero initial state."""
    return torch.cat((x[..., :1], x[..., 1:] - coeff * x[..., :-1]), dim=-1)


def esr_loss(output: torch.Tensor, target: torch.Tensor, preemph_coeff: float = 0.85) -> torch.Tensor:
    """sum(e^2) / sum(H(target)^2) per signal, averaged over any leading batch axes."""
    _check_pair(output, target)
    t = pre_emphasis(target, preemph_coeff)
    e = t - pre_emphasis(output, preemph_coeff)
    energy = torch.sum(t ** 2, dim=-1)
    if torch.any(energy <= 0):
        raise SilentTargetError("target has zero energy after pre-emphasis")
    return torch.mean(torch.sum(e ** 2, dim=-1) / energy)


esr_metric = esr_loss


@dataclass
class ClipMetrics:
    name: str
    n_samples: int
    values: Dict[str, float]


@dataclass
class MetricReport:
    e_ms: float = 0.0
    e_lms: float = 0.0
    e_mel: float = 0.0
    e_lmel: float = 0.0
    e_esr: float = 0.0
    clips: List[ClipMetrics] = field(default_factory=list)

    def get(self, key: str) -> float:
        if key not in METRIC_KEYS:
            raise KeyError(key)
        return getattr(self, key)

    def as_dict(self) -> Dict[str, float]:
        return {k: getattr(self, k) for k in METRIC_KEYS}

    def to_keyvalue(self) -> str:
        lines = [f"{k} = {v:.9g}" for k, v in self.as_dict().items()]
        for clip in self.clips:
            lines += [f"{clip.name}.{k} = {clip.values[k]:.9g}" for k in METRIC_KEYS]
        return "\n".join(lines) + "\n"

    @classmethod
    def aggregate(cls, clips: Sequence[ClipMetrics]) -> "MetricReport":
        """Length-weighted mean of per-clip values."""
        clips = list(clips)
        total = sum(c.n_samples for c in clips)
        if not clips or total == 0:
            raise ValueError("no clips to aggregate")
        means = {k: sum(c.values[k] * c.n_samples for c in clips) / total for k in METRIC_KEYS}
        return cls(clips=clips, **means)


@torch.no_grad()
def compute_metrics(output: torch.Tensor, target: torch.Tensor, sample_rate: int = 44100,
                    fft_sizes: Sequence[int] = DEFAULT_FFT_SIZES, preemph_coeff: float = 0.85,
                    n_mels: int = 160, log_epsilon: float = 1e-5) -> Dict[str, float]:
    """All five metrics for one output/target pair, evaluated in double precision."""
    output = output.to(torch.float64)
    target = target.to(torch.float64)
    values = {
        "e_ms": multiscale_spectral_loss(output, target, fft_sizes, "linear", log_epsilon),
        "e_lms": multiscale_spectral_loss(output, target, fft_sizes, "log", log_epsilon),
        "e_mel": mel_l1_loss(output, target, "linear", sample_rate, n_mels, log_epsilon),
        "e_lmel": mel_l1_loss(output, target, "log", sample_rate, n_mels, log_epsilon),
        "e_esr": esr_metric(output, target, preemph_coeff),
    }
    return {k: float(v) for k, v in values.items()}
