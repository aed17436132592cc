"""
Spectral-domain discriminators.

The audio is turned into a (log) (mel) magnitude spectrogram whose frequency
bins become the input channels of a stack of grouped 1-D convolutions. All
convolutions are weight-normalized, stride 1 with "same" padding, and every
layer but the last is followed by a leaky ReLU. The score is the mean of the
final single-channel output over time.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import weight_norm

from .audio import AudioBuffer
from .dsp import SpectrogramConfig, representation, spectrogram
from .generator import as_batch, init_uniform_

log = logging.getLogger(__name__)

MULTISCALE_WINDOWS = (512, 1024, 2048)
SINGLE_SCALE_WINDOW = 1024


@dataclass(frozen=True)
class DiscriminatorConfig:
    kernel_sizes: Tuple[int, ...] = (10, 21, 21, 21, 21, 5, 3)
    channels: Tuple[int, ...] = (32, 128, 512, 1024, 1024, 1024, 1)
    groups: Tuple[int, ...] = (1, 8, 32, 64, 64, 1, 1)
    leaky_slope: float = 0.2
    spectrogram: SpectrogramConfig = field(default_factory=lambda: representation("log-mel", SINGLE_SCALE_WINDOW))

    def __post_init__(self):
        if not (len(self.kernel_sizes) == len(self.channels) == len(self.groups)) or not self.channels:
            raise ValueError("kernel_sizes, channels and groups need one entry per layer")
        in_ch = self.spectrogram.n_bins
        for i, (out_ch, g) in enumerate(zip(self.channels, self.groups), start=1):
            if in_ch % g or out_ch % g:
                raise ValueError(f"layer {i}: {in_ch} -> {out_ch} channels not divisible by {g} groups")
            in_ch = out_ch

    @property
    def n_layers(self) -> int:
        return len(self.channels)


class SpectralDiscriminator(nn.Module):
    def __init__(self, config: DiscriminatorConfig = DiscriminatorConfig()):
        super().__init__()
        self.config = config
        convs = []
        in_ch = config.spectrogram.n_bins
        for k, out_ch, g in zip(config.kernel_sizes, config.channels, config.groups):
            conv = nn.Conv1d(in_ch, out_ch, k, padding="same", groups=g)
            init_uniform_(conv)
            # magnitude starts at the direction norm, so the effective weight equals the raw init
            convs.append(weight_norm(conv, dim=0))
            in_ch = out_ch
        self.convs = nn.ModuleList(convs)

    def forward(self, audio: torch.Tensor) -> torch.Tensor:
        """Scores of shape ``(batch,)`` for audio shaped ``(batch, samples)`` or ``(batch, 1, samples)``."""
        x = as_batch(audio).squeeze(1)
        if self.config.spectrogram.n_frames(x.shape[-1]) < 1:
            raise ValueError(
                f"{x.shape[-1]} samples are too short for one {self.config.spectrogram.window_size}-sample frame"
            )
        h = spectrogram(x, self.config.spectrogram)
        last = len(self.convs) - 1
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < last:
                h = F.leaky_relu(h, self.config.leaky_slope)
        return h.mean(dim=(1, 2))

    @torch.no_grad()
    def zero_(self) -> "SpectralDiscriminator":
        """Zero every weight magnitude and bias, making all effective weights zero."""
        for conv in self.convs:
            conv.parametrizations.weight.original0.zero_()
            conv.bias.zero_()
        return self


class MultiScaleDiscriminator(nn.Module):
    """Sub-discriminators sharing one representation kind at different window sizes."""

    def __init__(self, configs: Sequence[DiscriminatorConfig]):
        super().__init__()
        if not configs:
            raise ValueError("need at least one sub-discriminator")
        kinds = {(c.spectrogram.scale, c.spectrogram.mel is None) for c in configs}
        if len(kinds) != 1:
            raise ValueError("sub-discriminators must share one representation kind")
        self.configs = list(configs)
        self.discriminators = nn.ModuleList(SpectralDiscriminator(c) for c in configs)

    @classmethod
    def build(cls, kind: str = "log-mel", scales: int = 3, sample_rate: int = 44100,
              base: DiscriminatorConfig = None, n_mels: int = 160, log_epsilon: float = 1e-5) -> "MultiScaleDiscriminator":
        if scales < 1:
            raise ValueError("scales must be >= 1")
        windows = (SINGLE_SCALE_WINDOW,) if scales == 1 else tuple(MULTISCALE_WINDOWS[0] * 2 ** i for i in range(scales))
        configs = []
        for n in windows:
            spec = representation(kind, n, sample_rate, n_mels, log_epsilon)
            configs.append(DiscriminatorConfig(spectrogram=spec) if base is None else replace(base, spectrogram=spec))
        return cls(configs)

    @property
    def longest_window(self) -> int:
        return max(c.spectrogram.window_size for c in self.configs)

    def forward(self, audio: torch.Tensor) -> List[torch.Tensor]:
        return [d(audio) for d in self.discriminators]

    def zero_(self) -> "MultiScaleDiscriminator":
        for d in self.discriminators:
            d.zero_()
        return self


def _audio_tensor(audio: AudioBuffer, module: nn.Module) -> torch.Tensor:
    param = next(module.parameters())
    return torch.from_numpy(audio.samples).to(dtype=param.dtype, device=param.device).view(1, -1)


def discriminator_forward(audio: AudioBuffer, model: SpectralDiscriminator) -> float:
    with torch.no_grad():
        return float(model(_audio_tensor(audio, model))[0])


def multiscale_forward(audio: AudioBuffer, ms: MultiScaleDiscriminator) -> List[float]:
    with torch.no_grad():
        return [float(s[0]) for s in ms(_audio_tensor(audio, ms))]


def discriminator_backward(score: torch.Tensor, upstream: torch.Tensor, model: nn.Module,
                           audio: torch.Tensor) -> Tuple[Dict[str, torch.Tensor], torch.Tensor]:
    """Gradients of ``<upstream, score>`` w.r.t. weight magnitudes, directions, biases and the audio.

    Weight-normalized parameters appear as ``...parametrizations.weight.original0``
    (magnitude) and ``...original1`` (direction).
    """
    names, params = zip(*model.named_parameters())
    grads = torch.autograd.grad(score, (audio, *params), grad_outputs=upstream,
                                retain_graph=True, allow_unused=True)
    grad_audio = torch.zeros_like(audio) if grads[0] is None else grads[0]
    return {n: torch.zeros_like(p) if g is None else g
            for n, g, p in zip(names, grads[1:], params)}, grad_audio
