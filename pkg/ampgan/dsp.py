"""
Time-frequency analysis shared by the discriminators and the metrics.

Tensors are laid out ``(..., bins, frames)`` so a spectrogram can feed a
Conv1d directly with frequency bins as channels. Framing starts at sample 0
with no centering or padding; window is periodic Hann; values are
magnitudes, not powers.
"""
import functools
import logging
import math
from dataclasses import dataclass
from typing import Optional

import torch
import torchaudio

log = logging.getLogger(__name__)

SCALES = ("linear", "log")


@dataclass(frozen=True)
class MelConfig:
    n_mels: int = 160
    f_min: float = 0.0
    f_max: Optional[float] = None  # None means Nyquist

    def resolved_f_max(self, sample_rate: int) -> float:
        return sample_rate / 2.0 if self.f_max is None else float(self.f_max)


@dataclass(frozen=True)
class SpectrogramConfig:
    window_size: int = 1024
    hop: int = 256
    scale: str = "linear"
    mel: Optional[MelConfig] = None
    log_epsilon: float = 1e-5
    sample_rate: int = 44100

    def __post_init__(self):
        n = self.window_size
        if n < 2 or n & (n - 1):
            raise ValueError(f"window_size must be a power of two >= 2, got {n}")
        if self.hop < 1:
            raise ValueError(f"hop must be >= 1, got {self.hop}")
        if self.scale not in SCALES:
            raise ValueError(f"scale must be one of {SCALES}, got {self.scale!r}")
        if self.log_epsilon <= 0:
            raise ValueError("log_epsilon must be positive")
        if self.mel is not None:
            f_max = self.mel.resolved_f_max(self.sample_rate)
            if not 0 <= self.mel.f_min < f_max <= self.sample_rate / 2:
                raise ValueError(f"mel range [{self.mel.f_min}, {f_max}] invalid at {self.sample_rate} Hz")
            if self.mel.n_mels < 1:
                raise ValueError("n_mels must be >= 1")

    @classmethod
    def with_quarter_hop(cls, window_size: int, scale: str = "linear", mel: Optional[MelConfig] = None,
                         sample_rate: int = 44100, log_epsilon: float = 1e-5) -> "SpectrogramConfig":
        return cls(window_size, window_size // 4, scale, mel, log_epsilon, sample_rate)

    @property
    def n_fft_bins(self) -> int:
        return self.window_size // 2 + 1

    @property
    def n_bins(self) -> int:
        return self.mel.n_mels if self.mel is not None else self.n_fft_bins

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.window_size:
            return 0
        return (n_samples - self.window_size) // self.hop + 1


def representation(kind: str, window_size: int, sample_rate: int = 44100, n_mels: int = 160,
                   log_epsilon: float = 1e-5) -> SpectrogramConfig:
    """Build one of ``spec``, ``mel``, ``log-spec``, ``log-mel`` with hop N/4."""
    kinds = {"spec": ("linear", False), "mel": ("linear", True),
             "log-spec": ("log", False), "log-mel": ("log", True)}
    if kind not in kinds:
        raise ValueError(f"unknown representation {kind!r}; choose from {', '.join(kinds)}")
    scale, use_mel = kinds[kind]
    mel = MelConfig(n_mels=n_mels) if use_mel else None
    return SpectrogramConfig.with_quarter_hop(window_size, scale, mel, sample_rate, log_epsilon)


def stft_magnitude(samples: torch.Tensor, config: SpectrogramConfig) -> torch.Tensor:
    """|DFT| of Hann-windowed frames, shape ``(..., N/2+1, frames)``."""
    n = config.window_size
    if samples.shape[-1] < n:
        raise ValueError(f"signal of {samples.shape[-1]} samples is shorter than the {n}-sample window")
    lead = samples.shape[:-1]
    flat = samples.reshape(-1, samples.shape[-1])
    window = torch.hann_window(n, periodic=True, dtype=samples.dtype, device=samples.device)
    spec = torch.stft(flat, n_fft=n, hop_length=config.hop, win_length=n, window=window,
                      center=False, normalized=False, onesided=True, return_complex=True)
    # complex abs has a zero subgradient at the origin
    mag = spec.abs()
    return mag.reshape(*lead, mag.shape[-2], mag.shape[-1])


_SLANEY_HZ_PER_MEL = 200.0 / 3.0
_SLANEY_LOG_HZ = 1000.0
_SLANEY_LOG_STEP = math.log(6.4) / 27.0


def _hz_to_mel(hz: torch.Tensor) -> torch.Tensor:
    knee = _SLANEY_LOG_HZ / _SLANEY_HZ_PER_MEL
    log_part = knee + torch.log(torch.clamp(hz, min=_SLANEY_LOG_HZ) / _SLANEY_LOG_HZ) / _SLANEY_LOG_STEP
    return torch.where(hz >= _SLANEY_LOG_HZ, log_part, hz / _SLANEY_HZ_PER_MEL)


def _mel_to_hz(mels: torch.Tensor) -> torch.Tensor:
    knee = _SLANEY_LOG_HZ / _SLANEY_HZ_PER_MEL
    log_part = _SLANEY_LOG_HZ * torch.exp(_SLANEY_LOG_STEP * (mels - knee))
    return torch.where(mels >= knee, log_part, mels * _SLANEY_HZ_PER_MEL)


def mel_band_edges(mel: MelConfig, sample_rate: int) -> torch.Tensor:
    """The ``n_mels + 2`` corner frequencies (Hz) of the triangular filters.

    Band i rises from ``edges[i]``, peaks at ``edges[i + 1]`` and falls to
    zero at ``edges[i + 2]``. Centers are strictly increasing for any FFT size;
    the argmax bin of adjacent bands is not once bands get narrower than a bin.
    """
    lo = torch.tensor(float(mel.f_min), dtype=torch.float64)
    hi = torch.tensor(mel.resolved_f_max(sample_rate), dtype=torch.float64)
    points = torch.linspace(float(_hz_to_mel(lo)), float(_hz_to_mel(hi)), mel.n_mels + 2, dtype=torch.float64)
    return _mel_to_hz(points)


@functools.lru_cache(maxsize=32)
def _mel_filterbank_cached(n_mels: int, f_min: float, f_max: float, n_fft_bins: int, sample_rate: int) -> torch.Tensor:
    fb = torchaudio.functional.melscale_fbanks(
        n_freqs=n_fft_bins, f_min=f_min, f_max=f_max, n_mels=n_mels,
        sample_rate=sample_rate, norm=None, mel_scale="slaney",
    )
    fb = fb.T.to(torch.float64).contiguous()
    empty = int((fb.sum(dim=1) <= 0).sum())
    if empty:
        log.warning(f"⚠️ {empty} of {n_mels} mel bands cover no bin of a {2 * (n_fft_bins - 1)}-point FFT")
    return fb


def mel_filterbank(mel: MelConfig, n_fft_bins: int, sample_rate: int, strict: bool = True) -> torch.Tensor:
    """Unnormalized triangular filters (peak 1) on the Slaney mel scale, shape ``(n_mels, n_fft_bins)``.

    With ``strict`` a band that covers no FFT bin is an error; otherwise it
    stays an all-zero row.
    """
    f_max = mel.resolved_f_max(sample_rate)
    fb = _mel_filterbank_cached(mel.n_mels, float(mel.f_min), f_max, n_fft_bins, sample_rate)
    empty = torch.nonzero(fb.sum(dim=1) <= 0).flatten()
    if strict and empty.numel():
        raise ValueError(
            f"{mel.n_mels} mel bands are too many for {n_fft_bins} FFT bins: "
            f"{empty.numel()} filter(s) cover no bin (first: {int(empty[0])})"
        )
    return fb.clone()


def apply_scale(spec: torch.Tensor, scale: str, log_epsilon: float = 1e-5) -> torch.Tensor:
    if scale == "linear":
        return spec
    if scale == "log":
        return torch.log(spec + log_epsilon)
    raise ValueError(f"scale must be one of {SCALES}, got {scale!r}")


def spectrogram(samples: torch.Tensor, config: SpectrogramConfig) -> torch.Tensor:
    """Full front-end: STFT magnitude, optional mel projection, optional log."""
    spec = stft_magnitude(samples, config)
    if config.mel is not None:
        fb = mel_filterbank(config.mel, config.n_fft_bins, config.sample_rate, strict=False)
        spec = torch.matmul(fb.to(dtype=spec.dtype, device=spec.device), spec)
    return apply_scale(spec, config.scale, config.log_epsilon)


def frontend_backward(spec: torch.Tensor, upstream: torch.Tensor, samples: torch.Tensor) -> torch.Tensor:
    """dL/dsamples given dL/dspec; ``spec`` must have been computed from ``samples`` with grad enabled."""
    (grad,) = torch.autograd.grad(spec, samples, grad_outputs=upstream, retain_graph=True, allow_unused=True)
    return torch.zeros_like(samples) if grad is None else grad
