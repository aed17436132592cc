"""
Desk-scale stand-in for a real amp recording session.

Input clips are seeded plucked-string performances (Karplus-Strong), targets
are the same clips through a static tanh nonlinearity. Files are written as
``<name>-input.wav`` / ``<name>-target.wav`` pairs, so the output directory
feeds straight into ``preprocess --mode paired`` and ``evaluate``.
"""
import logging
from pathlib import Path
from typing import List, Tuple

import numpy as np
from scipy import signal

from .audio import AudioBuffer, save_audio

log = logging.getLogger(__name__)

DRIVES = {"clean": 1.0, "light": 3.0, "heavy": 10.0}

# E2 .. E5
LOWEST_NOTE_HZ = 82.41
HIGHEST_NOTE_HZ = 659.26


def pluck(freq: float, seconds: float, sample_rate: int, rng: np.random.Generator,
          decay: float = 0.996) -> np.ndarray:
    """One plucked string: a noise burst fed through an averaging delay loop."""
    period = max(2, int(round(sample_rate / freq)))
    n = int(round(seconds * sample_rate))
    excitation = np.zeros(n)
    burst = rng.uniform(-1.0, 1.0, size=min(period, n))
    excitation[:burst.size] = burst - burst.mean()
    a = np.zeros(period + 2)
    a[0] = 1.0
    a[period] = a[period + 1] = -0.5 * decay
    return signal.lfilter([1.0], a, excitation)


def synth_performance(seconds: float, sample_rate: int = 44100, seed: int = 0,
                      notes_per_second: float = 2.0, level: float = 0.5) -> AudioBuffer:
    """Random single-note line: pluck onsets, pitches and velocities all drawn from ``seed``."""
    if seconds <= 0:
        raise ValueError("seconds must be positive")
    rng = np.random.default_rng(seed)
    n = int(round(seconds * sample_rate))
    out = np.zeros(n)
    n_notes = max(1, int(round(seconds * notes_per_second)))
    onsets = np.sort(rng.integers(0, n, size=n_notes))
    onsets[0] = 0
    for onset in onsets:
        freq = np.exp(rng.uniform(np.log(LOWEST_NOTE_HZ), np.log(HIGHEST_NOTE_HZ)))
        note = pluck(freq, (n - onset) / sample_rate, sample_rate, rng) * rng.uniform(0.3, 1.0)
        out[onset:] += note

    # pickup/body roll-off
    sos = signal.butter(2, min(5000.0, 0.45 * sample_rate), fs=sample_rate, output="sos")
    out = signal.sosfilt(sos, out)
    peak = np.max(np.abs(out))
    if peak > 0:
        out *= level / peak
    return AudioBuffer(out.astype(np.float32), sample_rate)


def tanh_distortion(buffer: AudioBuffer, drive: float) -> AudioBuffer:
    if drive <= 0:
        raise ValueError("drive must be positive")
    y = np.tanh(drive * buffer.samples.astype(np.float64))
    return AudioBuffer(y.astype(np.float32), buffer.sample_rate)


def write_toy_dataset(out_dir, n_clips: int = 4, clip_seconds: float = 30.0, drive: str = "light",
                      sample_rate: int = 44100, seed: int = 0) -> List[Tuple[Path, Path]]:
    if drive not in DRIVES:
        raise ValueError(f"drive must be one of {', '.join(DRIVES)}")
    if n_clips < 1:
        raise ValueError("n_clips must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pairs = []
    for i in range(n_clips):
        x = synth_performance(clip_seconds, sample_rate, seed + i)
        y = tanh_distortion(x, DRIVES[drive])
        x_path = out_dir / f"clip{i:03d}-input.wav"
        y_path = out_dir / f"clip{i:03d}-target.wav"
        save_audio(x, x_path, bit_depth=32)
        save_audio(y, y_path, bit_depth=32)
        pairs.append((x_path, y_path))
    log.info(f"✅ wrote {n_clips} {drive} pairs ({clip_seconds:g}s each) to {out_dir}")
    return pairs
