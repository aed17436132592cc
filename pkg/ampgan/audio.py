"""
Audio file I/O, preprocessing and dataset manifests.

WAV files are read and written with soundfile. Manifests reference
(file, start offset) spans instead of copying audio, so they stay small
text artifacts that can be diffed and regenerated bit-exactly.

Manifest text format:

    sample_rate=44100
    mode=alternating
    input guitar/take1.wav 0 88200
    target guitar/take1.wav 88200 88200
"""
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import soundfile as sf

from .errors import AudioFormatError, ManifestError, SilentAudioError

log = logging.getLogger(__name__)

SUPPORTED_SUBTYPES = {"PCM_16": 16, "PCM_24": 24, "FLOAT": 32}
WAV_FORMATS = {"WAV", "WAVEX"}
INPUT_SUFFIX = "-input.wav"
TARGET_SUFFIX = "-target.wav"


@dataclass
class AudioBuffer:
    """Mono samples in [-1, 1] plus their sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float32).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("AudioBuffer samples must be finite")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def span(self, start: int, stop: int) -> "AudioBuffer":
        return AudioBuffer(self.samples[start:stop], self.sample_rate)


def load_audio(path, start: int = 0, stop: Optional[int] = None) -> AudioBuffer:
    """Read a PCM16/PCM24/float32 WAV file as a mono buffer.

    Multichannel files are averaged to mono. ``start``/``stop`` select a frame
    range without reading the whole file.
    """
    path = Path(path)
    try:
        info = sf.info(str(path))
    except (RuntimeError, OSError) as e:
        raise AudioFormatError(f"cannot read {path}: {e}") from e

    if info.format not in WAV_FORMATS or info.subtype not in SUPPORTED_SUBTYPES:
        raise AudioFormatError(
            f"{path}: unsupported encoding {info.format}/{info.subtype} "
            f"(expected WAV with one of {', '.join(SUPPORTED_SUBTYPES)})"
        )
    if info.frames == 0:
        raise AudioFormatError(f"{path}: zero-length audio")

    try:
        data, sample_rate = sf.read(str(path), start=start, stop=stop, dtype="float64", always_2d=True)
    except (RuntimeError, OSError) as e:
        raise AudioFormatError(f"cannot read {path}: {e}") from e

    if data.shape[0] == 0:
        raise AudioFormatError(f"{path}: requested span [{start}, {stop}) is empty")
    if not np.all(np.isfinite(data)):
        raise AudioFormatError(f"{path}: contains non-finite samples")

    mono = data.mean(axis=1)
    over = int(np.count_nonzero(np.abs(mono) > 1.0))
    if over:
        log.warning(f"⚠️ {path}: {over} float samples outside [-1, 1] were clipped on load")
        mono = np.clip(mono, -1.0, 1.0)
    return AudioBuffer(mono, int(sample_rate))


def save_audio(buffer: AudioBuffer, path, bit_depth: int = 16) -> int:
    """Write ``buffer`` as a mono WAV file and return the number of clipped samples.

    Integer depths are quantized here (scale 2**(bits-1), round half to even)
    so a load/save round trip stays within one LSB.
    """
    if len(buffer) == 0:
        raise ValueError("cannot save an empty buffer")
    if bit_depth not in (16, 24, 32):
        raise ValueError(f"bit_depth must be 16, 24 or 32, got {bit_depth}")

    samples = buffer.samples.astype(np.float64)
    clipped = int(np.count_nonzero(np.abs(samples) > 1.0))
    if clipped:
        log.warning(f"⚠️ {path}: hard-clipped {clipped} samples outside [-1, 1]")
        samples = np.clip(samples, -1.0, 1.0)

    if bit_depth == 16:
        data = np.clip(np.round(samples * 32768.0), -32768, 32767).astype(np.int16)
        subtype = "PCM_16"
    elif bit_depth == 24:
        scale = float(1 << 23)
        q = np.clip(np.round(samples * scale), -scale, scale - 1).astype(np.int32)
        # libsndfile keeps the top 24 bits of int32 data
        data = q << 8
        subtype = "PCM_24"
    else:
        data = samples.astype(np.float32)
        subtype = "FLOAT"

    try:
        sf.write(str(path), data, buffer.sample_rate, subtype=subtype, format="WAV")
    except (RuntimeError, OSError) as e:
        raise AudioFormatError(f"cannot write {path}: {e}") from e
    return clipped


def silence_bounds(buffer: AudioBuffer, threshold_db: float = -60.0, window_ms: float = 10.0) -> Tuple[int, int]:
    """Return [start, stop) spanning the first to last window louder than ``threshold_db`` dBFS."""
    if threshold_db >= 0:
        raise ValueError("threshold_db must be negative")
    if window_ms <= 0:
        raise ValueError("window_ms must be positive")

    n = len(buffer)
    if n == 0:
        raise SilentAudioError("empty buffer")
    window = max(1, int(round(buffer.sample_rate * window_ms / 1000.0)))
    starts = np.arange(0, n, window)
    squares = buffer.samples.astype(np.float64) ** 2
    counts = np.diff(np.append(starts, n))
    mean_square = np.add.reduceat(squares, starts) / counts

    loud = np.flatnonzero(mean_square > 10.0 ** (threshold_db / 10.0))
    if loud.size == 0:
        raise SilentAudioError(f"no {window_ms} ms window exceeds {threshold_db} dBFS")
    return int(starts[loud[0]]), int(min(starts[loud[-1]] + window, n))


def trim_silence(buffer: AudioBuffer, threshold_db: float = -60.0, window_ms: float = 10.0) -> AudioBuffer:
    start, stop = silence_bounds(buffer, threshold_db, window_ms)
    return buffer.span(start, stop)


def detect_clipping(buffer: AudioBuffer, level: float = 0.999, min_run: int = 3) -> float:
    """Fraction of samples inside runs of >= ``min_run`` consecutive samples with |s| >= level."""
    if not 0 < level <= 1:
        raise ValueError("level must lie in (0, 1]")
    if min_run < 1:
        raise ValueError("min_run must be >= 1")
    n = len(buffer)
    if n == 0:
        return 0.0

    hot = np.abs(buffer.samples) >= np.float32(level)
    edges = np.diff(np.concatenate(([0], hot.astype(np.int8), [0])))
    run_starts = np.flatnonzero(edges == 1)
    run_stops = np.flatnonzero(edges == -1)
    lengths = run_stops - run_starts
    return float(lengths[lengths >= min_run].sum()) / n


@dataclass(frozen=True)
class Segment:
    path: str
    start: int


@dataclass
class DatasetManifest:
    """Fixed-length segments assigned to the input (X) and target (Y) domains."""

    segment_length_samples: int
    sample_rate: int
    input_segments: List[Segment] = field(default_factory=list)
    target_segments: List[Segment] = field(default_factory=list)
    mode: str = "unpaired"

    @property
    def paired(self) -> bool:
        return self.mode == "paired"

    def validate(self) -> "DatasetManifest":
        if not self.input_segments:
            raise ManifestError("input domain is empty")
        if not self.target_segments:
            raise ManifestError("target domain is empty")
        shared = set(self.input_segments) & set(self.target_segments)
        if shared:
            first = sorted(shared, key=lambda s: (s.path, s.start))[0]
            raise ManifestError(
                f"{len(shared)} segment(s) appear in both domains, e.g. {first.path} @ {first.start}"
            )
        if self.paired and len(self.input_segments) != len(self.target_segments):
            raise ManifestError("paired manifest needs equal input and target segment counts")
        return self


@dataclass
class PreprocessPolicy:
    """Trimming, count-in removal and clipping rejection applied while segmenting."""

    trim: bool = True
    threshold_db: float = -60.0
    window_ms: float = 10.0
    skip_seconds: float = 0.0
    clip_level: float = 0.999
    clip_min_run: int = 3
    max_clip_ratio: float = 0.01


def _usable_span(path, buffer: AudioBuffer, policy: Optional[PreprocessPolicy]) -> Optional[Tuple[int, int]]:
    if policy is None:
        return 0, len(buffer)
    lo, hi = 0, len(buffer)
    if policy.trim:
        try:
            lo, hi = silence_bounds(buffer, policy.threshold_db, policy.window_ms)
        except SilentAudioError:
            log.warning(f"⚠️ {path}: silent, skipped")
            return None
    lo += int(round(policy.skip_seconds * buffer.sample_rate))
    if lo >= hi:
        return None
    ratio = detect_clipping(buffer.span(lo, hi), policy.clip_level, policy.clip_min_run)
    if ratio > policy.max_clip_ratio:
        log.warning(f"⚠️ {path}: {ratio:.2%} clipped samples, file excluded")
        return None
    return lo, hi


def segment_file(
    path,
    segment_length: int,
    sample_rate: int,
    policy: Optional[PreprocessPolicy] = None,
) -> List[Segment]:
    """Cut one file into consecutive non-overlapping segments; partial tails are dropped."""
    buffer = load_audio(path)
    if buffer.sample_rate != sample_rate:
        raise ManifestError(f"{path}: sample rate {buffer.sample_rate} Hz, expected {sample_rate} Hz")

    span = _usable_span(path, buffer, policy)
    if span is None:
        return []
    lo, hi = span

    segments = []
    for start in range(lo, hi - segment_length + 1, segment_length):
        if policy is not None:
            piece = buffer.span(start, start + segment_length)
            if detect_clipping(piece, policy.clip_level, policy.clip_min_run) > policy.max_clip_ratio:
                log.info(f"{path} @ {start}: clipped segment dropped")
                continue
        segments.append(Segment(str(path), start))

    if not segments:
        log.info(f"{path}: shorter than one segment, contributes nothing")
    return segments


def _segment_length(segment_seconds: float, sample_rate: int) -> int:
    if segment_seconds <= 0:
        raise ValueError("segment_seconds must be positive")
    length = int(round(segment_seconds * sample_rate))
    if length < 1:
        raise ValueError("segment shorter than one sample")
    return length


def build_unpaired_manifest(
    files_x: Sequence,
    files_y: Sequence,
    segment_seconds: float = 2.0,
    sample_rate: int = 44100,
    policy: Optional[PreprocessPolicy] = None,
) -> DatasetManifest:
    if not files_x or not files_y:
        raise ManifestError("both domains need at least one file")
    length = _segment_length(segment_seconds, sample_rate)
    manifest = DatasetManifest(length, sample_rate, mode="unpaired")
    for path in files_x:
        manifest.input_segments.extend(segment_file(path, length, sample_rate, policy))
    for path in files_y:
        manifest.target_segments.extend(segment_file(path, length, sample_rate, policy))
    return manifest.validate()


def build_alternating_manifest(
    files: Sequence,
    segment_seconds: float = 2.0,
    sample_rate: int = 44100,
    policy: Optional[PreprocessPolicy] = None,
) -> DatasetManifest:
    """Send consecutive segments alternately to the input and target domains.

    The global sequence runs in file order, then time order: even positions
    go to the input domain, odd positions to the target domain.
    """
    if not files:
        raise ManifestError("no input files")
    length = _segment_length(segment_seconds, sample_rate)
    manifest = DatasetManifest(length, sample_rate, mode="alternating")
    index = 0
    for path in files:
        for segment in segment_file(path, length, sample_rate, policy):
            domain = manifest.input_segments if index % 2 == 0 else manifest.target_segments
            domain.append(segment)
            index += 1
    return manifest.validate()


def find_pairs(directory) -> List[Tuple[str, Path, Path]]:
    """Match ``<name>-input.wav`` with ``<name>-target.wav`` inside ``directory``."""
    directory = Path(directory)
    if not directory.is_dir():
        raise ManifestError(f"not a directory: {directory}")
    inputs: Dict[str, Path] = {}
    targets: Dict[str, Path] = {}
    for p in sorted(directory.glob("*.wav")):
        if p.name.endswith(INPUT_SUFFIX):
            inputs[p.name[: -len(INPUT_SUFFIX)]] = p
        elif p.name.endswith(TARGET_SUFFIX):
            targets[p.name[: -len(TARGET_SUFFIX)]] = p

    unmatched = sorted(set(inputs) ^ set(targets))
    if unmatched:
        raise ManifestError(f"unmatched input/target files in {directory}: {', '.join(unmatched)}")
    if not inputs:
        raise ManifestError(f"no <name>{INPUT_SUFFIX} / <name>{TARGET_SUFFIX} pairs in {directory}")
    return [(name, inputs[name], targets[name]) for name in sorted(inputs)]


def build_paired_manifest(
    pairs: Iterable[Tuple[Path, Path]],
    segment_seconds: float = 2.0,
    sample_rate: int = 44100,
    policy: Optional[PreprocessPolicy] = None,
    warm_up: int = 0,
) -> DatasetManifest:
    """Segment time-aligned (input, target) files at identical offsets.

    Trimming and clipping decisions are taken on the input file and mirrored
    onto the target so both sides stay aligned. A pair is dropped when its
    target is digitally silent after the first ``warm_up`` samples, since an
    error-to-signal ratio against it is undefined.
    """
    length = _segment_length(segment_seconds, sample_rate)
    if not 0 <= warm_up < length:
        raise ValueError(f"warm_up must lie in [0, {length}), got {warm_up}")
    manifest = DatasetManifest(length, sample_rate, mode="paired")
    for input_path, target_path in pairs:
        target = load_audio(target_path)
        segments = segment_file(input_path, length, sample_rate, policy)
        if target.sample_rate != sample_rate:
            raise ManifestError(f"{target_path}: sample rate {target.sample_rate} Hz, expected {sample_rate} Hz")
        for seg in segments:
            if seg.start + length > len(target):
                log.warning(f"⚠️ {target_path}: shorter than its input, remaining segments dropped")
                break
            if not np.any(target.samples[seg.start + warm_up:seg.start + length]):
                log.warning(f"⚠️ {target_path} @ {seg.start}: silent target, pair dropped")
                continue
            manifest.input_segments.append(seg)
            manifest.target_segments.append(Segment(str(target_path), seg.start))
    return manifest.validate()


def write_manifest(manifest: DatasetManifest, out_path) -> Path:
    """Write the manifest with paths relative to the manifest's own directory."""
    out_path = Path(out_path)
    base = out_path.resolve().parent
    lines = [f"sample_rate={manifest.sample_rate}", f"mode={manifest.mode}"]
    for domain, segments in (("input", manifest.input_segments), ("target", manifest.target_segments)):
        for seg in segments:
            rel = Path(os.path.relpath(Path(seg.path).resolve(), base)).as_posix()
            lines.append(f"{domain} {rel} {seg.start} {manifest.segment_length_samples}")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out_path


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ManifestError(f"cannot read manifest {path}: {e}") from e

    base = path.resolve().parent
    sample_rate = None
    mode = "unpaired"
    length = None
    inputs: List[Segment] = []
    targets: List[Segment] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("sample_rate="):
            sample_rate = int(line.split("=", 1)[1])
            continue
        if line.startswith("mode="):
            mode = line.split("=", 1)[1].strip()
            continue
        parts = line.split()
        if len(parts) < 4 or parts[0] not in ("input", "target"):
            raise ManifestError(f"{path}:{lineno}: malformed record {line!r}")
        domain, start, seg_len = parts[0], int(parts[-2]), int(parts[-1])
        rel = line[len(domain):].strip().rsplit(maxsplit=2)[0]
        if length is None:
            length = seg_len
        elif seg_len != length:
            raise ManifestError(f"{path}:{lineno}: segment length {seg_len} differs from {length}")
        seg = Segment(os.path.normpath(str(base / rel)), start)
        (inputs if domain == "input" else targets).append(seg)

    if sample_rate is None:
        raise ManifestError(f"{path}: missing sample_rate header")
    if length is None:
        raise ManifestError(f"{path}: no segments")
    return DatasetManifest(length, sample_rate, inputs, targets, mode).validate()


class SegmentLoader:
    """Reads manifest segments, keeping each source file in memory after first use."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self._files: Dict[str, np.ndarray] = {}

    def _file(self, path: str) -> np.ndarray:
        if path not in self._files:
            buffer = load_audio(path)
            if buffer.sample_rate != self.manifest.sample_rate:
                raise ManifestError(f"{path}: sample rate changed since the manifest was built")
            self._files[path] = buffer.samples
        return self._files[path]

    def read(self, segment: Segment) -> np.ndarray:
        samples = self._file(segment.path)
        stop = segment.start + self.manifest.segment_length_samples
        if segment.start < 0 or stop > samples.shape[0]:
            raise ManifestError(f"{segment.path}: span [{segment.start}, {stop}) outside the file")
        return samples[segment.start:stop]

    def batch(self, segments: Sequence[Segment]) -> np.ndarray:
        return np.stack([self.read(s) for s in segments])
