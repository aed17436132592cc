"""
RunConfig: every tunable knob in one flat ``key = value`` text file.

    # my_run.txt
    discriminator = log-mel
    scales = 3
    lr_g = 1e-4

Unknown keys are rejected; every key has a default.
"""
import dataclasses
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple

from .errors import ConfigError

log = logging.getLogger(__name__)


def _opt(default, help: str):
    return field(default=default, metadata={"help": help})


@dataclass(frozen=True)
class RunConfig:
    # data
    sample_rate: int = _opt(44100, "sample rate every input file must have (Hz)")
    segment_seconds: float = _opt(2.0, "training segment length (s)")
    manifest_mode: str = _opt("alternating", "preprocess split: alternating | unpaired | paired")
    trim_silence: bool = _opt(True, "trim leading/trailing silence before segmenting")
    silence_threshold_db: float = _opt(-60.0, "silence threshold (dBFS, RMS per window)")
    silence_window_ms: float = _opt(10.0, "RMS window for silence detection (ms)")
    skip_seconds: float = _opt(0.0, "seconds dropped after the trimmed start (count-in removal)")
    clip_level: float = _opt(0.999, "absolute level counted as clipped")
    clip_min_run: int = _opt(3, "consecutive clipped samples that make a run")
    max_clip_ratio: float = _opt(0.01, "reject a file or segment above this clipped fraction")

    # generator
    gen_stacks: int = _opt(2, "generator stacks of dilated convolutions")
    gen_layers: int = _opt(9, "layers per stack (dilations 1, g, g^2, ...)")
    gen_kernel_size: int = _opt(3, "generator kernel size")
    gen_dilation_growth: int = _opt(2, "dilation growth factor within a stack")
    gen_channels: int = _opt(16, "generator hidden channels")

    # discriminator
    discriminator: str = _opt("log-mel", "discriminator input: spec | mel | log-spec | log-mel")
    scales: int = _opt(3, "sub-discriminators (1 -> N=1024; 3 -> N=512,1024,2048)")
    n_mels: int = _opt(160, "mel bands for mel representations")
    log_epsilon: float = _opt(1e-5, "epsilon inside log(magnitude + eps)")
    leaky_slope: float = _opt(0.2, "leaky ReLU negative slope")
    disc_kernel_sizes: Tuple[int, ...] = _opt((10, 21, 21, 21, 21, 5, 3), "discriminator kernel sizes per layer")
    disc_channels: Tuple[int, ...] = _opt((32, 128, 512, 1024, 1024, 1024, 1), "discriminator output channels per layer")
    disc_groups: Tuple[int, ...] = _opt((1, 8, 32, 64, 64, 1, 1), "discriminator groups per layer")

    # training
    mode: str = _opt("adversarial", "training mode: adversarial | supervised")
    iterations: int = _opt(400000, "training iterations")
    batch_size: int = _opt(5, "segments per domain per iteration")
    lr_g: float = _opt(1e-4, "generator learning rate")
    lr_d: float = _opt(1e-4, "discriminator learning rate")
    beta1: float = _opt(0.9, "Adam beta1")
    beta2: float = _opt(0.999, "Adam beta2")
    adam_eps: float = _opt(1e-8, "Adam epsilon")
    d_steps_per_g_step: int = _opt(1, "discriminator updates per generator update")
    preemph_coeff: float = _opt(0.85, "pre-emphasis coefficient c of 1 - c z^-1 for ESR")
    checkpoint_every: int = _opt(5000, "iterations between checkpoints")
    validate_every: int = _opt(5000, "iterations between validation runs (0 disables)")
    fft_sizes: Tuple[int, ...] = _opt((64, 128, 256, 512, 1024, 2048), "FFT sizes of the multi-scale spectral metrics")
    seed: int = _opt(0, "seed for initialization and batch sampling")

    # inference
    block_size: int = _opt(512, "streaming block size (samples)")
    benchmark_seconds: float = _opt(10.0, "audio duration streamed by benchmark (s)")

    def __post_init__(self):
        choices = {
            "manifest_mode": ("alternating", "unpaired", "paired"),
            "discriminator": ("spec", "mel", "log-spec", "log-mel"),
            "mode": ("adversarial", "supervised"),
        }
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} = {getattr(self, key)!r}; choose one of {', '.join(allowed)}")
        for key in ("iterations", "batch_size", "scales", "d_steps_per_g_step", "block_size", "checkpoint_every"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")

    @classmethod
    def keys(cls) -> Tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any], base: "RunConfig" = None) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        parsed = {k: _coerce(known[k], v) for k, v in values.items()}
        return dataclasses.replace(base or cls(), **parsed)

    @classmethod
    def from_file(cls, path, base: "RunConfig" = None) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        return cls.from_mapping(parse_text(text, str(path)), base)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"# {f.metadata['help']}")
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def as_dict(self) -> Dict[str, str]:
        return {f.name: _format(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def help_text(cls) -> str:
        defaults = cls()
        return "\n".join(
            f"  {f.name} = {_format(getattr(defaults, f.name))}    {f.metadata['help']}" for f in fields(cls)
        )


def parse_text(text: str, source: str = "<config>") -> Dict[str, str]:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def _coerce(f: dataclasses.Field, value: Any) -> Any:
    # the default's type decides how a value is parsed
    kind = type(f.default)
    if not isinstance(value, str):
        return tuple(value) if kind is tuple else value
    try:
        if kind is bool:
            lowered = value.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if kind is int:
            return int(value)
        if kind is float:
            return float(value)
        if kind is tuple:
            return tuple(int(v) for v in value.replace(" ", "").split(",") if v)
        return value
    except ValueError as e:
        raise ConfigError(f"{f.name}: cannot parse {value!r} as {kind.__name__}") from e


def _format(value: Any) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)
