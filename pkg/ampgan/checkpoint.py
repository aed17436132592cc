"""
Checkpoint container.

A checkpoint is a safetensors file: a little-endian named tensor table plus
a string metadata header carrying the magic tag, format version, model kind,
the resolved configuration (JSON), training step and seed. Loading what was
saved is bit-identical on every platform.
"""
import contextlib
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import torch
from safetensors import SafetensorError, safe_open
from safetensors.torch import save_file

from .discriminator import DiscriminatorConfig, MultiScaleDiscriminator
from .dsp import MelConfig, SpectrogramConfig
from .errors import CheckpointError
from .generator import Generator, GeneratorConfig

log = logging.getLogger(__name__)

MAGIC = "AMPGAN-CKPT"
FORMAT_VERSION = 1
KINDS = ("generator", "discriminator", "multiscale", "training")


@dataclass
class Checkpoint:
    kind: str
    config: Dict[str, Any]
    tensors: Dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise CheckpointError(f"unknown checkpoint kind {self.kind!r}")

    def subset(self, prefix: str) -> Dict[str, torch.Tensor]:
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    metadata = {
        "magic": MAGIC,
        "format_version": str(FORMAT_VERSION),
        "kind": ckpt.kind,
        "config": json.dumps(ckpt.config, sort_keys=True),
        "step": str(ckpt.step),
        "seed": str(ckpt.seed),
    }
    tensors = {k: v.detach().cpu().contiguous() for k, v in ckpt.tensors.items()}
    tmp = path.with_name(path.name + ".tmp")
    save_file(tensors, str(tmp), metadata=metadata)
    tmp.replace(path)
    return path


def load_checkpoint(path, kind: Optional[str] = None) -> Checkpoint:
    path = Path(path)
    try:
        with safe_open(str(path), framework="pt") as f:
            metadata = f.metadata() or {}
            tensors = {k: f.get_tensor(k) for k in f.keys()}
    except (SafetensorError, OSError, RuntimeError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e

    if metadata.get("magic") != MAGIC:
        raise CheckpointError(f"{path}: not an ampgan checkpoint")
    version = int(metadata.get("format_version", "0"))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    found = metadata.get("kind")
    if kind is not None and found != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {found}")
    return Checkpoint(found, json.loads(metadata["config"]), tensors,
                      int(metadata.get("step", 0)), int(metadata.get("seed", 0)))


def generator_config_from_dict(d: Dict[str, Any]) -> GeneratorConfig:
    return GeneratorConfig(**d)


def discriminator_config_from_dict(d: Dict[str, Any]) -> DiscriminatorConfig:
    spec = dict(d["spectrogram"])
    mel = spec.pop("mel")
    return DiscriminatorConfig(
        kernel_sizes=tuple(d["kernel_sizes"]),
        channels=tuple(d["channels"]),
        groups=tuple(d["groups"]),
        leaky_slope=d["leaky_slope"],
        spectrogram=SpectrogramConfig(mel=MelConfig(**mel) if mel else None, **spec),
    )


@contextlib.contextmanager
def _config_errors(path, what: str):
    try:
        yield
    except KeyError as e:
        raise CheckpointError(f"{path}: no {what} config (missing key {e})") from e
    except (TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: malformed {what} config: {e}") from e


def _load_state(module: torch.nn.Module, tensors: Dict[str, torch.Tensor], what: str) -> None:
    try:
        module.load_state_dict(tensors, strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"{what} tensors do not match the embedded config: {e}") from e


def generator_checkpoint(model: Generator, step: int = 0, seed: int = 0, sample_rate: int = 44100,
                         run: Optional[Dict[str, str]] = None) -> Checkpoint:
    config = {"generator": dataclasses.asdict(model.config), "sample_rate": sample_rate, "run": run or {}}
    return Checkpoint("generator", config, dict(model.state_dict()), step, seed)


def load_generator(path) -> Tuple[Generator, Checkpoint]:
    ckpt = load_checkpoint(path)
    if ckpt.kind == "training":
        tensors = ckpt.subset("generator.")
    elif ckpt.kind == "generator":
        tensors = ckpt.tensors
    else:
        raise CheckpointError(f"{path}: {ckpt.kind} checkpoint holds no generator")
    with _config_errors(path, "generator"):
        model = Generator(generator_config_from_dict(ckpt.config["generator"]))
    _load_state(model, tensors, "generator")
    return model, ckpt


def multiscale_checkpoint(ms: MultiScaleDiscriminator, step: int = 0, seed: int = 0) -> Checkpoint:
    config = {"discriminators": [dataclasses.asdict(c) for c in ms.configs]}
    return Checkpoint("multiscale", config, dict(ms.state_dict()), step, seed)


def load_multiscale(path) -> Tuple[MultiScaleDiscriminator, Checkpoint]:
    ckpt = load_checkpoint(path)
    if ckpt.kind not in ("multiscale", "training"):
        raise CheckpointError(f"{path}: {ckpt.kind} checkpoint holds no discriminator")
    with _config_errors(path, "discriminator"):
        ms = MultiScaleDiscriminator([discriminator_config_from_dict(d) for d in ckpt.config["discriminators"]])
    tensors = ckpt.subset("discriminator.") if ckpt.kind == "training" else ckpt.tensors
    _load_state(ms, tensors, "discriminator")
    return ms, ckpt


def optimizer_tensors(optimizer: torch.optim.Optimizer, prefix: str) -> Dict[str, torch.Tensor]:
    """Flatten per-parameter optimizer state into named tensors."""
    out = {}
    for index, state in optimizer.state_dict()["state"].items():
        for key, value in state.items():
            value = torch.as_tensor(value)
            out[f"{prefix}{index}.{key}"] = value.reshape(1) if value.dim() == 0 else value
    return out


def restore_optimizer(optimizer: torch.optim.Optimizer, tensors: Dict[str, torch.Tensor]) -> None:
    state: Dict[int, Dict[str, torch.Tensor]] = {}
    for name, value in tensors.items():
        index, key = name.split(".", 1)
        state.setdefault(int(index), {})[key] = value.reshape(()) if key == "step" else value
    current = optimizer.state_dict()
    optimizer.load_state_dict({"state": state, "param_groups": current["param_groups"]})
