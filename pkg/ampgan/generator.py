"""
Feedforward WaveNet generator.

Stacks of dilated causal convolutions with gated activations; every layer's
gated output is concatenated along channels and mapped to the output by a
1x1 convolution (the linear post-processor). Each layer also adds a 1x1
projection of its gated output back onto its input (residual path).
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .audio import AudioBuffer
from .errors import NumericalError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GeneratorConfig:
    n_stacks: int = 2
    layers_per_stack: int = 9
    kernel_size: int = 3
    dilation_growth: int = 2
    channels: int = 16
    input_channels: int = 1
    output_channels: int = 1

    def __post_init__(self):
        for name in ("n_stacks", "layers_per_stack", "kernel_size", "dilation_growth", "channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"GeneratorConfig.{name} must be >= 1")

    @property
    def dilations(self) -> List[int]:
        return [self.dilation_growth ** i for i in range(self.layers_per_stack)] * self.n_stacks

    @property
    def n_layers(self) -> int:
        return self.n_stacks * self.layers_per_stack


def receptive_field(config: GeneratorConfig) -> int:
    """Number of input samples that can influence one output sample."""
    return 1 + sum((config.kernel_size - 1) * d for d in config.dilations)


def gated_activation(filter_path: torch.Tensor, gate_path: torch.Tensor) -> torch.Tensor:
    if filter_path.shape != gate_path.shape:
        raise ValueError(f"filter/gate shape mismatch: {tuple(filter_path.shape)} vs {tuple(gate_path.shape)}")
    return torch.tanh(filter_path) * torch.sigmoid(gate_path)


def init_uniform_(module: nn.Module) -> None:
    """Uniform in +-sqrt(1/fan_in) for every conv weight and bias."""
    for m in module.modules():
        if isinstance(m, nn.Conv1d):
            fan_in = (m.in_channels // m.groups) * m.kernel_size[0]
            bound = math.sqrt(1.0 / fan_in)
            nn.init.uniform_(m.weight, -bound, bound)
            if m.bias is not None:
                nn.init.uniform_(m.bias, -bound, bound)


class GatedLayer(nn.Module):
    def __init__(self, channels: int, kernel_size: int, dilation: int):
        super().__init__()
        self.context = (kernel_size - 1) * dilation
        self.conv = nn.Conv1d(channels, 2 * channels, kernel_size, dilation=dilation)
        self.residual = nn.Conv1d(channels, channels, kernel_size=1)

    def step(self, padded: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Run on input carrying ``context`` samples of left history; returns (next input, gated output)."""
        filter_path, gate_path = self.conv(padded).chunk(2, dim=1)
        z = gated_activation(filter_path, gate_path)
        return padded[..., self.context:] + self.residual(z), z

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        return self.step(F.pad(x, (self.context, 0)))


class Generator(nn.Module):
    """Causal, length-preserving mapping of ``(batch, 1, samples)`` audio."""

    def __init__(self, config: GeneratorConfig = GeneratorConfig()):
        super().__init__()
        self.config = config
        c = config.channels
        self.input_conv = nn.Conv1d(config.input_channels, c, kernel_size=1)
        self.layers = nn.ModuleList(GatedLayer(c, config.kernel_size, d) for d in config.dilations)
        self.post = nn.Conv1d(c * config.n_layers, config.output_channels, kernel_size=1)
        init_uniform_(self)

    @property
    def receptive_field(self) -> int:
        return receptive_field(self.config)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.input_conv(x)
        outputs = []
        for layer in self.layers:
            h, z = layer(h)
            outputs.append(z)
        return self.post(torch.cat(outputs, dim=1))

    def check_finite(self) -> None:
        bad = [name for name, p in self.named_parameters() if not torch.isfinite(p).all()]
        if bad:
            raise NumericalError(f"non-finite generator parameters: {', '.join(bad)}")


def as_batch(samples) -> torch.Tensor:
    """Coerce ``(samples,)``, ``(batch, samples)`` or ``(batch, 1, samples)`` to ``(batch, 1, samples)``."""
    x = torch.as_tensor(samples)
    if x.dim() == 1:
        return x.view(1, 1, -1)
    if x.dim() == 2:
        return x.unsqueeze(1)
    if x.dim() == 3 and x.shape[1] == 1:
        return x
    raise ValueError(f"expected mono audio, got shape {tuple(x.shape)}")


def generator_forward(x: AudioBuffer, model: Generator) -> AudioBuffer:
    """G(x) for one buffer, same length as the input."""
    if len(x) == 0:
        raise ValueError("generator input is empty")
    model.check_finite()
    param = next(model.parameters())
    with torch.no_grad():
        y = model(as_batch(torch.from_numpy(x.samples)).to(dtype=param.dtype, device=param.device))
    return AudioBuffer(y.reshape(-1).float().cpu().numpy(), x.sample_rate)


def generator_backward(output: torch.Tensor, upstream: torch.Tensor, model: Generator,
                       x: torch.Tensor) -> Tuple[Dict[str, torch.Tensor], torch.Tensor]:
    """Reverse-mode gradients of ``<upstream, output>`` w.r.t. every parameter and the input.

    ``output`` must come from ``model(x)`` with ``x.requires_grad`` set.
    """
    names, params = zip(*model.named_parameters())
    grads = torch.autograd.grad(output, (x, *params), grad_outputs=upstream,
                                retain_graph=True, allow_unused=True)
    grad_x = _or_zeros(grads[0], x)
    return {n: _or_zeros(g, p) for n, g, p in zip(names, grads[1:], params)}, grad_x


def _or_zeros(grad, like: torch.Tensor) -> torch.Tensor:
    return torch.zeros_like(like) if grad is None else grad
