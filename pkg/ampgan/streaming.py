"""
Block-based real-time inference for a trained generator.

Each gated layer keeps exactly (kernel_size - 1) * dilation samples of its
input history, so any partition of a signal into blocks yields the same
output as one offline pass over the whole signal.
"""
import copy
import logging
import time
from typing import List, Optional, Union

import numpy as np
import torch

from .audio import AudioBuffer
from .generator import Generator, GeneratorConfig

log = logging.getLogger(__name__)


class StreamState:
    """Per-stream layer histories; confine one instance to one thread at a time."""

    def __init__(self, model: Generator, sample_rate: Optional[int] = None):
        model.check_finite()
        if next(model.parameters()).dtype != torch.float32:
            model = copy.deepcopy(model).float()
        self.model = model
        self.config: GeneratorConfig = model.config
        self.sample_rate = sample_rate
        self.histories: List[torch.Tensor] = [
            torch.zeros(1, self.config.channels, layer.context) for layer in model.layers
        ]
        self._warned_rate = False


def stream_reset(state: StreamState) -> None:
    for history in state.histories:
        history.zero_()
    state._warned_rate = False


def _process_tensor(state: StreamState, x: torch.Tensor) -> torch.Tensor:
    model = state.model
    h = model.input_conv(x)
    outputs = []
    for layer, history in zip(model.layers, state.histories):
        padded = torch.cat((history, h), dim=-1)
        if layer.context:
            history.copy_(padded[..., padded.shape[-1] - layer.context:])
        h, z = layer.step(padded)
        outputs.append(z)
    return model.post(torch.cat(outputs, dim=1))


def stream_process(state: StreamState, block: Union[AudioBuffer, np.ndarray]) -> AudioBuffer:
    """Process the next block of the stream; output has the block's length."""
    if isinstance(block, AudioBuffer):
        samples, rate = block.samples, block.sample_rate
        if state.sample_rate and rate != state.sample_rate and not state._warned_rate:
            log.warning(f"⚠️ block rate {rate} Hz differs from the model's {state.sample_rate} Hz")
            state._warned_rate = True
    else:
        samples, rate = np.asarray(block, dtype=np.float32), state.sample_rate or 44100
    if samples.shape[0] < 1:
        raise ValueError("block must contain at least one sample")

    with torch.inference_mode():
        y = _process_tensor(state, torch.from_numpy(np.ascontiguousarray(samples, dtype=np.float32)).view(1, 1, -1))
    return AudioBuffer(y.view(-1).numpy(), rate)


def process_buffer(model: Generator, buffer: AudioBuffer, block_size: int = 65536) -> AudioBuffer:
    """Run a whole buffer through a fresh stream; memory stays bounded by ``block_size``."""
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    state = StreamState(model, buffer.sample_rate)
    out = np.empty(len(buffer), dtype=np.float32)
    for start in range(0, len(buffer), block_size):
        stop = min(start + block_size, len(buffer))
        out[start:stop] = stream_process(state, buffer.samples[start:stop]).samples
    return AudioBuffer(out, buffer.sample_rate)


def benchmark_realtime(model: Generator, seconds: float = 10.0, block_size: int = 512,
                       sample_rate: int = 44100, seed: int = 0) -> float:
    """Wall time of streaming ``seconds`` of seeded noise divided by its duration."""
    if seconds <= 0:
        raise ValueError("seconds must be positive")
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    gen = torch.Generator().manual_seed(seed)
    n = int(round(seconds * sample_rate))
    noise = (torch.rand(n, generator=gen) * 2 - 1).mul_(0.5).numpy()

    state = StreamState(model, sample_rate)
    stream_process(state, noise[:block_size])
    stream_reset(state)

    t0 = time.perf_counter()
    for start in range(0, n, block_size):
        stream_process(state, noise[start:start + block_size])
    elapsed = time.perf_counter() - t0
    factor = elapsed / (n / sample_rate)
    log.info(f"⏱️ {n} samples in blocks of {block_size}: {elapsed:.3f}s, real-time factor {factor:.3f}")
    return factor
