"""
Adversarial (hinge loss) and supervised (ESR) training of the generator.

Each adversarial iteration draws ``batch_size`` input segments and
``batch_size`` target segments independently, updates the discriminator on

    L(D) = E_y[max(0, 1 - D(y))] + E_x[max(0, 1 + D(G(x)))]

and then the generator on

    L(G) = E_x[-D(G(x))]

with gradients flowing back through the discriminator and its spectral
front-end. Multi-scale terms are averaged over sub-discriminators.

Loss log, one line per iteration:

    <iter> <loss_d> <loss_g> [e_ms=... e_lms=... e_mel=... e_lmel=... e_esr=...]

Supervised runs write ``-`` in the loss_d column.
"""
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

from .audio import AudioBuffer, DatasetManifest, SegmentLoader
from .checkpoint import (Checkpoint, generator_checkpoint, load_checkpoint, optimizer_tensors,
                         restore_optimizer, save_checkpoint)
from .discriminator import MultiScaleDiscriminator
from .errors import CheckpointError, ManifestError, NumericalError
from .generator import Generator, as_batch
from .metrics import (DEFAULT_FFT_SIZES, MATCHED_METRIC, ClipMetrics, MetricReport, compute_metrics,
                      esr_loss)
from .streaming import process_buffer

log = logging.getLogger(__name__)

Scores = Union[torch.Tensor, Sequence[torch.Tensor], Sequence[float]]


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 5
    segment_seconds: float = 2.0
    iterations: int = 400000
    lr_g: float = 1e-4
    lr_d: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    d_steps_per_g_step: int = 1
    representation: str = "log-mel"
    scales: int = 3
    preemph_coeff: float = 0.85
    checkpoint_every: int = 5000
    validate_every: int = 5000
    fft_sizes: Tuple[int, ...] = DEFAULT_FFT_SIZES
    log_epsilon: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


def _per_scale(scores: Scores) -> List[torch.Tensor]:
    if isinstance(scores, torch.Tensor):
        return [scores]
    scores = list(scores)
    if scores and all(isinstance(s, torch.Tensor) for s in scores):
        return scores
    return [torch.as_tensor(scores, dtype=torch.float64)]


def hinge_loss_d(real_scores: Scores, fake_scores: Scores) -> torch.Tensor:
    """mean(max(0, 1 - real)) + mean(max(0, 1 + fake)), averaged over scales."""
    real, fake = _per_scale(real_scores), _per_scale(fake_scores)
    if len(real) != len(fake):
        raise ValueError(f"{len(real)} real vs {len(fake)} fake score sets")
    if any(r.numel() == 0 for r in real) or any(f.numel() == 0 for f in fake):
        raise ValueError("score lists must be nonempty")
    terms = [F.relu(1.0 - r).mean() + F.relu(1.0 + f).mean() for r, f in zip(real, fake)]
    return torch.stack(terms).mean()


def hinge_loss_g(fake_scores: Scores) -> torch.Tensor:
    fake = _per_scale(fake_scores)
    if any(f.numel() == 0 for f in fake):
        raise ValueError("score list must be nonempty")
    return torch.stack([-f.mean() for f in fake]).mean()


def make_adam(params: Iterable[torch.nn.Parameter], lr: float, config: TrainConfig = TrainConfig()) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=(config.beta1, config.beta2), eps=config.adam_eps)


def adam_step(optimizer: torch.optim.Optimizer) -> bool:
    """Apply one update from the accumulated gradients; skip it if any gradient is non-finite."""
    for group in optimizer.param_groups:
        for p in group["params"]:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                log.warning("⚠️ non-finite gradient, update skipped")
                optimizer.zero_grad(set_to_none=True)
                return False
    optimizer.step()
    return True


class BatchSampler:
    """Seeded sampling with replacement; unpaired draws input and target indices independently."""

    def __init__(self, n_input: int, n_target: int, batch_size: int, seed: int = 0, paired: bool = False):
        if n_input < 1 or n_target < 1:
            raise ManifestError("both domains need at least one segment")
        if paired and n_input != n_target:
            raise ManifestError("paired sampling needs equal domain sizes")
        self.n_input, self.n_target = n_input, n_target
        self.batch_size = batch_size
        self.paired = paired
        self.generator = torch.Generator().manual_seed(seed)

    def draw(self) -> Tuple[torch.Tensor, torch.Tensor]:
        x = torch.randint(self.n_input, (self.batch_size,), generator=self.generator)
        if self.paired:
            return x, x.clone()
        return x, torch.randint(self.n_target, (self.batch_size,), generator=self.generator)


@dataclass
class TrainResult:
    losses: List[Tuple[int, float, float]] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)
    best_checkpoint: Optional[Path] = None
    best_metric: Optional[float] = None
    reports: List[Tuple[int, MetricReport]] = field(default_factory=list)


class LossLog:
    """Append-only text log; reopening at ``start`` drops lines from an abandoned tail."""

    def __init__(self, path: Path, start: int = 0):
        self.path = Path(path)
        kept = []
        if start > 0 and self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                if line and int(line.split()[0]) < start:
                    kept.append(line)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("".join(f"{line}\n" for line in kept), encoding="utf-8")

    def write(self, iteration: int, loss_d: Optional[float], loss_g: float, report: Optional[MetricReport] = None):
        cols = [str(iteration), "-" if loss_d is None else f"{loss_d:.9g}", f"{loss_g:.9g}"]
        if report is not None:
            cols += [f"{k}={v:.9g}" for k, v in report.as_dict().items()]
        with self.path.open("a", encoding="utf-8") as f:
            f.write(" ".join(cols) + "\n")


def _to_model(batch: np.ndarray, model: torch.nn.Module) -> torch.Tensor:
    param = next(model.parameters())
    return as_batch(torch.from_numpy(np.ascontiguousarray(batch))).to(dtype=param.dtype, device=param.device)


def _check_finite(value: float, what: str, iteration: int, out_dir: Path, tensors) -> None:
    if math.isfinite(value):
        return
    path = save_checkpoint(Checkpoint("training", {"failed": what}, tensors(), iteration), out_dir / "diagnostic.safetensors")
    raise NumericalError(f"non-finite {what} at iteration {iteration}; state written to {path}")


def validate(model: Generator, manifest: DatasetManifest, config: TrainConfig = TrainConfig(),
             loader: Optional[SegmentLoader] = None) -> MetricReport:
    """Metrics of G over every pair in a paired manifest."""
    if not manifest.paired:
        raise ManifestError("validation needs a paired manifest")
    loader = loader or SegmentLoader(manifest)
    clips = []
    for x_seg, y_seg in zip(manifest.input_segments, manifest.target_segments):
        name = f"{Path(x_seg.path).stem}@{x_seg.start}"
        clips.append(_clip_metrics(model, name, loader.read(x_seg), loader.read(y_seg), manifest.sample_rate, config))
    return MetricReport.aggregate(clips)


def evaluate_clips(model: Generator, clips: Iterable[Tuple[str, AudioBuffer, AudioBuffer]],
                   config: TrainConfig = TrainConfig()) -> MetricReport:
    results = []
    for name, x, y in clips:
        if len(x) != len(y):
            raise ManifestError(f"{name}: input has {len(x)} samples, target {len(y)}")
        results.append(_clip_metrics(model, name, x.samples, y.samples, x.sample_rate, config))
    return MetricReport.aggregate(results)


def _clip_metrics(model: Generator, name: str, x: np.ndarray, y: np.ndarray, sample_rate: int,
                  config: TrainConfig) -> ClipMetrics:
    out = process_buffer(model, AudioBuffer(x, sample_rate))
    try:
        values = compute_metrics(torch.from_numpy(out.samples), torch.from_numpy(np.ascontiguousarray(y)),
                                 sample_rate, config.fft_sizes, config.preemph_coeff,
                                 log_epsilon=config.log_epsilon)
    except ValueError as e:
        raise ManifestError(f"{name}: {e}") from e
    return ClipMetrics(name, len(x), values)


class _Run:
    """Bookkeeping shared by both training modes: checkpoints, validation, best model."""

    def __init__(self, out_dir, config: TrainConfig, generator: Generator, sample_rate: int,
                 validation: Optional[DatasetManifest], metric: str, run: Optional[dict],
                 extra: Optional[dict] = None):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.config = config
        self.generator = generator
        self.sample_rate = sample_rate
        self.validation = validation
        self.val_loader = SegmentLoader(validation) if validation is not None else None
        self.metric = metric
        self.run = run or {}
        self.extra = extra or {}
        self.result = TrainResult()

    def maybe_validate(self, step: int) -> Optional[MetricReport]:
        every = self.config.validate_every
        if self.validation is None or every <= 0 or (step % every and step != self.config.iterations):
            return None
        report = validate(self.generator, self.validation, self.config, self.val_loader)
        value = report.get(self.metric)
        self.result.reports.append((step, report))
        log.info(f"📊 step {step}: " + " ".join(f"{k}={v:.4g}" for k, v in report.as_dict().items()))
        if self.result.best_metric is None or value < self.result.best_metric:
            self.result.best_metric = value
            self.result.best_checkpoint = save_checkpoint(self._generator_ckpt(step), self.out_dir / "best.safetensors")
            log.info(f"✅ new best {self.metric} = {value:.4g} at step {step}")
        return report

    def _generator_ckpt(self, step: int) -> Checkpoint:
        return generator_checkpoint(self.generator, step, self.config.seed, self.sample_rate, self.run)

    def maybe_checkpoint(self, step: int, tensors) -> None:
        if step % self.config.checkpoint_every and step != self.config.iterations:
            return
        ckpt = Checkpoint("training", self.state_config(), tensors(), step, self.config.seed)
        path = save_checkpoint(ckpt, self.out_dir / f"ckpt_{step:07d}.safetensors")
        self.result.checkpoints.append(path)
        log.info(f"💾 checkpoint {path.name}")

    def state_config(self) -> dict:
        gen = generator_checkpoint(self.generator, sample_rate=self.sample_rate, run=self.run).config
        return {**gen, **self.extra, "best_metric": self.result.best_metric}

    def finish(self, step: int) -> TrainResult:
        save_checkpoint(self._generator_ckpt(step), self.out_dir / "final.safetensors")
        return self.result


def _resume(path, generator: Generator, opt_g, sampler: BatchSampler,
            discriminator: Optional[MultiScaleDiscriminator] = None, opt_d=None) -> Tuple[int, Optional[float]]:
    ckpt = load_checkpoint(path, kind="training")
    try:
        generator.load_state_dict(ckpt.subset("generator."))
        restore_optimizer(opt_g, ckpt.subset("optim_g."))
        if discriminator is not None:
            discriminator.load_state_dict(ckpt.subset("discriminator."))
            restore_optimizer(opt_d, ckpt.subset("optim_d."))
        sampler.generator.set_state(ckpt.tensors["rng.sampler"])
    except (RuntimeError, KeyError, ValueError) as e:
        raise CheckpointError(f"{path}: cannot resume: {e}") from e
    log.info(f"▶️ resuming from step {ckpt.step}")
    return ckpt.step, ckpt.config.get("best_metric")


def train_adversarial(manifest: DatasetManifest, generator: Generator, discriminator: MultiScaleDiscriminator,
                      config: TrainConfig, out_dir, validation: Optional[DatasetManifest] = None,
                      resume=None, run: Optional[dict] = None) -> TrainResult:
    manifest.validate()
    window = discriminator.longest_window
    if manifest.segment_length_samples < window:
        raise ManifestError(f"segments of {manifest.segment_length_samples} samples are shorter than the {window}-sample window")

    loader = SegmentLoader(manifest)
    sampler = BatchSampler(len(manifest.input_segments), len(manifest.target_segments), config.batch_size, config.seed)
    opt_g = make_adam(generator.parameters(), config.lr_g, config)
    opt_d = make_adam(discriminator.parameters(), config.lr_d, config)
    out_dir = Path(out_dir)

    def tensors():
        t = {f"generator.{k}": v for k, v in generator.state_dict().items()}
        t.update({f"discriminator.{k}": v for k, v in discriminator.state_dict().items()})
        t.update(optimizer_tensors(opt_g, "optim_g."))
        t.update(optimizer_tensors(opt_d, "optim_d."))
        t["rng.sampler"] = sampler.generator.get_state()
        return t

    state = _Run(out_dir, config, generator, manifest.sample_rate, validation,
                 MATCHED_METRIC.get(config.representation, "e_lmel"), run,
                 extra={"discriminators": [asdict(c) for c in discriminator.configs]})
    start = 0
    if resume is not None:
        start, state.result.best_metric = _resume(resume, generator, opt_g, sampler, discriminator, opt_d)
    loss_log = LossLog(out_dir / "losses.txt", start)

    for it in tqdm(range(start, config.iterations), desc="adversarial", unit="it", initial=start,
                   total=config.iterations, disable=None):
        x_idx, y_idx = sampler.draw()
        x = _to_model(loader.batch([manifest.input_segments[i] for i in x_idx]), generator)
        y = _to_model(loader.batch([manifest.target_segments[i] for i in y_idx]), generator)

        discriminator.requires_grad_(True)
        for _ in range(config.d_steps_per_g_step):
            with torch.no_grad():
                fake = generator(x)
            loss_d = hinge_loss_d(discriminator(y), discriminator(fake))
            opt_d.zero_grad(set_to_none=True)
            loss_d.backward()
            _check_finite(loss_d.item(), "discriminator loss", it, out_dir, tensors)
            adam_step(opt_d)

        discriminator.requires_grad_(False)
        loss_g = hinge_loss_g(discriminator(generator(x)))
        opt_g.zero_grad(set_to_none=True)
        loss_g.backward()
        _check_finite(loss_g.item(), "generator loss", it, out_dir, tensors)
        adam_step(opt_g)

        step = it + 1
        report = state.maybe_validate(step)
        loss_log.write(it, loss_d.item(), loss_g.item(), report)
        state.result.losses.append((it, loss_d.item(), loss_g.item()))
        state.maybe_checkpoint(step, tensors)

    discriminator.requires_grad_(True)
    return state.finish(config.iterations)


def train_supervised(manifest: DatasetManifest, generator: Generator, config: TrainConfig, out_dir,
                     validation: Optional[DatasetManifest] = None, resume=None,
                     run: Optional[dict] = None) -> TrainResult:
    """Minimize pre-emphasized ESR on paired segments, ignoring the first receptive_field - 1 samples."""
    if not manifest.paired:
        raise ManifestError("supervised training needs a paired manifest")
    manifest.validate()
    skip = generator.receptive_field - 1
    if manifest.segment_length_samples <= skip:
        raise ManifestError(f"segments of {manifest.segment_length_samples} samples leave nothing after the {skip}-sample warm-up")

    loader = SegmentLoader(manifest)
    silent = [f"{Path(s.path).name}@{s.start}" for s in manifest.target_segments if not np.any(loader.read(s)[skip:])]
    if silent:
        raise ManifestError(f"{len(silent)} target segment(s) silent after the {skip}-sample warm-up: {', '.join(silent[:5])}")
    n = len(manifest.input_segments)
    sampler = BatchSampler(n, n, config.batch_size, config.seed, paired=True)
    opt_g = make_adam(generator.parameters(), config.lr_g, config)
    out_dir = Path(out_dir)

    def tensors():
        t = {f"generator.{k}": v for k, v in generator.state_dict().items()}
        t.update(optimizer_tensors(opt_g, "optim_g."))
        t["rng.sampler"] = sampler.generator.get_state()
        return t

    state = _Run(out_dir, config, generator, manifest.sample_rate, validation, MATCHED_METRIC["supervised"], run)
    start = 0
    if resume is not None:
        start, state.result.best_metric = _resume(resume, generator, opt_g, sampler)
    loss_log = LossLog(out_dir / "losses.txt", start)

    for it in tqdm(range(start, config.iterations), desc="supervised", unit="it", initial=start,
                   total=config.iterations, disable=None):
        idx, _ = sampler.draw()
        x = _to_model(loader.batch([manifest.input_segments[i] for i in idx]), generator)
        y = _to_model(loader.batch([manifest.target_segments[i] for i in idx]), generator)

        loss = supervised_loss(generator(x), y, skip, config.preemph_coeff)
        opt_g.zero_grad(set_to_none=True)
        loss.backward()
        _check_finite(loss.item(), "supervised loss", it, out_dir, tensors)
        adam_step(opt_g)

        step = it + 1
        report = state.maybe_validate(step)
        loss_log.write(it, None, loss.item(), report)
        state.result.losses.append((it, float("nan"), loss.item()))
        state.maybe_checkpoint(step, tensors)

    return state.finish(config.iterations)


def supervised_loss(output: torch.Tensor, target: torch.Tensor, skip: int, preemph_coeff: float = 0.85) -> torch.Tensor:
    """ESR over samples ``skip:``; target values before ``skip`` never reach the loss."""
    return esr_loss(output[..., skip:], target[..., skip:], preemph_coeff)
