"""
ampgan command line.

    ampgan synth toy/ --drive light
    ampgan preprocess toy/ data/train.txt --mode paired
    ampgan train data/train.txt runs/sup --mode supervised --validation data/val.txt
    ampgan evaluate runs/sup/best.safetensors val/
    ampgan process runs/sup/final.safetensors di.wav amp.wav
    ampgan benchmark runs/sup/final.safetensors

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch
from rich.console import Console
from rich.table import Table

from . import __version__
from .audio import (PreprocessPolicy, build_alternating_manifest, build_paired_manifest,
                    build_unpaired_manifest, find_pairs, load_audio, read_manifest, save_audio, write_manifest)
from .checkpoint import Checkpoint, load_generator
from .config import RunConfig, parse_text
from .discriminator import DiscriminatorConfig, MultiScaleDiscriminator
from .errors import USAGE_ERROR, AmpGanError, CheckpointError, ConfigError, ManifestError
from .generator import Generator, GeneratorConfig, receptive_field
from .metrics import METRIC_KEYS, MetricReport
from .streaming import StreamState, benchmark_realtime, process_buffer, stream_process
from .toy import DRIVES, write_toy_dataset
from .training import TrainConfig, evaluate_clips, train_adversarial, train_supervised

log = logging.getLogger(__name__)

# small enough for smoke runs on a laptop CPU
TINY = {
    "gen_stacks": 1,
    "gen_layers": 4,
    "gen_channels": 4,
    "n_mels": 32,
    "disc_kernel_sizes": (5, 3),
    "disc_channels": (8, 1),
    "disc_groups": (1, 1),
    "batch_size": 2,
    "iterations": 100,
    "checkpoint_every": 50,
    "validate_every": 50,
}

RESOLVED_CONFIG = "config.resolved.txt"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_ERROR, f"{self.prog}: error: {message}\n")


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then ``--tiny``, then ``--config`` file, then individual flags."""
    cfg = RunConfig.from_mapping(TINY) if getattr(args, "tiny", False) else RunConfig()
    if getattr(args, "config", None):
        cfg = RunConfig.from_file(args.config, cfg)
    overrides = {}
    for item in getattr(args, "set", None) or []:
        overrides.update(parse_text(item.replace("=", " = ", 1), "--set"))
    for key in ("mode", "manifest_mode", "discriminator", "scales", "iterations", "seed", "sample_rate", "block_size"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    return RunConfig.from_mapping(overrides, cfg) if overrides else cfg


def generator_config(cfg: RunConfig) -> GeneratorConfig:
    return GeneratorConfig(n_stacks=cfg.gen_stacks, layers_per_stack=cfg.gen_layers, kernel_size=cfg.gen_kernel_size,
                           dilation_growth=cfg.gen_dilation_growth, channels=cfg.gen_channels)


def build_discriminator(cfg: RunConfig, sample_rate: int) -> MultiScaleDiscriminator:
    try:
        base = DiscriminatorConfig(kernel_sizes=cfg.disc_kernel_sizes, channels=cfg.disc_channels,
                                   groups=cfg.disc_groups, leaky_slope=cfg.leaky_slope)
        return MultiScaleDiscriminator.build(cfg.discriminator, cfg.scales, sample_rate, base,
                                             cfg.n_mels, cfg.log_epsilon)
    except ValueError as e:
        raise ConfigError(f"discriminator layout: {e}") from e


def train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        batch_size=cfg.batch_size, segment_seconds=cfg.segment_seconds, iterations=cfg.iterations,
        lr_g=cfg.lr_g, lr_d=cfg.lr_d, beta1=cfg.beta1, beta2=cfg.beta2, adam_eps=cfg.adam_eps,
        d_steps_per_g_step=cfg.d_steps_per_g_step, representation=cfg.discriminator, scales=cfg.scales,
        preemph_coeff=cfg.preemph_coeff, checkpoint_every=cfg.checkpoint_every,
        validate_every=cfg.validate_every, fft_sizes=cfg.fft_sizes, log_epsilon=cfg.log_epsilon, seed=cfg.seed,
    )


def policy(cfg: RunConfig) -> PreprocessPolicy:
    return PreprocessPolicy(trim=cfg.trim_silence, threshold_db=cfg.silence_threshold_db,
                            window_ms=cfg.silence_window_ms, skip_seconds=cfg.skip_seconds,
                            clip_level=cfg.clip_level, clip_min_run=cfg.clip_min_run,
                            max_clip_ratio=cfg.max_clip_ratio)


def _wav_files(directory, pattern: str) -> List[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise ManifestError(f"not a directory: {directory}")
    files = sorted(p for p in directory.glob(pattern) if p.is_file())
    if not files:
        raise ManifestError(f"no files matching {pattern} in {directory}")
    return files


def cmd_preprocess(args) -> int:
    cfg = resolve_config(args)
    mode = cfg.manifest_mode
    pol = policy(cfg)
    if mode == "alternating":
        manifest = build_alternating_manifest(_wav_files(args.in_dir, args.glob), cfg.segment_seconds,
                                              cfg.sample_rate, pol)
    elif mode == "unpaired":
        if args.target_dir is None and args.target_glob is None:
            raise ConfigError("unpaired mode needs --target-dir or --target-glob to tell the target files apart")
        files_y = _wav_files(args.target_dir or args.in_dir, args.target_glob or "*.wav")
        manifest = build_unpaired_manifest(_wav_files(args.in_dir, args.glob), files_y, cfg.segment_seconds,
                                           cfg.sample_rate, pol)
    else:
        pairs = [(x, y) for _, x, y in find_pairs(args.in_dir)]
        warm_up = receptive_field(generator_config(cfg)) - 1
        manifest = build_paired_manifest(pairs, cfg.segment_seconds, cfg.sample_rate, pol, warm_up)
    path = write_manifest(manifest, args.out_manifest)
    log.info(f"✅ {mode} manifest {path}: {len(manifest.input_segments)} input, "
             f"{len(manifest.target_segments)} target segments of {manifest.segment_length_samples} samples")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    manifest = read_manifest(args.manifest)
    if manifest.sample_rate != cfg.sample_rate:
        raise ConfigError(f"manifest is at {manifest.sample_rate} Hz but sample_rate = {cfg.sample_rate}")
    if cfg.mode == "supervised" and not manifest.paired:
        raise ConfigError(f"supervised training needs a paired manifest, {args.manifest} is {manifest.mode}")
    if cfg.mode == "adversarial" and manifest.paired:
        raise ConfigError(f"adversarial training needs an unpaired manifest, {args.manifest} is paired")
    validation = read_manifest(args.validation) if args.validation else None
    if validation is not None and not validation.paired:
        raise ConfigError(f"validation manifest {args.validation} must be paired")

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / RESOLVED_CONFIG).write_text(cfg.to_text(), encoding="utf-8")

    torch.manual_seed(cfg.seed)
    generator = Generator(generator_config(cfg))
    log.info(f"🎸 generator: {generator.config.n_layers} layers, receptive field {generator.receptive_field} samples")
    tc = train_config(cfg)
    run = cfg.as_dict()
    if cfg.mode == "adversarial":
        disc = build_discriminator(cfg, manifest.sample_rate)
        result = train_adversarial(manifest, generator, disc, tc, out_dir, validation, args.resume, run)
    else:
        result = train_supervised(manifest, generator, tc, out_dir, validation, args.resume, run)

    if result.best_checkpoint is not None:
        log.info(f"🏁 best {result.best_metric:.4g} -> {result.best_checkpoint}")
    log.info(f"✅ {len(result.checkpoints)} checkpoint(s) in {out_dir}")
    return 0


def _report_table(report: MetricReport, title: str) -> Table:
    table = Table(title=title)
    table.add_column("clip")
    for key in METRIC_KEYS:
        table.add_column(key, justify="right")
    for clip in report.clips:
        table.add_row(clip.name, *(f"{clip.values[k]:.6g}" for k in METRIC_KEYS))
    table.add_row("[bold]all[/bold]", *(f"{v:.6g}" for v in report.as_dict().values()))
    return table


def _saved_train_config(ckpt: Checkpoint, path) -> TrainConfig:
    """Metric settings of the run that wrote ``ckpt``; defaults when it carries none."""
    try:
        return train_config(RunConfig.from_mapping(ckpt.config.get("run") or {}))
    except (ConfigError, ValueError) as e:
        raise CheckpointError(f"{path}: unusable run config: {e}") from e


def cmd_evaluate(args) -> int:
    model, ckpt = load_generator(args.checkpoint)
    clips = []
    for name, x_path, y_path in find_pairs(args.paired_dir):
        clips.append((name, load_audio(x_path), load_audio(y_path)))
    report = evaluate_clips(model, clips, _saved_train_config(ckpt, args.checkpoint))
    Console().print(_report_table(report, f"{Path(args.checkpoint).name} (step {ckpt.step})"))
    out = Path(args.out) if args.out else Path(args.checkpoint).with_suffix(".metrics.txt")
    out.write_text(report.to_keyvalue(), encoding="utf-8")
    log.info(f"✅ metrics written to {out}")
    return 0


def _process_raw(model: Generator, sample_rate: int, block_size: int, stdin=None, stdout=None) -> int:
    """Stream little-endian float32 samples from stdin to stdout."""
    stdin = stdin or sys.stdin.buffer
    stdout = stdout or sys.stdout.buffer
    state = StreamState(model, sample_rate)
    pending = b""
    total = 0
    while True:
        chunk = stdin.read(4 * block_size)
        if not chunk:
            break
        data = pending + chunk
        usable = len(data) - len(data) % 4
        pending = data[usable:]
        if not usable:
            continue
        samples = np.frombuffer(data[:usable], dtype="<f4")
        out = stream_process(state, samples).samples
        stdout.write(out.astype("<f4").tobytes())
        stdout.flush()
        total += samples.size
    if pending:
        log.warning(f"⚠️ dropped {len(pending)} trailing byte(s) that do not form a float32 sample")
    log.debug(f"processed {total} raw samples")
    return 0


def cmd_process(args) -> int:
    model, ckpt = load_generator(args.checkpoint)
    sample_rate = int(ckpt.config.get("sample_rate", 44100))
    if args.raw:
        return _process_raw(model, sample_rate, args.block_size)
    if not args.in_wav or not args.out_wav:
        raise ConfigError("process needs IN_WAV and OUT_WAV unless --raw is given")
    x = load_audio(args.in_wav)
    if x.sample_rate != sample_rate:
        log.warning(f"⚠️ {args.in_wav} is {x.sample_rate} Hz, the model was trained at {sample_rate} Hz")
    y = process_buffer(model, x, args.block_size)
    clipped = save_audio(y, args.out_wav, args.bit_depth)
    log.info(f"✅ {args.out_wav}: {len(y)} samples at {y.sample_rate} Hz" + (f", {clipped} clipped" if clipped else ""))
    return 0


def cmd_benchmark(args) -> int:
    cfg = resolve_config(args)
    if args.checkpoint:
        model, ckpt = load_generator(args.checkpoint)
        sample_rate = int(ckpt.config.get("sample_rate", cfg.sample_rate))
    else:
        torch.manual_seed(cfg.seed)
        model, sample_rate = Generator(generator_config(cfg)), cfg.sample_rate
    seconds = args.seconds or cfg.benchmark_seconds
    factor = benchmark_realtime(model, seconds, cfg.block_size, sample_rate, cfg.seed)

    table = Table(title="real-time benchmark")
    for column in ("layers", "channels", "block", "sample rate", "seconds", "real-time factor"):
        table.add_column(column, justify="right")
    table.add_row(str(model.config.n_layers), str(model.config.channels), str(cfg.block_size),
                  str(sample_rate), f"{seconds:g}", f"{factor:.3f}")
    Console().print(table)
    if factor >= 1.0:
        log.warning("⚠️ slower than real time")
    return 0


def cmd_synth(args) -> int:
    write_toy_dataset(args.out_dir, args.clips, args.seconds, args.drive, args.sample_rate, args.seed)
    return 0


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="RunConfig file of 'key = value' lines")
    p.add_argument("--tiny", action="store_true", help="start from a miniature model preset for smoke runs")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one RunConfig key (repeatable)")
    p.add_argument("--seed", type=int, help="seed for initialization and sampling")
    p.add_argument("--sample-rate", type=int, dest="sample_rate", help="expected sample rate (Hz)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ampgan", description="Guitar amplifier timbre emulation with spectral GANs")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("preprocess", help="trim, reject clipped audio and write a segment manifest")
    p.add_argument("in_dir", help="directory of WAV files (input domain for unpaired mode)")
    p.add_argument("out_manifest", help="manifest file to write")
    p.add_argument("--mode", dest="manifest_mode", choices=("alternating", "unpaired", "paired"), help="domain split")
    p.add_argument("--glob", default="*.wav", help="file pattern inside IN_DIR")
    p.add_argument("--target-dir", help="target-domain directory for unpaired mode (default: IN_DIR)")
    p.add_argument("--target-glob", help="file pattern inside the target directory (default: *.wav; "
                   "unpaired mode needs this or --target-dir)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a generator",
                       formatter_class=argparse.RawDescriptionHelpFormatter,
                       epilog="RunConfig keys (set in --config files or with --set KEY=VALUE):\n"
                              + RunConfig.help_text())
    p.add_argument("manifest", help="training manifest (unpaired for adversarial, paired for supervised)")
    p.add_argument("out_dir", help="directory for checkpoints, loss log and resolved config")
    p.add_argument("--validation", help="paired validation manifest")
    p.add_argument("--resume", help="training checkpoint to continue from")
    p.add_argument("--mode", choices=("adversarial", "supervised"))
    p.add_argument("--discriminator", choices=("spec", "mel", "log-spec", "log-mel"))
    p.add_argument("--scales", type=int, help="number of sub-discriminators")
    p.add_argument("--iterations", type=int)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="metrics of a generator over <name>-input.wav/<name>-target.wav pairs")
    p.add_argument("checkpoint")
    p.add_argument("paired_dir")
    p.add_argument("--out", help="key-value metrics file (default: next to the checkpoint)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("process", help="run a generator over a WAV file or a raw float32 stream")
    p.add_argument("checkpoint")
    p.add_argument("in_wav", nargs="?")
    p.add_argument("out_wav", nargs="?")
    p.add_argument("--block-size", type=int, default=512, help="streaming block size (samples)")
    p.add_argument("--bit-depth", type=int, choices=(16, 24, 32), default=32)
    p.add_argument("--raw", action="store_true", help="read float32 LE from stdin, write float32 LE to stdout")
    p.set_defaults(func=cmd_process)

    p = sub.add_parser("benchmark", help="measure the streaming real-time factor")
    p.add_argument("checkpoint", nargs="?", help="generator checkpoint (default: untrained model from the config)")
    p.add_argument("--seconds", type=float, help="audio duration to stream")
    p.add_argument("--block-size", type=int, dest="block_size")
    _add_config_flags(p)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("synth", help="write a toy plucked-string / tanh-distortion paired dataset")
    p.add_argument("out_dir")
    p.add_argument("--clips", type=int, default=4)
    p.add_argument("--seconds", type=float, default=30.0, help="length of each clip")
    p.add_argument("--drive", choices=tuple(DRIVES), default="light")
    p.add_argument("--sample-rate", type=int, default=44100, dest="sample_rate")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(message)s")
    try:
        return args.func(args)
    except AmpGanError as e:
        log.error(f"❌ {e}")
        raise SystemExit(e.exit_code) from e
    except ValueError as e:
        log.error(f"❌ {e}")
        raise SystemExit(USAGE_ERROR) from e


if __name__ == "__main__":
    sys.exit(main())
