import io
import os
import tempfile
import unittest
from unittest import mock

import numpy as np
import soundfile as sf

from ampgan.audio import AudioBuffer, find_pairs, load_audio, read_manifest, save_audio
from ampgan.checkpoint import load_generator
from ampgan.cli import TINY, _process_raw, build_parser, main, resolve_config
from ampgan.config import RunConfig
from ampgan.generator import Generator, GeneratorConfig
from ampgan.metrics import METRIC_KEYS
from ampgan.streaming import process_buffer
from ampgan.training import TrainConfig, evaluate_clips

SR = 8000


def run(*argv):
    """Run the CLI and return its exit code."""
    try:
        return main(list(argv))
    except SystemExit as e:
        return e.code


class CliCase(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = self.tmp.name

    def tearDown(self):
        self.tmp.cleanup()

    def path(self, *parts):
        return os.path.join(self.dir, *parts)


class TestResolveConfig(unittest.TestCase):
    def test_precedence(self):
        with tempfile.TemporaryDirectory() as d:
            cfg_path = os.path.join(d, 'run.txt')
            with open(cfg_path, 'w') as f:
                f.write('scales = 2\nseed = 5\ngen_channels = 6\n')
            args = build_parser().parse_args(['train', 'm.txt', 'out', '--tiny', '--config', cfg_path,
                                              '--set', 'seed=9', '--set', 'lr_g=3e-4', '--scales', '1'])
            cfg = resolve_config(args)
        self.assertEqual(cfg.gen_layers, TINY['gen_layers'])
        self.assertEqual(cfg.gen_channels, 6)
        self.assertEqual(cfg.seed, 9)
        self.assertEqual(cfg.lr_g, 3e-4)
        self.assertEqual(cfg.scales, 1)

    def test_unknown_set_key_is_usage_error(self):
        self.assertEqual(run('benchmark', '--set', 'warp=9'), 1)

    def test_bad_flag_is_usage_error(self):
        with mock.patch('sys.stderr', new_callable=io.StringIO):
            self.assertEqual(run('train', 'm.txt', 'out', '--scales', 'three'), 1)

    def test_train_help_lists_every_key(self):
        with mock.patch('sys.stdout', new_callable=io.StringIO) as out:
            self.assertEqual(run('train', '--help'), 0)
        for key in RunConfig.keys():
            self.assertIn(key, out.getvalue())


class TestPreprocess(CliCase):
    def write_sine(self, name, seconds, directory='raw'):
        t = np.arange(int(seconds * SR)) / SR
        os.makedirs(self.path(directory), exist_ok=True)
        save_audio(AudioBuffer((0.5 * np.sin(2 * np.pi * 220 * t)).astype(np.float32), SR), self.path(directory, name))

    def test_alternating_split(self):
        self.write_sine('riff.wav', 10.0)
        args = ('preprocess', self.path('raw'), self.path('train.txt'), '--mode', 'alternating',
                '--sample-rate', str(SR), '--set', 'trim_silence=no')
        self.assertEqual(run(*args), 0)
        manifest = read_manifest(self.path('train.txt'))
        self.assertEqual((len(manifest.input_segments), len(manifest.target_segments)), (3, 2))
        self.assertEqual([s.start for s in manifest.input_segments], [0, 32000, 64000])

        first = open(self.path('train.txt'), 'rb').read()
        self.assertEqual(run(*args), 0)
        self.assertEqual(open(self.path('train.txt'), 'rb').read(), first)

    def test_unpaired_needs_target_side(self):
        self.write_sine('di.wav', 10.0)
        self.write_sine('amp.wav', 10.0, 'amp')
        base = ('preprocess', self.path('raw'), self.path('m.txt'), '--mode', 'unpaired',
                '--sample-rate', str(SR), '--set', 'trim_silence=no')
        self.assertEqual(run(*base), 1)
        self.assertFalse(os.path.exists(self.path('m.txt')))

        self.assertEqual(run(*base, '--target-dir', self.path('amp')), 0)
        manifest = read_manifest(self.path('m.txt'))
        self.assertEqual(manifest.mode, 'unpaired')
        self.assertEqual((len(manifest.input_segments), len(manifest.target_segments)), (5, 5))

    def test_empty_directory_is_data_error(self):
        os.makedirs(self.path('empty'))
        self.assertEqual(run('preprocess', self.path('empty'), self.path('m.txt')), 2)
        self.assertFalse(os.path.exists(self.path('m.txt')))

    def test_rate_mismatch_is_data_error(self):
        self.write_sine('riff.wav', 5.0)
        self.assertEqual(run('preprocess', self.path('raw'), self.path('m.txt'), '--sample-rate', '44100'), 2)


class TestPipeline(CliCase):
    """synth -> preprocess -> train -> process / evaluate on a miniature configuration."""

    def setUp(self):
        super().setUp()
        self.assertEqual(run('synth', self.path('toy'), '--clips', '2', '--seconds', '5',
                             '--sample-rate', str(SR), '--drive', 'light'), 0)

    def preprocess(self, manifest, *extra):
        return run('preprocess', self.path('toy'), self.path(manifest), '--sample-rate', str(SR), *extra)

    def test_synth_writes_pairs(self):
        names = sorted(os.listdir(self.path('toy')))
        self.assertEqual(names, ['clip000-input.wav', 'clip000-target.wav', 'clip001-input.wav', 'clip001-target.wav'])
        info = sf.info(self.path('toy', 'clip000-input.wav'))
        self.assertEqual((info.samplerate, info.frames), (SR, 5 * SR))

    def test_train_process_evaluate(self):
        self.assertEqual(self.preprocess('train.txt', '--mode', 'alternating', '--glob', '*-input.wav'), 0)
        self.assertEqual(run('train', self.path('train.txt'), self.path('run'), '--tiny', '--sample-rate', str(SR),
                             '--iterations', '4', '--set', 'checkpoint_every=2'), 0)
        self.assertTrue(os.path.exists(self.path('run', 'ckpt_0000002.safetensors')))
        self.assertTrue(os.path.exists(self.path('run', 'final.safetensors')))
        resolved = RunConfig.from_file(self.path('run', 'config.resolved.txt'))
        self.assertEqual((resolved.iterations, resolved.gen_channels, resolved.sample_rate), (4, 4, SR))
        self.assertEqual(len(open(self.path('run', 'losses.txt')).read().splitlines()), 4)

        ckpt = self.path('run', 'final.safetensors')
        self.assertEqual(run('process', ckpt, self.path('toy', 'clip000-input.wav'), self.path('out.wav')), 0)
        self.assertEqual(len(load_audio(self.path('out.wav'))), 5 * SR)

        with mock.patch('sys.stdout', new_callable=io.StringIO):
            self.assertEqual(run('evaluate', ckpt, self.path('toy'), '--out', self.path('metrics.txt')), 0)
        lines = open(self.path('metrics.txt')).read().splitlines()
        self.assertEqual([line.split(' = ')[0] for line in lines[:5]], list(METRIC_KEYS))
        self.assertIn('clip001.e_esr', open(self.path('metrics.txt')).read())

    def test_supervised_needs_paired_manifest(self):
        self.assertEqual(self.preprocess('train.txt', '--mode', 'alternating', '--glob', '*-input.wav'), 0)
        self.assertEqual(run('train', self.path('train.txt'), self.path('run'), '--tiny', '--sample-rate', str(SR),
                             '--mode', 'supervised'), 1)

    def test_supervised_training(self):
        self.assertEqual(self.preprocess('pairs.txt', '--mode', 'paired'), 0)
        self.assertTrue(read_manifest(self.path('pairs.txt')).paired)
        self.assertEqual(run('train', self.path('pairs.txt'), self.path('sup'), '--tiny', '--sample-rate', str(SR),
                             '--mode', 'supervised', '--iterations', '3', '--validation', self.path('pairs.txt'),
                             '--set', 'validate_every=3'), 0)
        self.assertTrue(os.path.exists(self.path('sup', 'best.safetensors')))
        model, ckpt = load_generator(self.path('sup', 'best.safetensors'))
        self.assertEqual((ckpt.step, ckpt.config['sample_rate']), (3, SR))

    def test_evaluate_uses_saved_metric_settings(self):
        self.assertEqual(self.preprocess('pairs.txt', '--mode', 'paired'), 0)
        self.assertEqual(run('train', self.path('pairs.txt'), self.path('sup'), '--tiny', '--sample-rate', str(SR),
                             '--mode', 'supervised', '--iterations', '2', '--set', 'preemph_coeff=0.95'), 0)
        ckpt = self.path('sup', 'final.safetensors')
        with mock.patch('sys.stdout', new_callable=io.StringIO):
            self.assertEqual(run('evaluate', ckpt, self.path('toy'), '--out', self.path('metrics.txt')), 0)
        values = dict(line.split(' = ') for line in open(self.path('metrics.txt')).read().splitlines())

        model, _ = load_generator(ckpt)
        clips = [(name, load_audio(x), load_audio(y)) for name, x, y in find_pairs(self.path('toy'))]
        want = evaluate_clips(model, clips, TrainConfig(preemph_coeff=0.95)).e_esr
        self.assertAlmostEqual(float(values['e_esr']) / want, 1.0, delta=1e-7)
        self.assertNotAlmostEqual(want / evaluate_clips(model, clips).e_esr, 1.0, places=3)

    def test_benchmark(self):
        with mock.patch('sys.stdout', new_callable=io.StringIO) as out:
            self.assertEqual(run('benchmark', '--tiny', '--seconds', '0.25', '--sample-rate', str(SR)), 0)
        self.assertIn('real-time', out.getvalue())


class TestRawStream(unittest.TestCase):
    def test_matches_offline_processing(self):
        model = Generator(GeneratorConfig(n_stacks=1, layers_per_stack=4, channels=4))
        x = (0.3 * np.random.default_rng(0).standard_normal(3000)).astype(np.float32)
        stdin, stdout = io.BytesIO(x.astype('<f4').tobytes() + b'\x01'), io.BytesIO()
        with self.assertLogs('ampgan.cli', level='WARNING'):
            self.assertEqual(_process_raw(model, SR, 256, stdin, stdout), 0)
        y = np.frombuffer(stdout.getvalue(), dtype='<f4')
        self.assertEqual(y.size, x.size)
        expected = process_buffer(model, AudioBuffer(x, SR)).samples
        np.testing.assert_allclose(y, expected, atol=1e-5)


if __name__ == '__main__':
    unittest.main()
