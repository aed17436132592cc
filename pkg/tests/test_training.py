import copy
import os
import tempfile
import unittest

import numpy as np
import torch
from torch.func import functional_call

from ampgan.audio import (AudioBuffer, DatasetManifest, Segment, SegmentLoader, build_paired_manifest,
                          build_unpaired_manifest, load_audio, save_audio)
from ampgan.checkpoint import load_multiscale
from ampgan.discriminator import DiscriminatorConfig, MultiScaleDiscriminator
from ampgan.errors import ManifestError, NumericalError
from ampgan.generator import Generator, GeneratorConfig, as_batch
from ampgan.metrics import compute_metrics
from ampgan.streaming import process_buffer
from ampgan.toy import synth_performance, tanh_distortion
from ampgan.training import (BatchSampler, TrainConfig, adam_step, esr_loss, evaluate_clips, hinge_loss_d,
                             hinge_loss_g, make_adam, supervised_loss, train_adversarial, train_supervised,
                             validate)

SR = 8000
TINY_G = GeneratorConfig(n_stacks=1, layers_per_stack=4, channels=4)
TINY_D = DiscriminatorConfig(kernel_sizes=(5, 3), channels=(8, 1), groups=(1, 1))


def tiny_discriminator(kind='log-mel', scales=3):
    return MultiScaleDiscriminator.build(kind, scales, SR, TINY_D, n_mels=16)


def write_pairs(directory, n, seconds, drive=3.0, seed=0):
    pairs = []
    for i in range(n):
        x = synth_performance(seconds, SR, seed + i)
        x_path = os.path.join(directory, f'clip{i}-input.wav')
        y_path = os.path.join(directory, f'clip{i}-target.wav')
        save_audio(x, x_path, bit_depth=32)
        save_audio(tanh_distortion(x, drive), y_path, bit_depth=32)
        pairs.append((x_path, y_path))
    return pairs


class TestHingeLosses(unittest.TestCase):
    def test_discriminator_examples(self):
        self.assertEqual(float(hinge_loss_d([1.0, 1.0], [-1.0, -1.0])), 0.0)
        self.assertEqual(float(hinge_loss_d([0.0], [0.0])), 2.0)
        self.assertEqual(float(hinge_loss_d([-0.5], [0.5])), 3.0)

    def test_generator_examples(self):
        self.assertEqual(float(hinge_loss_g([0.0, 0.0])), 0.0)
        self.assertEqual(float(hinge_loss_g([1.0, 1.0])), -1.0)
        self.assertEqual(float(hinge_loss_g([0.5, -0.5])), 0.0)

    def test_multiscale_average(self):
        real = [torch.tensor([0.0]), torch.tensor([1.0])]
        fake = [torch.tensor([0.0]), torch.tensor([-1.0])]
        self.assertEqual(float(hinge_loss_d(real, fake)), 1.0)
        self.assertEqual(float(hinge_loss_g([torch.tensor([1.0]), torch.tensor([0.0, 2.0])])), -1.0)

    def test_margin_clamp_gradients(self):
        real = torch.tensor([1.5, 0.5], requires_grad=True)
        fake = torch.tensor([-2.0, 0.0], requires_grad=True)
        hinge_loss_d(real, fake).backward()
        self.assertEqual(real.grad.tolist(), [0.0, -0.5])
        self.assertEqual(fake.grad.tolist(), [0.0, 0.5])

    def test_empty(self):
        with self.assertRaises(ValueError):
            hinge_loss_d([], [])
        with self.assertRaises(ValueError):
            hinge_loss_g([])


class TestAdam(unittest.TestCase):
    def test_zero_gradient(self):
        p = torch.nn.Parameter(torch.tensor([0.3, -0.2]))
        opt = make_adam([p], 1e-3)
        p.grad = torch.zeros(2)
        before = p.detach().clone()
        self.assertTrue(adam_step(opt))
        self.assertTrue(torch.equal(p.detach(), before))
        self.assertEqual(float(opt.state[p]['step']), 1.0)

    def test_first_step_magnitude(self):
        p = torch.nn.Parameter(torch.zeros(2, dtype=torch.float64))
        opt = make_adam([p], 1e-3)
        p.grad = torch.tensor([0.5, 1.0], dtype=torch.float64)
        adam_step(opt)
        np.testing.assert_allclose(p.detach().numpy(), [-1e-3, -1e-3], rtol=1e-6)

    def test_non_finite_gradient_skips(self):
        p = torch.nn.Parameter(torch.ones(3))
        opt = make_adam([p], 1e-3)
        p.grad = torch.tensor([1.0, float('inf'), 0.0])
        with self.assertLogs('ampgan.training', level='WARNING'):
            self.assertFalse(adam_step(opt))
        self.assertEqual(p.tolist(), [1.0, 1.0, 1.0])
        self.assertNotIn(p, opt.state)


class TestSampler(unittest.TestCase):
    def test_uniform_frequencies(self):
        sampler = BatchSampler(5, 7, 5, seed=0)
        counts = np.zeros(5)
        for _ in range(10000):
            x, y = sampler.draw()
            np.add.at(counts, x.numpy(), 1)
            self.assertTrue(int(y.max()) < 7)
        n, p = 50000, 0.2
        sigma = np.sqrt(n * p * (1 - p))
        self.assertTrue(np.all(np.abs(counts - n * p) < 3 * sigma))

    def test_seeded(self):
        a, b = BatchSampler(10, 10, 5, seed=3), BatchSampler(10, 10, 5, seed=3)
        for _ in range(5):
            for u, v in zip(a.draw(), b.draw()):
                self.assertTrue(torch.equal(u, v))

    def test_paired_uses_same_indices(self):
        x, y = BatchSampler(10, 10, 5, seed=0, paired=True).draw()
        self.assertTrue(torch.equal(x, y))

    def test_empty_domain(self):
        with self.assertRaises(ManifestError):
            BatchSampler(0, 3, 5)


class TestSupervisedLoss(unittest.TestCase):
    def test_warm_up_is_masked(self):
        gen = torch.Generator().manual_seed(0)
        out, target = torch.randn(2, 1, 500, generator=gen), torch.randn(2, 1, 500, generator=gen)
        changed = target.clone()
        changed[..., :99] = torch.randn(2, 1, 99, generator=gen) * 100
        self.assertEqual(float(supervised_loss(out, target, 99)), float(supervised_loss(out, changed, 99)))

    def test_equals_esr_after_skip(self):
        y = torch.randn(1, 1, 300, dtype=torch.float64)
        self.assertAlmostEqual(float(supervised_loss(0.5 * y, y, 10)), 0.25, places=12)
        self.assertEqual(float(supervised_loss(y, y, 0)), float(esr_loss(y, y)))


class TrainingRunCase(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = self.tmp.name
        data = os.path.join(self.dir, 'data')
        os.makedirs(data)
        self.pairs = write_pairs(data, 4, 1.5)
        self.paired = build_paired_manifest(self.pairs, 0.3, SR)
        self.unpaired = build_unpaired_manifest([x for x, _ in self.pairs[:2]], [y for _, y in self.pairs[2:]], 0.3, SR)

    def tearDown(self):
        self.tmp.cleanup()

    def out(self, name):
        return os.path.join(self.dir, name)


class TestAdversarialTraining(TrainingRunCase):
    def run_adversarial(self, out_dir, iterations, seed=0, resume=None, **kw):
        torch.manual_seed(seed)
        g, d = Generator(TINY_G), tiny_discriminator()
        cfg = TrainConfig(batch_size=2, iterations=iterations, checkpoint_every=10, validate_every=0, seed=seed, **kw)
        return train_adversarial(self.unpaired, g, d, cfg, out_dir, resume=resume), g, d

    def test_smoke(self):
        result, _, _ = self.run_adversarial(self.out('smoke'), 20)
        self.assertEqual(len(result.losses), 20)
        self.assertTrue(all(np.isfinite(ld) and np.isfinite(lg) for _, ld, lg in result.losses))
        self.assertEqual(len(result.checkpoints), 2)
        self.assertTrue(os.path.exists(self.out('smoke/final.safetensors')))
        lines = open(self.out('smoke/losses.txt')).read().splitlines()
        self.assertEqual([int(line.split()[0]) for line in lines], list(range(20)))

    def test_seeded_runs_are_identical(self):
        self.run_adversarial(self.out('a'), 100)
        self.run_adversarial(self.out('b'), 100)
        with open(self.out('a/losses.txt')) as a, open(self.out('b/losses.txt')) as b:
            self.assertEqual(a.read(), b.read())

    def test_resume_reproduces_log(self):
        self.run_adversarial(self.out('full'), 20)
        self.run_adversarial(self.out('resumed'), 20, resume=self.out('full/ckpt_0000010.safetensors'))
        full = open(self.out('full/losses.txt')).read().splitlines()
        resumed = open(self.out('resumed/losses.txt')).read().splitlines()
        self.assertEqual(resumed, full[10:])

    def test_frozen_zero_discriminator_leaves_generator_unchanged(self):
        torch.manual_seed(0)
        g, d = Generator(TINY_G), tiny_discriminator().zero_()
        before = copy.deepcopy(g.state_dict())
        cfg = TrainConfig(batch_size=2, iterations=3, lr_d=0.0, checkpoint_every=10, validate_every=0)
        train_adversarial(self.unpaired, g, d, cfg, self.out('frozen'))
        for name, value in g.state_dict().items():
            self.assertTrue(torch.equal(value, before[name]), name)

    def test_training_checkpoint_reloads_discriminator(self):
        _, _, d = self.run_adversarial(self.out('ckpt'), 2)
        ms, ckpt = load_multiscale(self.out('ckpt/ckpt_0000002.safetensors'))
        self.assertEqual(ckpt.kind, 'training')
        self.assertEqual(ms.configs, d.configs)
        loaded = ms.state_dict()
        for name, value in d.state_dict().items():
            self.assertTrue(torch.equal(loaded[name], value), name)

    def test_segments_shorter_than_window(self):
        short = build_unpaired_manifest([self.pairs[0][0]], [self.pairs[1][1]], 0.2, SR)
        with self.assertRaises(ManifestError):
            train_adversarial(short, Generator(TINY_G), tiny_discriminator(), TrainConfig(iterations=1), self.out('x'))


class TestSupervisedTraining(TrainingRunCase):
    def test_first_logged_loss_is_untrained_esr(self):
        torch.manual_seed(0)
        g = Generator(TINY_G)
        untrained = copy.deepcopy(g)
        cfg = TrainConfig(batch_size=2, iterations=1, checkpoint_every=10, validate_every=0, seed=4)
        result = train_supervised(self.paired, g, cfg, self.out('sup'))

        idx, _ = BatchSampler(len(self.paired.input_segments), len(self.paired.target_segments), 2, 4, True).draw()
        loader = SegmentLoader(self.paired)
        x = as_batch(torch.from_numpy(loader.batch([self.paired.input_segments[i] for i in idx]))).float()
        y = as_batch(torch.from_numpy(loader.batch([self.paired.target_segments[i] for i in idx]))).float()
        with torch.no_grad():
            expected = supervised_loss(untrained(x), y, g.receptive_field - 1)
        self.assertEqual(result.losses[0][2], float(expected))
        line = open(self.out('sup/losses.txt')).read().split()
        self.assertEqual(line[:2], ['0', '-'])

    def test_best_checkpoint_tracks_validation(self):
        torch.manual_seed(0)
        cfg = TrainConfig(batch_size=2, iterations=30, lr_g=3e-3, checkpoint_every=10, validate_every=10)
        result = train_supervised(self.paired, Generator(TINY_G), cfg, self.out('val'), validation=self.paired)
        self.assertEqual([step for step, _ in result.reports], [10, 20, 30])
        self.assertEqual(result.best_metric, min(r.e_esr for _, r in result.reports))
        self.assertTrue(os.path.exists(self.out('val/best.safetensors')))
        logged = [line for line in open(self.out('val/losses.txt')) if 'e_esr=' in line]
        self.assertEqual(len(logged), 3)

    def test_needs_paired_manifest(self):
        with self.assertRaises(ManifestError):
            train_supervised(self.unpaired, Generator(TINY_G), TrainConfig(iterations=1), self.out('x'))

    def test_target_silent_after_warm_up_is_data_error(self):
        length = self.paired.segment_length_samples
        gated = np.zeros(length, dtype=np.float32)
        gated[:10] = 0.2  # only inside the warm-up
        save_audio(AudioBuffer(gated, SR), self.out('gated-target.wav'), bit_depth=32)
        manifest = DatasetManifest(length, SR, list(self.paired.input_segments[:2]),
                                   [self.paired.target_segments[0], Segment(self.out('gated-target.wav'), 0)],
                                   mode='paired')
        with self.assertRaises(ManifestError) as cm:
            train_supervised(manifest, Generator(TINY_G), TrainConfig(batch_size=2, iterations=5), self.out('gated'))
        self.assertIn('gated-target.wav@0', str(cm.exception))
        self.assertFalse(os.path.exists(self.out('gated/losses.txt')))

    def test_non_finite_loss_writes_diagnostic(self):
        g = Generator(TINY_G)
        with torch.no_grad():
            g.post.bias.fill_(float('nan'))
        with self.assertRaises(NumericalError):
            train_supervised(self.paired, g, TrainConfig(batch_size=2, iterations=5), self.out('nan'))
        self.assertTrue(os.path.exists(self.out('nan/diagnostic.safetensors')))


class TestValidate(TrainingRunCase):
    def test_perfect_model_scores_zero(self):
        torch.manual_seed(0)
        g = Generator(TINY_G)
        with torch.no_grad():
            g.post.weight.mul_(0.05)
            g.post.bias.zero_()
        data = os.path.join(self.dir, 'perfect')
        os.makedirs(data)
        pairs = []
        for i, (x_path, _) in enumerate(self.pairs[:2]):
            x = load_audio(x_path)
            target = os.path.join(data, f'p{i}-target.wav')
            save_audio(process_buffer(g, x), target, bit_depth=32)
            pairs.append((x_path, target))
        manifest = build_paired_manifest(pairs, 1.5, SR)
        report = validate(g, manifest)
        self.assertTrue(all(v == 0.0 for v in report.as_dict().values()))
        self.assertEqual(validate(g, manifest).as_dict(), report.as_dict())

    def test_silent_or_short_clips_are_data_errors(self):
        length = self.paired.segment_length_samples
        save_audio(AudioBuffer(np.zeros(length), SR), self.out('mute-target.wav'), bit_depth=32)
        manifest = DatasetManifest(length, SR, [self.paired.input_segments[0]],
                                   [Segment(self.out('mute-target.wav'), 0)], mode='paired')
        with self.assertRaises(ManifestError):
            validate(Generator(TINY_G), manifest)

        x, y = load_audio(self.pairs[0][0]), load_audio(self.pairs[0][1])
        short = [('short', AudioBuffer(x.samples[:1000], SR), AudioBuffer(y.samples[:1000], SR))]
        with self.assertRaises(ManifestError):
            evaluate_clips(Generator(TINY_G), short)

    def test_log_epsilon_reaches_metrics(self):
        torch.manual_seed(0)
        g = Generator(TINY_G)
        x, y = load_audio(self.pairs[0][0]), load_audio(self.pairs[0][1])
        report = evaluate_clips(g, [('clip0', x, y)], TrainConfig(log_epsilon=1e-2))
        expected = compute_metrics(torch.from_numpy(process_buffer(g, x).samples), torch.from_numpy(y.samples),
                                   SR, log_epsilon=1e-2)
        self.assertAlmostEqual(report.e_lms, expected['e_lms'], places=9)
        self.assertAlmostEqual(report.e_lmel, expected['e_lmel'], places=9)
        self.assertNotAlmostEqual(report.e_lmel, evaluate_clips(g, [('clip0', x, y)]).e_lmel, places=6)

    def test_needs_paired_manifest(self):
        with self.assertRaises(ManifestError):
            validate(Generator(TINY_G), self.unpaired)


class TestEndToEndGradients(unittest.TestCase):
    """Hinge objectives on a miniature system, checked against central differences."""

    def setUp(self):
        torch.manual_seed(0)
        self.g = Generator(GeneratorConfig(n_stacks=1, layers_per_stack=2, channels=4)).double()
        self.d = MultiScaleDiscriminator.build('log-mel', 1, SR, TINY_D, n_mels=16).double()
        gen = torch.Generator().manual_seed(1)
        self.x = 0.3 * torch.randn(2, 1, 1024, dtype=torch.float64, generator=gen)
        self.y = 0.3 * torch.randn(2, 1, 1024, dtype=torch.float64, generator=gen)

    def test_discriminator_objective(self):
        names = [n for n, _ in self.d.named_parameters()]
        params = tuple(p.detach().clone().requires_grad_(True) for _, p in self.d.named_parameters())
        with torch.no_grad():
            fake = self.g(self.x)

        def loss(*flat):
            d = dict(zip(names, flat))
            return hinge_loss_d(functional_call(self.d, d, (self.y,)), functional_call(self.d, d, (fake,)))

        self.assertTrue(torch.autograd.gradcheck(loss, params, eps=1e-4, atol=1e-5, rtol=1e-4))

    def test_generator_objective(self):
        names = [n for n, _ in self.g.named_parameters()]
        params = tuple(p.detach().clone().requires_grad_(True) for _, p in self.g.named_parameters())
        self.d.requires_grad_(False)

        def loss(*flat):
            return hinge_loss_g(self.d(functional_call(self.g, dict(zip(names, flat)), (self.x,))))

        self.assertTrue(torch.autograd.gradcheck(loss, params, eps=1e-4, atol=1e-5, rtol=1e-4))


@unittest.skipUnless(os.environ.get('AMPGAN_SLOW_TESTS') == '1', 'set AMPGAN_SLOW_TESTS=1 for convergence runs')
class TestDeskScaleConvergence(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = self.tmp.name
        train_dir, val_dir = os.path.join(self.dir, 'train'), os.path.join(self.dir, 'val')
        os.makedirs(train_dir)
        os.makedirs(val_dir)
        self.sr = 44100
        self.train_pairs = self._write(train_dir, 4, 30.0, seed=0)
        self.val_pairs = self._write(val_dir, 1, 10.0, seed=100)

    def tearDown(self):
        self.tmp.cleanup()

    def _write(self, directory, n, seconds, seed):
        pairs = []
        for i in range(n):
            x = synth_performance(seconds, self.sr, seed + i)
            x_path = os.path.join(directory, f'clip{i}-input.wav')
            y_path = os.path.join(directory, f'clip{i}-target.wav')
            save_audio(x, x_path, bit_depth=32)
            save_audio(tanh_distortion(x, 3.0), y_path, bit_depth=32)
            pairs.append((x_path, y_path))
        return pairs

    def test_supervised_reaches_low_esr(self):
        torch.manual_seed(0)
        manifest = build_paired_manifest(self.train_pairs, 2.0, self.sr)
        validation = build_paired_manifest(self.val_pairs, 2.0, self.sr)
        cfg = TrainConfig(iterations=20000, checkpoint_every=5000, validate_every=5000)
        result = train_supervised(manifest, Generator(), cfg, os.path.join(self.dir, 'sup'), validation)
        self.assertLess(result.best_metric, 0.05)

    def test_adversarial_halves_log_mel_error(self):
        torch.manual_seed(0)
        inputs = [x for x, _ in self.train_pairs[:2]]
        targets = [y for _, y in self.train_pairs[2:]]
        manifest = build_unpaired_manifest(inputs, targets, 2.0, self.sr)
        validation = build_paired_manifest(self.val_pairs, 2.0, self.sr)
        g = Generator()
        before = validate(g, validation).e_lmel
        cfg = TrainConfig(iterations=50000, checkpoint_every=5000, validate_every=5000)
        result = train_adversarial(manifest, g, MultiScaleDiscriminator.build('log-mel', 3), cfg,
                                   os.path.join(self.dir, 'adv'), validation)
        self.assertTrue(all(np.isfinite(ld) and np.isfinite(lg) for _, ld, lg in result.losses))
        self.assertLessEqual(result.best_metric, 0.5 * before)


if __name__ == '__main__':
    unittest.main()
