import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from motus import checkpoint
from motus.data2vec import Data2Vec, data2vec_loss, teacher_targets
from motus.finetune import weighted_ce
from motus.model import (Backbone, ClassifierHead, ModelConfig, MovementClassifier,
                         MultiHeadSelfAttention, PositionalEncoder, SensorEncoder,
                         TransformerBlock, TransformerEncoder, classifier_probs,
                         instance_normalize, make_adam, masked_mse)

from gradcheck import fd_relative_errors

TOL = 1e-4


def _frames(b, t, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(b, t, 120, 24, generator=g, dtype=dtype)
    x[..., 3:6] *= 50  # gyro in deg/s
    return x


def _projector(shape, seed=1):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(shape, generator=g, dtype=torch.float64)


def _check(module, loss_fn, extra=()):
    module.double()
    errors = fd_relative_errors(loss_fn, list(module.parameters()) + list(extra))
    worst = max(errors)
    assert worst < TOL, f"max relative gradient error {worst:.3g}"


class TestGradients:
    cfg = ModelConfig.tiny()

    def test_sensor_encoder(self):
        torch.manual_seed(0)
        enc = SensorEncoder(self.cfg)
        x = _frames(1, 2)
        r = _projector((1, 2, 8))
        _check(enc, lambda: (enc(x) * r).sum())

    def test_positional_encoder(self):
        torch.manual_seed(0)
        pe = PositionalEncoder(self.cfg)
        x = _projector((2, 5, 8), 3).requires_grad_()
        r = _projector((2, 5, 8))
        _check(pe, lambda: (pe(x) * r).sum(), [x])

    def test_attention_with_padding(self):
        torch.manual_seed(0)
        att = MultiHeadSelfAttention(8, 2)
        x = _projector((2, 4, 8), 4).requires_grad_()
        pad = torch.tensor([[True] * 4, [True, True, False, False]])
        r = _projector((2, 4, 8))
        _check(att, lambda: (att(x, pad) * r).sum(), [x])

    def test_transformer_block_both_outputs(self):
        torch.manual_seed(0)
        blk = TransformerBlock(self.cfg)
        x = _projector((1, 4, 8), 5).requires_grad_()
        r1, r2 = _projector((1, 4, 8), 6), _projector((1, 4, 8), 7)

        def loss():
            out, ff = blk(x)
            return (out * r1).sum() + (ff * r2).sum()
        _check(blk, loss, [x])

    def test_classifier_head(self):
        torch.manual_seed(0)
        head = ClassifierHead(self.cfg).eval()
        x = _projector((1, 4, 8), 8).requires_grad_()
        r = _projector((1, 4, 9))
        _check(head, lambda: (head(x) * r).sum(), [x])

    def test_layer_norm_and_gelu(self):
        ln = torch.nn.LayerNorm(8)
        with torch.no_grad():
            ln.weight.uniform_(0.5, 1.5)
            ln.bias.uniform_(-1, 1)
        x = _projector((3, 8), 9).requires_grad_()
        r = _projector((3, 8))
        _check(ln, lambda: (F.gelu(ln(x)) * r).sum(), [x])

    def test_instance_normalize(self):
        x = _projector((2, 5, 8), 10).requires_grad_()
        pad = torch.tensor([[True] * 5, [True] * 3 + [False] * 2])
        r = _projector((2, 5, 8))
        errors = fd_relative_errors(lambda: (instance_normalize(x, pad) * r).sum(), [x])
        assert max(errors) < TOL

    def test_composed_data2vec_loss(self):
        torch.manual_seed(0)
        model = Data2Vec(self.cfg).double()
        x = _frames(2, 4)
        pad = torch.tensor([[True] * 4, [True] * 3 + [False]])
        tmask = torch.tensor([[True, False, True, False], [False, True, False, False]])
        params = list(model.student.parameters())
        with torch.no_grad():
            z = model.student.embed(x, pad)
            fixed = teacher_targets(model.teacher_outputs(z, pad), pad).clone()

        def frozen_target_loss():
            # targets are constants of the student's gradient
            pred, _ = model.student(x, pad, tmask)
            return masked_mse(pred, fixed, tmask & pad)
        errors = fd_relative_errors(frozen_target_loss, params,
                                    analytic_fn=lambda: data2vec_loss(model, x, pad, tmask)[0])
        assert max(errors) < TOL
        assert all(p.grad is None for p in model.teacher.parameters())

    def test_composed_classifier_loss(self):
        torch.manual_seed(0)
        model = MovementClassifier(self.cfg).double().eval()
        x = _frames(1, 4)
        labels = torch.tensor([0, 3, 8, 3])
        w = torch.linspace(0.5, 1.5, 9, dtype=torch.float64)
        q = torch.tensor([True, True, False, True])
        errors = fd_relative_errors(lambda: weighted_ce(model(x)[0], labels, w, q),
                                    list(model.parameters()))
        assert max(errors) < TOL

    def test_every_parameter_gets_gradient(self):
        torch.manual_seed(0)
        model = MovementClassifier(self.cfg)
        model(_frames(1, 4, dtype=torch.float32)).sum().backward()
        for name, p in model.named_parameters():
            assert p.grad is not None and torch.any(p.grad != 0), name

    def test_mse_identity_gradient(self):
        x = torch.tensor([1.0, 2.0, 4.0], dtype=torch.float64, requires_grad=True)
        y = torch.tensor([0.0, 3.0, 1.0], dtype=torch.float64)
        F.mse_loss(x, y).backward()
        torch.testing.assert_close(x.grad, 2 * (x.detach() - y) / 3)

    def test_masked_positions_get_no_gradient(self):
        pred = torch.randn(1, 5, 4, requires_grad=True)
        mask = torch.tensor([[True, False, True, False, False]])
        masked_mse(pred, torch.zeros(1, 5, 4), mask).backward()
        assert torch.all(pred.grad[0, ~mask[0]] == 0)
        assert torch.all(pred.grad[0, mask[0]] != 0)


class TestActivations:
    def test_gelu_exact(self):
        assert F.gelu(torch.tensor(0.0)).item() == 0.0
        assert F.gelu(torch.tensor(1.0, dtype=torch.float64)).item() == pytest.approx(
            0.5 * (1 + math.erf(1 / math.sqrt(2))), abs=1e-12)
        assert F.gelu(torch.tensor(1.0, dtype=torch.float64)).item() == pytest.approx(0.841345, abs=1e-6)

    def test_gelu_shape(self):
        # x * Phi(x) decreases down to its minimum near -0.7518, increases after
        xmin = -0.751791524693564
        left = F.gelu(torch.linspace(-5, xmin, 500, dtype=torch.float64))
        right = F.gelu(torch.linspace(xmin, 5, 500, dtype=torch.float64))
        assert torch.all(torch.diff(left) <= 0) and torch.all(torch.diff(right) >= 0)

    def test_layer_norm_statistics(self):
        ln = torch.nn.LayerNorm(160)
        y = ln(torch.randn(50, 160) * 7 + 3)
        assert y.mean(-1).abs().max() < 1e-5
        assert (y.var(-1, unbiased=False) - 1).abs().max() < 1e-3


class TestEncoder:
    cfg = ModelConfig.reduced()

    def test_shape_and_determinism(self):
        torch.manual_seed(0)
        enc = SensorEncoder(self.cfg)
        z = enc(torch.zeros(2, 3, 120, 24))
        assert z.shape == (2, 3, 32)
        assert torch.equal(z[0, 0], z[1, 2])
        assert ModelConfig().d_model == SensorEncoder(ModelConfig())(torch.zeros(1, 1, 120, 24)).shape[-1]

    def test_shape_mismatch(self):
        enc = SensorEncoder(self.cfg)
        with pytest.raises(ValueError):
            enc(torch.zeros(1, 3, 100, 24))

    def test_sensor_symmetry(self):
        torch.manual_seed(0)
        enc = SensorEncoder(self.cfg)
        x = torch.randn(1, 2, 120, 24)
        x[..., 6:12] = x[..., 0:6]
        feats = enc.sensor_features(x)
        torch.testing.assert_close(feats[:, :, 0], feats[:, :, 1])
        swapped = x.clone()
        swapped[..., 12:18], swapped[..., 18:24] = x[..., 18:24], x[..., 12:18]
        f2 = enc.sensor_features(swapped)
        torch.testing.assert_close(f2[:, :, 2], feats[:, :, 3])
        torch.testing.assert_close(f2[:, :, 3], feats[:, :, 2])


class TestPositionalEncoder:
    cfg = ModelConfig.reduced()

    def test_length_one(self):
        pe = PositionalEncoder(self.cfg)
        assert pe(torch.randn(1, 1, 32)).shape == (1, 1, 32)

    def test_translation_interior(self):
        torch.manual_seed(0)
        pe = PositionalEncoder(self.cfg).double()
        t, s = 40, 5
        x = torch.randn(1, t, 32, dtype=torch.float64)
        shifted = torch.roll(x, s, dims=1)
        a, b = pe(x), pe(shifted)
        idx = torch.arange(s + 6, t - 6)
        torch.testing.assert_close(b[0, idx], a[0, idx - s])

    def test_zero_weights(self):
        pe = PositionalEncoder(self.cfg)
        with torch.no_grad():
            pe.conv.weight.zero_()
            pe.conv.bias.zero_()
            pe.norm.bias.uniform_(-1, 1)
        x = torch.randn(1, 4, 32)
        torch.testing.assert_close(pe(x), x + pe.norm.bias)


class TestTransformer:
    def test_attention_rows_and_padding(self):
        torch.manual_seed(0)
        att = MultiHeadSelfAttention(32, 4)
        pad = torch.ones(3, 10, dtype=torch.bool)
        pad[1, 6:] = False
        pad[2, 1:] = False
        _, w = att(torch.randn(3, 10, 32), pad, return_weights=True)
        torch.testing.assert_close(w.sum(-1), torch.ones(3, 4, 10), atol=1e-6, rtol=0)
        assert torch.all(w[1, :, :, 6:] == 0)
        assert torch.all(w[2, :, :, 0] == 1) and torch.all(w[2, :, :, 1:] == 0)

    def test_full_depth(self):
        cfg = ModelConfig()
        enc = TransformerEncoder(cfg)
        out, ff = enc(torch.randn(1, 3, 160))
        assert len(ff) == 12 and out.shape == (1, 3, 160)
        assert cfg.d_model // cfg.n_heads == 16

    def test_dropout_off_is_deterministic(self):
        torch.manual_seed(0)
        model = MovementClassifier(ModelConfig.reduced()).eval()
        model.backbone.transformer.set_dropout(0.4)
        x = _frames(1, 5, dtype=torch.float32)
        with torch.no_grad():
            assert torch.equal(model(x), model(x))

    def test_dropout_active_in_train(self):
        torch.manual_seed(0)
        model = MovementClassifier(ModelConfig.reduced()).train()
        model.backbone.transformer.set_dropout(0.4)
        x = _frames(1, 5, dtype=torch.float32)
        with torch.no_grad():
            assert not torch.equal(model(x), model(x))

    def test_nan_reports_block(self):
        enc = TransformerEncoder(ModelConfig.reduced())
        with torch.no_grad():
            enc.blocks[2].fc2.bias[0] = float("nan")
        with pytest.raises(FloatingPointError, match="block 2"):
            enc(torch.randn(1, 3, 32))


class TestHead:
    def test_probabilities(self):
        torch.manual_seed(0)
        head = ClassifierHead(ModelConfig.reduced()).eval()
        p = classifier_probs(head(torch.randn(2, 7, 32)))
        torch.testing.assert_close(p.sum(-1), torch.ones(2, 7), atol=1e-6, rtol=0)

    def test_zero_logits_uniform(self):
        p = classifier_probs(torch.zeros(1, 9))
        torch.testing.assert_close(p, torch.full((1, 9), 1 / 9))

    def test_argmax_shift_invariant(self):
        z = torch.randn(20, 9)
        assert torch.equal(classifier_probs(z).argmax(-1), classifier_probs(z + 3.7).argmax(-1))


class TestInstanceNorm:
    def test_constant_feature(self):
        x = torch.full((1, 6, 4), 2.5)
        assert instance_normalize(x, torch.ones(1, 6, dtype=torch.bool)).abs().max() < 1e-6

    def test_two_values(self):
        x = torch.tensor([[[1.0], [3.0]]], dtype=torch.float64)
        y = instance_normalize(x, torch.ones(1, 2, dtype=torch.bool))
        expected = 1 / math.sqrt(1 + 1e-5)
        torch.testing.assert_close(y[0, :, 0], torch.tensor([-expected, expected], dtype=torch.float64))

    def test_padding_excluded(self):
        x = torch.tensor([[[1.0], [3.0], [100.0]]], dtype=torch.float64)
        pad = torch.tensor([[True, True, False]])
        y = instance_normalize(x, pad)
        expected = 1 / math.sqrt(1 + 1e-5)
        torch.testing.assert_close(y[0, :, 0], torch.tensor([-expected, expected, 0.0], dtype=torch.float64))

    def test_single_real_frame(self):
        x = torch.tensor([[[5.0], [0.0]]])
        y = instance_normalize(x, torch.tensor([[True, False]]))
        assert torch.all(y == 0)


class TestAdam:
    def test_zero_gradient_no_change(self):
        p = torch.nn.Parameter(torch.tensor([1.0, -2.0]))
        opt = make_adam([p], 0.1)
        p.grad = torch.zeros(2)
        opt.step()
        assert torch.equal(p.detach(), torch.tensor([1.0, -2.0]))

    def test_first_step(self):
        p = torch.nn.Parameter(torch.tensor([0.0], dtype=torch.float64))
        opt = make_adam([p], 0.1)
        p.grad = torch.tensor([1.0], dtype=torch.float64)
        opt.step()
        assert p.item() == pytest.approx(-0.1 / (1 + 1e-8), rel=1e-12)

    def test_matches_reference_formula(self):
        g_seq = [0.3, -1.2, 0.7, 2.0]
        p = torch.nn.Parameter(torch.tensor([0.5], dtype=torch.float64))
        opt = make_adam([p], 0.01)
        theta, m, v = 0.5, 0.0, 0.0
        for t, g in enumerate(g_seq, 1):
            p.grad = torch.tensor([g], dtype=torch.float64)
            opt.step()
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            theta -= 0.01 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
            assert p.item() == pytest.approx(theta, rel=1e-9, abs=1e-12)

    def test_deterministic(self):
        results = []
        for _ in range(2):
            p = torch.nn.Parameter(torch.tensor([0.2, 0.4]))
            opt = make_adam([p], 0.05)
            for g in ([1.0, -1.0], [0.5, 0.25]):
                p.grad = torch.tensor(g)
                opt.step()
            results.append(p.detach().clone())
        assert torch.equal(results[0], results[1])


class TestCheckpoint:
    def test_round_trip_and_names(self):
        torch.manual_seed(0)
        cfg = ModelConfig.reduced()
        model = MovementClassifier(cfg)
        data = checkpoint.dump_checkpoint(model.state_dict(), cfg, {"seed": 3})
        assert data[:4] == b"MCKP"
        state, cfg2, meta = checkpoint.load_checkpoint(data)
        assert cfg2 == cfg and meta == {"seed": 3}
        for k, v in model.state_dict().items():
            assert torch.equal(state[k], v)
        assert checkpoint.dump_checkpoint(state, cfg2, meta) == data

    def test_student_loads_into_classifier(self):
        torch.manual_seed(0)
        cfg = ModelConfig.reduced()
        d2v = Data2Vec(cfg)
        data = checkpoint.dump_checkpoint(
            {f"backbone.{k}": v for k, v in d2v.student.state_dict().items()}, cfg)
        state, _, _ = checkpoint.load_checkpoint(data)
        clf = MovementClassifier(cfg)
        missing, unexpected = clf.load_state_dict(state, strict=False)
        assert not unexpected
        assert all(k.startswith("head.") for k in missing)

    def test_bad_magic(self):
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.load_checkpoint(b"NOPE")
