import numpy as np
import pytest
import torch

from motus import synth
from motus.data2vec import (Data2Vec, EmaSchedule, Health, MaskConfig, PretrainCollapse,
                            PretrainConfig, data2vec_loss, detect_collapse, ema_tau, pretrain,
                            interior_mask, pretrain_step, sample_masks, teacher_targets,
                            temporal_variance)
from motus.ingest import preprocess
from motus.model import ModelConfig, instance_normalize, make_adam
from motus.screening import sequence_split


def expected_mask_fraction(t, p, span):
    # frame i is masked when any of the starts i-span+1..i (clipped at 0) fires
    return sum(1 - (1 - p) ** min(i + 1, span) for i in range(t)) / t


class TestMasks:
    def test_monte_carlo_fraction(self):
        rng = np.random.default_rng(0)
        pad = np.ones((20_000, 260), bool)
        frac = sample_masks(pad, MaskConfig(), rng).mean()
        assert frac == pytest.approx(expected_mask_fraction(260, 0.15, 3), abs=2e-3)

    def test_padding_never_masked(self):
        pad = np.zeros((500, 30), bool)
        pad[:, :17] = True
        m = sample_masks(pad, MaskConfig(p_start=0.5), np.random.default_rng(1))
        assert not m[:, 17:].any()
        assert m[:, 16].any()

    def test_span_structure(self):
        pad = np.ones((1, 50), bool)
        m = sample_masks(pad, MaskConfig(p_start=0.02, span=3), np.random.default_rng(4))[0]
        runs = np.diff(np.flatnonzero(np.diff(np.r_[0, m.astype(int), 0])))[::2]
        assert all(r >= 3 or r == 0 for r in runs[:-1]) or len(runs) == 0

    def test_extremes(self):
        pad = np.ones((3, 10), bool)
        assert not sample_masks(pad, MaskConfig(p_start=0.0), np.random.default_rng(0)).any()
        with pytest.raises(ValueError):
            MaskConfig(p_start=1.0)

    def test_single_frame(self):
        m = sample_masks(np.ones((10_000, 1), bool), MaskConfig(), np.random.default_rng(2))
        assert m.mean() == pytest.approx(0.15, abs=0.01)


class TestEma:
    def test_schedule_values(self):
        s = EmaSchedule()
        assert ema_tau(0, s) == 0.9998
        assert ema_tau(10_000, s) == 0.99999
        assert ema_tau(25_000, s) == 0.99999
        assert abs(ema_tau(5000, s) - 0.999895) < 1e-12

    def test_update_formula(self):
        torch.manual_seed(0)
        m = Data2Vec(ModelConfig.tiny())
        with torch.no_grad():
            for p in m.teacher.parameters():
                p.fill_(1.0)
            for p in m.student.transformer.parameters():
                p.fill_(0.0)
        m.ema_update(0.9998)
        for p in m.teacher.parameters():
            torch.testing.assert_close(p, torch.full_like(p, 0.9998))

    def test_teacher_equals_student_at_init_and_tau_one(self):
        torch.manual_seed(0)
        m = Data2Vec(ModelConfig.tiny())
        for pt, ps in zip(m.teacher.state_dict().values(), m.student.transformer.state_dict().values()):
            assert torch.equal(pt, ps)
        before = {k: v.clone() for k, v in m.teacher.state_dict().items()}
        with torch.no_grad():
            for p in m.student.transformer.parameters():
                p.add_(1.0)
        m.ema_update(1.0)
        for k, v in m.teacher.state_dict().items():
            assert torch.equal(v, before[k])


def _batch(t=12, b=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    frames = torch.randn(b, t, 120, 24, generator=g)
    pad = torch.ones(b, t, dtype=torch.bool)
    pad[1, t - 3:] = False
    tmask = torch.from_numpy(sample_masks(pad.numpy(), MaskConfig(p_start=0.3), np.random.default_rng(seed)))
    return frames, pad, tmask


class TestLoss:
    def test_teacher_gets_no_gradient_and_encoder_is_shared(self):
        torch.manual_seed(0)
        m = Data2Vec(ModelConfig.tiny())
        frames, pad, tmask = _batch()
        teacher_before = {k: v.clone() for k, v in m.teacher.state_dict().items()}
        opt = make_adam(m.student.parameters(), 1e-2)
        pretrain_step(m, opt, frames, pad, tmask, tau=1.0)
        for k, v in m.teacher.state_dict().items():
            assert torch.equal(v, teacher_before[k])
        assert all(p.grad is None for p in m.teacher.parameters())
        assert not any(n.startswith("encoder") for n, _ in m.teacher.named_parameters())

    def test_unmasked_target_perturbation_has_no_effect(self):
        torch.manual_seed(0)
        m = Data2Vec(ModelConfig.tiny()).double()
        frames, pad, tmask = _batch()
        z = m.student.embed(frames.double(), pad)
        targets = teacher_targets(m.teacher_outputs(z, pad), pad)
        pred, _ = m.student.contextualize(z, pad, tmask)
        from motus.model import masked_mse
        sel = tmask & pad
        a = masked_mse(pred, targets, sel)
        noisy = targets + torch.randn_like(targets) * (~sel)[..., None]
        assert torch.equal(a, masked_mse(pred, noisy, sel))

    def test_zero_masks_zero_loss(self):
        torch.manual_seed(0)
        m = Data2Vec(ModelConfig.tiny())
        frames, pad, _ = _batch()
        loss, _ = data2vec_loss(m, frames, pad, torch.zeros_like(pad))
        assert loss.item() == 0.0
        opt = make_adam(m.student.parameters(), 1e-2)
        before = {k: v.clone() for k, v in m.student.state_dict().items()}
        assert pretrain_step(m, opt, frames, pad, torch.zeros_like(pad), 0.99) == 0.0
        for k, v in m.student.state_dict().items():
            assert torch.equal(v, before[k])

    def test_top_k_one_is_last_block(self):
        torch.manual_seed(0)
        ff = [torch.randn(2, 6, 8) for _ in range(3)]
        pad = torch.ones(2, 6, dtype=torch.bool)
        torch.testing.assert_close(teacher_targets(ff, pad, 1), instance_normalize(ff[-1], pad))
        torch.testing.assert_close(teacher_targets(ff, pad, None), teacher_targets(ff, pad, 3))
        with pytest.raises(ValueError):
            teacher_targets(ff, pad, 0)

    def test_loss_decreases_on_fixed_batch(self):
        torch.manual_seed(0)
        m = Data2Vec(ModelConfig.tiny())
        frames, pad, tmask = _batch(seed=3)
        opt = make_adam(m.student.parameters(), 3e-3)
        losses = [pretrain_step(m, opt, frames, pad, tmask, tau=1.0) for _ in range(40)]
        assert losses[-1] < losses[0]


class TestCollapse:
    def test_threshold(self):
        assert detect_collapse(1e-7) is Health.COLLAPSED
        assert detect_collapse(1e-3) is Health.HEALTHY

    def test_constant_outputs_have_zero_variance(self):
        ff = [torch.ones(2, 5, 4) * 3.0]
        assert temporal_variance(ff, torch.ones(2, 5, dtype=torch.bool)) == 0.0

    def test_noise_outputs_healthy(self):
        ff = [torch.randn(4, 50, 8, generator=torch.Generator().manual_seed(0)) * 0.1]
        var = temporal_variance(ff, torch.ones(4, 50, dtype=torch.bool))
        assert var == pytest.approx(0.01, rel=0.1)
        assert detect_collapse(var) is Health.HEALTHY
        assert detect_collapse(0.0, threshold=0.0) is Health.HEALTHY

    def test_edges_excluded(self):
        y = torch.zeros(1, 20, 2)
        y[0, :3] = 5.0
        y[0, 12:15] = -5.0
        pad = torch.zeros(1, 20, dtype=torch.bool)
        pad[0, :15] = True
        assert temporal_variance([y], pad) > 1
        assert temporal_variance([y], pad, edge=3) == 0.0
        m = interior_mask(pad, 3)
        assert m[0].tolist() == [False] * 3 + [True] * 9 + [False] * 8
        # a short sequence without interior does not dilute a long one
        short = torch.zeros(1, 20, 2)
        short[0, 0] = 9.0
        pad2 = torch.cat([pad, torch.tensor([[True] * 4 + [False] * 16])])
        assert temporal_variance([torch.cat([y, short])], pad2, edge=3) == 0.0
        assert temporal_variance([short], pad2[1:], edge=3) > 1

    def test_flat_input_flat_interior(self):
        torch.manual_seed(0)
        m = Data2Vec(ModelConfig.reduced())
        frames = torch.zeros(1, 30, 120, 24)
        frames[..., 2::6] = 1.0  # gravity on every accel z
        pad = torch.ones(1, 30, dtype=torch.bool)
        with torch.no_grad():
            ff = m.teacher_outputs(m.student.embed(frames, pad), pad)
        assert temporal_variance(ff, pad) > 1e-6
        assert temporal_variance(ff, pad, edge=m.cfg.pos_pad) < 1e-10


def _sequences(spec):
    return [s for r in synth.generate(spec) for s in sequence_split(preprocess(r))]


class TestPretrainLoop:
    cfg = PretrainConfig(top_k=None, lr0=1e-3, batch_size=4, max_epochs=2,
                         ema=EmaSchedule(0.99, 0.999, 50))

    def test_moving_corpus_runs_and_logs(self):
        seqs = _sequences(synth.SynthSpec(n_recordings=3, duration_s=(100, 120), labeled=False, seed=3))
        res = pretrain(seqs[:2], seqs[2:], ModelConfig.reduced(), self.cfg, seed=0)
        assert res.attempts == 1 and len(res.log) == 2
        assert {"train_loss", "val_loss", "lr", "tau", "collapse_metric", "health"} <= set(res.log[0])
        assert all(e["health"] == "healthy" for e in res.log)
        for k, v in res.state.items():
            assert torch.isfinite(v).all(), k

    def test_deterministic(self):
        seqs = _sequences(synth.SynthSpec(n_recordings=2, duration_s=(80, 90), labeled=False, seed=5))
        a = pretrain(seqs[:1], seqs[1:], ModelConfig.reduced(), self.cfg, seed=1)
        b = pretrain(seqs[:1], seqs[1:], ModelConfig.reduced(), self.cfg, seed=1)
        assert [e["train_loss"] for e in a.log] == [e["train_loss"] for e in b.log]
        for k in a.state:
            assert torch.equal(a.state[k], b.state[k])

    def test_flat_corpus_collapse_raises_with_stats(self):
        spec = synth.SynthSpec(n_recordings=2, duration_s=(80, 90), labeled=False, playtime_fraction=0.0, seed=6)
        seqs = _sequences(spec)
        with pytest.raises(PretrainCollapse) as info:
            pretrain(seqs[:1], seqs[1:], ModelConfig.reduced(), self.cfg, seed=0)
        stats = info.value.flatness_stats
        assert stats["train"]["n"] == 1 and len(stats["log"]) == 3
        assert [e["seed"] for e in stats["log"]] == [0, 1, 2]

    def test_empty_inputs(self):
        with pytest.raises(ValueError):
            pretrain([], [], ModelConfig.reduced(), self.cfg)

    def test_config_round_trip(self):
        assert PretrainConfig.from_dict(self.cfg.to_dict()) == self.cfg
