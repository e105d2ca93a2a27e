import numpy as np
import pytest
import torch

from toamim import heads as H
from toamim import metrics as M
from toamim.encoder import EncoderConfig, count_parameters
from toamim.errors import ParameterError, TrainingAbortError
from toamim.mim import empty_mask, gen_mask
from toamim.synth import CurtainParams, gen_curtain_dataset

TINY = EncoderConfig(chip_size=16, patch=2, window=4, depths=(1, 1), dims=(8, 16), heads=(2, 2), bias_hidden=8)


def tiny_chips(n=16, seed=0):
    rng = np.random.default_rng(seed)
    base = rng.uniform(0.2, 0.8, (n, 14, 1, 1))
    yy, xx = np.mgrid[0:16, 0:16] / 16.0
    return (base + 0.1 * np.sin(6 * xx + 3 * yy)[None, None]).astype(np.float32)


class TestModels:
    def test_recon_shape(self):
        model = H.build_mim_model(TINY, 0)
        assert model(torch.rand(3, 14, 16, 16)).shape == (3, 14, 16, 16)

    def test_default_recon_shape(self):
        model = H.build_mim_model(EncoderConfig(), 0)
        assert model(torch.rand(1, 14, 64, 64)).shape == (1, 14, 64, 64)

    @pytest.mark.parametrize("backbone", ["swin", "fcn"])
    def test_curtain_shape(self, backbone):
        model = H.CurtainModel(backbone, 64, 32, EncoderConfig())
        out = model(torch.rand(2, 14, 64, 64))
        assert out.shape == (2, 64, 32) and torch.isfinite(out).all()

    def test_fcn_fairness(self):
        swin = H.CurtainModel("swin", 64, 32, EncoderConfig())
        fcn = H.CurtainModel("fcn", 64, 32)
        assert count_parameters(fcn) <= 2 * swin.head_parameter_count()
        assert type(swin.decoder.ups[0]) is type(fcn.decoder.ups[0])
        assert swin.decoder.classify.weight.shape == fcn.decoder.classify.weight.shape

    def test_bad_backbone(self):
        with pytest.raises(ParameterError):
            H.CurtainModel("vit", 64, 32)
        with pytest.raises(ParameterError):
            H.CurtainModel("swin", 64, 32)


class TestPretrain:
    def test_deterministic_and_learns(self):
        chips = tiny_chips()
        pc = H.PretrainConfig(epochs=4, batch_size=8, lr_max=3e-3, lr_start=1e-4)
        a = H.pretrain(chips, TINY, pc, eval_chips=chips[:4])
        b = H.pretrain(chips, TINY, pc, eval_chips=chips[:4])
        assert a.train_loss == b.train_loss and a.eval_loss == b.eval_loss
        assert len(a.eval_loss) == 5 and len(a.train_loss) == 4
        assert a.eval_loss[-1] < a.eval_loss[0]
        assert a.state.step == 8
        for m in a.state.model.modules():
            if hasattr(m, "tau_min"):
                assert (m.tau >= m.tau_min).all()

    def test_constant_chip_fit(self):
        chips = np.full((8, 14, 16, 16), 0.4, dtype=np.float32)
        pc = H.PretrainConfig(epochs=40, batch_size=8, lr_max=5e-3, lr_start=2e-4, lr_final=1e-5)
        res = H.pretrain(chips, TINY, pc, eval_chips=chips[:2])
        assert res.eval_loss[-1] < 0.05 * res.eval_loss[0]
        assert res.eval_loss[-1] < 0.01

    def test_nan_data_aborts_with_checkpoint(self, tmp_path):
        chips = tiny_chips(4)
        chips[0, 0, 0, 0] = np.nan
        ck = tmp_path / "abort.svtc"
        with pytest.raises(TrainingAbortError):
            H.pretrain(chips, TINY, H.PretrainConfig(epochs=1, batch_size=4), abort_checkpoint=ck)
        assert ck.exists()

    def test_shape_mismatch(self):
        with pytest.raises(ParameterError):
            H.pretrain(np.zeros((2, 14, 32, 32), np.float32), TINY, H.PretrainConfig(epochs=1))
        with pytest.raises(ParameterError):
            H.pretrain(np.zeros((0, 14, 16, 16), np.float32), TINY)


class TestReconstruct:
    model = H.build_mim_model(TINY, 3)

    def test_empty_mask_is_identity(self):
        chip = tiny_chips(1)[0]
        out, per = H.reconstruct(chip, empty_mask(8, 8, 2), self.model)
        assert np.array_equal(out, chip)
        assert np.all(per == 1.0)

    def test_composite_and_clamp(self):
        chips = tiny_chips(3)
        masks = np.stack([gen_mask(8, 8, 0.6, i, 2).pixel_mask() for i in range(3)])
        out = H.reconstruct_batch(self.model, chips, masks)
        keep = np.broadcast_to(~masks[:, None], chips.shape)
        assert np.array_equal(out[keep], chips[keep])
        assert out.min() >= 0 and out.max() <= 1

    def test_mean_fill(self):
        chips = tiny_chips(2)
        masks = np.zeros((2, 16, 16), bool)
        masks[:, :4, :4] = True
        out = H.mean_fill_baseline(chips, masks)
        vis = chips[0, 3][~masks[0]].mean()
        assert np.allclose(out[0, 3, :4, :4], vis)
        assert np.array_equal(out[:, :, 4:], chips[:, :, 4:])

    def test_constant_mean_l1(self):
        train = np.full((4, 14, 16, 16), 0.5)
        ev = np.full((2, 14, 16, 16), 0.7)
        masks = np.ones((2, 16, 16), bool)
        assert H.constant_mean_l1(train, ev, masks) == pytest.approx(0.2)


def curtain_sets(n_train=12, n_val=6):
    p = CurtainParams(chip_size=16, height_bins=8)
    return gen_curtain_dataset(1, n_train, p), gen_curtain_dataset(2, n_val, p)


class TestFinetune:
    fcfg = H.FinetuneConfig(epochs=2, batch_size=4, freeze_epochs=1, decoder_width=8)

    def test_schedule(self):
        assert H.warmup_cosine_lr(0, 100, 5e-7, 3e-4, 1e-6, 0.1) == 5e-7
        assert H.warmup_cosine_lr(10, 100, 5e-7, 3e-4, 1e-6, 0.1) == pytest.approx(3e-4)
        assert H.warmup_cosine_lr(5, 100, 0.0, 1.0, 0.0, 0.1) == pytest.approx(0.5)
        assert H.warmup_cosine_lr(100, 100, 5e-7, 3e-4, 1e-6, 0.1) == pytest.approx(1e-6)

    def test_pretrained_and_baseline_share_setup(self):
        train, val = curtain_sets()
        state = H.pretrain(tiny_chips(8), TINY, H.PretrainConfig(epochs=1, batch_size=8)).state
        enc_before = {k: v.clone() for k, v in state.model.encoder.state_dict().items()}
        a = H.finetune(train, val, "swin", state, TINY, self.fcfg)
        b = H.finetune(train, val, "fcn", None, TINY, self.fcfg)
        for r in (a.report, b.report):
            assert 0 <= r.miou <= 1 and 0 <= r.accuracy <= 1
        assert len(a.train_loss) == len(b.train_loss) == 2
        assert a.opt.step == b.opt.step
        # pretrained weights were copied, not shared
        for k, v in state.model.encoder.state_dict().items():
            assert torch.equal(v, enc_before[k])

    def test_freeze_keeps_encoder_during_first_epoch(self):
        train, val = curtain_sets()
        state = H.pretrain(tiny_chips(8), TINY, H.PretrainConfig(epochs=1, batch_size=8)).state
        cfg = H.FinetuneConfig(epochs=1, batch_size=4, freeze_epochs=1, decoder_width=8)
        res = H.finetune(train, val, "swin", state, TINY, cfg)
        for k, v in state.model.encoder.state_dict().items():
            assert torch.equal(res.model.encoder.state_dict()[k], v)

    def test_deterministic(self):
        train, val = curtain_sets()
        a = H.finetune(train, val, "fcn", None, TINY, self.fcfg)
        b = H.finetune(train, val, "fcn", None, TINY, self.fcfg)
        assert a.train_loss == b.train_loss and a.report.auc == b.report.auc

    def test_all_clear_labels(self):
        train, val = curtain_sets(16, 6)
        for s in train:
            s.curtain[:] = 0
        cfg = H.FinetuneConfig(epochs=20, batch_size=4, decoder_width=8, lr_max=3e-3)
        res = H.finetune(train, val, "fcn", None, TINY, cfg)
        x_va, y_va = H.stack_curtains(val)
        probs = H.predict_curtains(res.model, x_va)
        assert (probs < 0.5).all()
        assert res.report.miou == M.miou(np.zeros_like(y_va, bool), y_va)
        clear = [s for s in val]
        for s in clear:
            s.curtain[:] = 0
        rep = H.curtain_report(probs, H.stack_curtains(clear)[1])
        assert rep.miou == 1.0 and np.isnan(rep.auc)
        one_cloud = H.stack_curtains(clear)[1]
        one_cloud[0, 0, 0] = 1
        assert H.curtain_report(probs, one_cloud).miou == pytest.approx(0.5, abs=1e-3)

    def test_label_mismatch(self):
        train, val = curtain_sets(4, 2)
        train[0].curtain = np.zeros((8, 8), np.uint8)
        with pytest.raises(ValueError):
            H.finetune(train, val, "fcn", None, TINY, self.fcfg)
