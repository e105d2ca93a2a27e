import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings, strategies as st

from toamim import encoder as E
from toamim.errors import ParameterError, TrainingAbortError
from toamim.heads import build_mim_model
from toamim.mim import ZERO


def tokens(n=1, g=8, d=6, seed=0, dtype=torch.float64):
    return torch.randn(n, g, g, d, generator=torch.Generator().manual_seed(seed), dtype=dtype)


class TestConfig:
    def test_default_within_budget(self):
        enc = E.SwinEncoder(E.EncoderConfig())
        assert E.count_parameters(enc) <= 50_000
        assert E.EncoderConfig().grid_sizes == [16, 8]

    @pytest.mark.parametrize("kw", [
        dict(patch=3), dict(window=3), dict(dims=(20, 30)), dict(heads=(3, 4)),
        dict(depths=(2,)), dict(mask_token_mode="noise"), dict(drop_path=1.0),
        dict(chip_size=32, window=16),
    ])
    def test_invalid(self, kw):
        with pytest.raises(ParameterError):
            E.EncoderConfig(**kw)

    def test_round_trip_dict(self):
        c = E.EncoderConfig(dims=(12, 24))
        assert E.EncoderConfig.from_dict(c.to_dict()) == c


class TestPatchEmbed:
    def test_grid_shape(self):
        pe = E.PatchEmbed(14, 20, 4)
        assert E.patch_embed(torch.zeros(1, 14, 64, 64), pe).shape == (1, 16, 16, 20)

    def test_zero_weights(self):
        pe = E.PatchEmbed(14, 8, 4)
        nn.init.zeros_(pe.proj.weight)
        nn.init.zeros_(pe.proj.bias)
        assert not E.patch_embed(torch.rand(2, 14, 16, 16), pe).any()

    def test_linear(self):
        pe = E.PatchEmbed(14, 8, 4).double()
        nn.init.zeros_(pe.proj.bias)
        a, b = torch.rand(2, 1, 14, 8, 8, dtype=torch.float64)
        assert torch.allclose(pe(a + 2 * b), pe(a) + 2 * pe(b), atol=1e-12)

    def test_bad_input(self):
        with pytest.raises(ParameterError):
            E.PatchEmbed(14, 8, 4)(torch.zeros(1, 14, 10, 12))


class TestWindows:
    def test_unshifted(self):
        w, allowed = E.window_partition(tokens(g=8), 4, 0)
        assert w.shape == (4, 16, 6)
        assert allowed.shape == (4, 16, 16) and allowed.all()

    @pytest.mark.parametrize("shift", [0, 2])
    def test_round_trip(self, shift):
        t = tokens(n=2, g=8)
        w, _ = E.window_partition(t, 4, shift)
        assert torch.equal(E.window_reverse(w, 4, 8, shift), t)

    def test_shifted_masks_follow_regions(self):
        g, w, s = 8, 4, 2
        _, allowed = E.window_partition(torch.zeros(1, g, g, 1), w, s)
        # independent enumeration: a token in the rolled frame came from original
        # position (r + s) mod g; its region is which side of the wrap it came from
        rolled = [((r + s) % g, (c + s) % g) for r in range(g) for c in range(g)]

        def region(r, c):
            rr = 0 if r < g - w else (1 if r < g - s else 2)
            cc = 0 if c < g - w else (1 if c < g - s else 2)
            return rr * 3 + cc

        labels = np.array([region(r, c) for r in range(g) for c in range(g)]).reshape(g, g)
        windows = labels.reshape(g // w, w, g // w, w).transpose(0, 2, 1, 3).reshape(-1, w * w)
        expected = windows[:, :, None] == windows[:, None, :]
        assert np.array_equal(allowed.numpy(), expected)
        # the bottom-right window mixes wrapped tokens and blocks cross-region pairs
        assert not allowed[-1].all() and allowed[0].all()
        orig_rows = {rolled[i][0] for i in range(g * g) if i // g >= g - s}
        assert orig_rows == {0, 1}

    def test_bad_window(self):
        with pytest.raises(ParameterError):
            E.window_partition(tokens(g=8), 3)
        with pytest.raises(ParameterError):
            E.window_partition(tokens(g=8), 4, 1)


def attention_inputs(seed=0, b=3, h=2, n=16, hd=5):
    gen = torch.Generator().manual_seed(seed)
    q, k, v = (torch.randn(b, h, n, hd, generator=gen, dtype=torch.float64) for _ in range(3))
    tau = torch.tensor([0.1, 0.5], dtype=torch.float64)
    bias = torch.randn(h, n, n, generator=gen, dtype=torch.float64)
    return q, k, v, tau, bias


class TestCosineAttention:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10**6), st.floats(0.1, 100.0))
    def test_scale_invariance(self, seed, c):
        q, k, v, tau, bias = attention_inputs(seed)
        _, w1 = E.cosine_attention(q, k, v, tau, bias)
        _, w2 = E.cosine_attention(q * c, k * c, v, tau, bias)
        assert (w1 - w2).abs().max() <= 1e-6

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10**6))
    def test_rows_are_distributions(self, seed):
        q, k, v, tau, bias = attention_inputs(seed)
        _, allowed = E.window_partition(torch.zeros(1, 8, 8, 1), 4, 2)
        _, w = E.cosine_attention(q, k, v, tau, bias, allowed[:3])
        assert (w >= 0).all()
        assert torch.allclose(w.sum(-1), torch.ones((), dtype=w.dtype), atol=1e-6)
        assert (w.masked_select(~allowed[:3].unsqueeze(1).expand_as(w)) == 0).all()

    @pytest.mark.parametrize("tau", [0.01, 0.3, 5.0])
    def test_identical_keys_give_mean(self, tau):
        q, _, v, _, _ = attention_inputs(1)
        k = torch.ones_like(q)
        out, _ = E.cosine_attention(q, k, v, torch.full((2,), tau, dtype=torch.float64))
        assert torch.allclose(out, v.mean(dim=-2, keepdim=True).expand_as(out), atol=1e-12)

    def test_smooth_normalize(self):
        x = torch.tensor([[3.0, 4.0], [0.0, 0.0]], dtype=torch.float64)
        y = E.smooth_normalize(x)
        assert torch.allclose(y[0], torch.tensor([0.6, 0.8], dtype=torch.float64), atol=1e-7)
        assert torch.equal(y[1], torch.zeros(2, dtype=torch.float64))

    def test_relative_coords(self):
        rc = E.relative_log_coords(4)
        assert rc.shape == (16, 16, 2)
        assert rc[0, 15].tolist() == [-math.log(4), -math.log(4)]
        assert (rc.diagonal(dim1=0, dim2=1) == 0).all()


class TestBlocks:
    def test_zero_branches_identity(self):
        blk = E.SwinBlock(8, 2, 4, 2, 8).double()
        for lin in (blk.attn.proj, blk.mlp.fc2):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)
        # LayerNorm of a zero vector is its bias, which defaults to zero
        x = tokens(n=2, g=8, d=8)
        assert torch.equal(E.swin_block(x, blk), x)

    def test_merge_shape(self):
        pm = E.PatchMerge(32)
        assert E.patch_merge(torch.rand(2, 16, 16, 32), pm).shape == (2, 8, 8, 64)

    def test_merge_zero(self):
        pm = E.PatchMerge(4)
        nn.init.zeros_(pm.reduction.weight)
        assert not pm(torch.rand(1, 4, 4, 4)).any()

    def test_merge_odd(self):
        with pytest.raises(ParameterError):
            E.PatchMerge(4)(torch.rand(1, 3, 3, 4))


class TestEncoder:
    def test_reference_shape_chain(self):
        cfg = E.EncoderConfig(dims=(32, 64), heads=(2, 4))
        enc = E.SwinEncoder(cfg)
        out, pyramid = enc(torch.rand(1, 14, 64, 64))
        assert out.shape == (1, 8, 8, 64)
        assert [p.shape[1:] for p in pyramid] == [(16, 16, 32), (8, 8, 64)]

    @settings(max_examples=8, deadline=None)
    @given(st.sampled_from([(32, 2, 2), (32, 4, 2), (64, 4, 2), (32, 2, 3)]), st.sampled_from([4, 8]))
    def test_shape_chain_property(self, shape, d0):
        chip, patch, stages = shape
        window = 2
        cfg = E.EncoderConfig(chip_size=chip, patch=patch, window=window, depths=(1,) * stages,
                              dims=tuple(d0 * 2**i for i in range(stages)), heads=(2,) * stages)
        _, pyr = E.SwinEncoder(cfg)(torch.rand(1, 14, chip, chip))
        for i, p in enumerate(pyr):
            assert p.shape[1:] == (chip // patch // 2**i,) * 2 + (d0 * 2**i,)

    def test_eval_deterministic(self):
        enc = E.SwinEncoder(E.EncoderConfig())
        E.init_weights(enc, 0)
        enc.eval()
        x = torch.rand(2, 14, 64, 64)
        assert torch.equal(enc(x)[0], enc(x)[0])

    def test_seeded_init(self):
        a, b = E.SwinEncoder(E.EncoderConfig()), E.SwinEncoder(E.EncoderConfig())
        E.init_weights(a, 5)
        E.init_weights(b, 5)
        for (n, p), (_, q) in zip(a.state_dict().items(), b.state_dict().items()):
            assert torch.equal(p, q), n

    def test_mask_modes(self):
        x = torch.rand(1, 14, 64, 64)
        m = torch.zeros(1, 64, 64, dtype=torch.bool)
        m[:, :4, :4] = True
        enc = E.SwinEncoder(E.EncoderConfig(mask_token_mode=ZERO))
        e = enc.embed(x, m)
        ref = enc.patch_embed(torch.where(m.unsqueeze(1), 0.0, x))
        assert torch.equal(e, ref)


class TestAdamW:
    def test_zero_gradient_no_decay(self):
        p = {"w": torch.randn(3, 3)}
        before = p["w"].clone()
        E.adamw_step(p, {"w": torch.zeros(3, 3)}, E.OptimizerState(), 1e-3, weight_decay=0.0)
        assert torch.equal(p["w"], before)

    def test_first_step_unit_gradient(self):
        p = {"w": torch.zeros(4, dtype=torch.float64)}
        E.adamw_step(p, {"w": torch.ones(4, dtype=torch.float64)}, E.OptimizerState(), 1e-3, weight_decay=0.0)
        assert torch.allclose(p["w"], torch.full((4,), -1e-3, dtype=torch.float64), atol=1e-9, rtol=0)

    def test_decoupled_decay(self):
        p = {"w": torch.full((2, 2), 2.0, dtype=torch.float64)}
        E.adamw_step(p, {"w": torch.zeros(2, 2, dtype=torch.float64)}, E.OptimizerState(), 0.01,
                     weight_decay=0.05)
        assert torch.allclose(p["w"], torch.full((2, 2), 2.0 * (1 - 0.01 * 0.05), dtype=torch.float64))

    def test_decay_skips_vectors(self):
        p = {"b": torch.full((3,), 2.0)}
        E.adamw_step(p, {"b": torch.zeros(3)}, E.OptimizerState(), 0.01, weight_decay=0.5)
        assert torch.equal(p["b"], torch.full((3,), 2.0))

    def test_matches_hand_two_steps(self):
        b1, b2, lr, eps = 0.9, 0.99, 0.1, 1e-8
        p = {"w": torch.tensor([[1.0]], dtype=torch.float64)}
        opt = E.OptimizerState()
        w, m, v = 1.0, 0.0, 0.0
        for t, g in enumerate([0.5, -2.0], start=1):
            E.adamw_step(p, {"w": torch.tensor([[g]], dtype=torch.float64)}, opt, lr, (b1, b2), 0.05, eps)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            w = w * (1 - lr * 0.05) - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        assert float(p["w"]) == pytest.approx(w, rel=1e-12)
        assert opt.step == 2

    def test_non_finite_abort(self):
        p = {"w": torch.zeros(2)}
        with pytest.raises(TrainingAbortError, match="w"):
            E.adamw_step(p, {"w": torch.tensor([1.0, float("nan")])}, E.OptimizerState(), 1e-3)


class TestOneCycle:
    def test_endpoints(self):
        assert E.onecycle_lr(0, 1000) == 5e-7
        assert E.onecycle_lr(100, 1000) == pytest.approx(3e-4, rel=1e-15)
        assert E.onecycle_lr(1000, 1000) == pytest.approx(1e-6, rel=1e-12)

    def test_continuous_at_peak(self):
        a, b = E.onecycle_lr(100, 1000), E.onecycle_lr(101, 1000)
        assert abs(a - b) < 1e-7

    @given(st.integers(1, 5000), st.data())
    def test_bounded(self, total, data):
        step = data.draw(st.integers(0, total))
        lr = E.onecycle_lr(step, total)
        assert 5e-7 <= lr <= 3e-4 + 1e-18

    def test_out_of_range(self):
        with pytest.raises(ParameterError):
            E.onecycle_lr(11, 10)


class TestGradCheck:
    def test_linear_quadratic(self):
        torch.manual_seed(0)
        lin = nn.Linear(5, 3)
        x = torch.randn(7, 5)
        res = E.grad_check(lin, lambda m: (m(x.double()) ** 2).sum(), n_probes=20)
        assert res.max_rel_error < 1e-8

    def test_independent_parameter_zero(self):
        lin = nn.Linear(2, 2)
        extra = nn.Parameter(torch.ones(3))
        mod = nn.Module()
        mod.lin, mod.extra = lin, extra
        res = E.grad_check(mod, lambda m: (m.lin(torch.ones(1, 2, dtype=torch.float64)) ** 2).sum(),
                           n_probes=30, param_filter=lambda n: n == "extra")
        assert all(p[2] == 0.0 and p[3] == 0.0 and p[4] == 0.0 for p in res.probes)

    def test_relative_error_convention(self):
        assert E.relative_error(0.0, 0.0) == 0.0
        assert E.relative_error(1.0, 0.5) == 0.5

    def test_default_encoder(self):
        cfg = E.EncoderConfig()
        enc = E.SwinEncoder(cfg)
        E.init_weights(enc, 1)
        assert E.count_parameters(enc) <= 50_000
        gen = torch.Generator().manual_seed(3)
        x = torch.rand(2, 14, 64, 64, generator=gen, dtype=torch.float64)
        px = (torch.rand(2, 16, 16, generator=gen) < 0.6).repeat_interleave(4, 1).repeat_interleave(4, 2)
        cot = torch.randn(2, 8, 8, cfg.out_dim, generator=gen, dtype=torch.float64)
        res = E.grad_check(enc, lambda m: (m(x, px)[0] * cot).mean(), n_probes=64, epsilon=1e-5, seed=0)
        assert res.max_rel_error < 1e-4
        assert len(res.probes) == 64
        token = E.grad_check(enc, lambda m: (m(x, px)[0] * cot).mean(), n_probes=14, seed=1,
                             param_filter=lambda n: n == "mask_token")
        assert token.max_rel_error < 1e-4
        assert all(p[2] != 0.0 for p in token.probes)

    def test_temperature_clamp(self):
        enc = E.SwinEncoder(E.EncoderConfig())
        for m in enc.modules():
            if isinstance(m, E.WindowAttention):
                m.tau.data.fill_(-1.0)
        E.clamp_temperatures(enc)
        assert all((m.tau >= m.tau_min).all() for m in enc.modules() if isinstance(m, E.WindowAttention))
