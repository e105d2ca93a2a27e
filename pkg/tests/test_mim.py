from decimal import ROUND_HALF_UP, Decimal

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from toamim import mim
from toamim.errors import DegenerateLossError, ParameterError


def expected_count(ratio, cells):
    n = (Decimal(repr(ratio)) * cells).quantize(Decimal(1), rounding=ROUND_HALF_UP)
    return max(1, int(n))


class TestGenMask:
    def test_sixty_percent_of_256(self):
        m = mim.gen_mask(16, 16, 0.6, seed=0)
        assert m.n_masked == 154 and m.patch_grid.shape == (16, 16)

    def test_full(self):
        assert mim.gen_mask(5, 7, 1.0, seed=1).patch_grid.all()

    def test_half_of_four(self):
        assert mim.gen_mask(2, 2, 0.5, seed=2).n_masked == 2

    def test_minimum_one(self):
        assert mim.gen_mask(2, 2, 0.01, seed=0).n_masked == 1

    @pytest.mark.parametrize("ratio", [0.0, -0.1, 1.01])
    def test_bad_ratio(self, ratio):
        with pytest.raises(ParameterError):
            mim.gen_mask(4, 4, ratio, seed=0)

    def test_deterministic(self):
        a = mim.gen_mask(16, 16, 0.6, seed=5).patch_grid
        b = mim.gen_mask(16, 16, 0.6, seed=5).patch_grid
        c = mim.gen_mask(16, 16, 0.6, seed=6).patch_grid
        assert np.array_equal(a, b) and not np.array_equal(a, c)

    @settings(max_examples=200)
    @given(st.integers(1, 24), st.integers(1, 24), st.floats(0.001, 1.0), st.integers(0, 2**32 - 1))
    def test_count_exact(self, h, w, ratio, seed):
        m = mim.gen_mask(h, w, ratio, seed=seed)
        assert m.n_masked == expected_count(ratio, h * w)

    def test_pixel_mask(self):
        m = mim.MaskSpec(np.array([[True, False], [False, False]]), 3, 0.25)
        px = m.pixel_mask()
        assert px.shape == (6, 6) and px.sum() == 9 and px[:3, :3].all()


class TestApplyMask:
    x = np.random.default_rng(0).uniform(size=(14, 8, 8)).astype(np.float32)

    def test_empty_mask_identity(self):
        out = mim.apply_mask(self.x, mim.empty_mask(4, 4, 2))
        assert np.array_equal(out, self.x)

    def test_full_mask_zero(self):
        m = mim.gen_mask(4, 4, 1.0, seed=0, patch_size=2)
        assert not mim.apply_mask(self.x, m).any()

    def test_single_patch_changes_p2_pixels_per_band(self):
        grid = np.zeros((4, 4), bool)
        grid[1, 2] = True
        m = mim.MaskSpec(grid, 2, 1 / 16)
        out = mim.apply_mask(self.x, m)
        changed = out != self.x
        assert changed.sum() == 14 * 4
        assert (changed.sum(axis=(1, 2)) == 4).all()

    def test_learned_token(self):
        grid = np.zeros((4, 4), bool)
        grid[0, 0] = True
        token = np.arange(14, dtype=np.float32)
        out = mim.apply_mask(self.x, mim.MaskSpec(grid, 2, 1 / 16), mim.LEARNED, token)
        assert np.array_equal(out[:, 0, 0], token)
        assert np.array_equal(out[:, 4:, 4:], self.x[:, 4:, 4:])

    def test_torch_batch(self):
        xt = torch.from_numpy(np.stack([self.x, self.x]))
        masks = np.zeros((2, 8, 8), bool)
        masks[1, :2, :2] = True
        out = mim.apply_mask(xt, masks)
        assert torch.equal(out[0], xt[0])
        assert (out[1, :, :2, :2] == 0).all()

    def test_dimension_mismatch(self):
        with pytest.raises(ParameterError):
            mim.apply_mask(self.x, mim.empty_mask(3, 3, 2))

    def test_learned_needs_token(self):
        with pytest.raises(ParameterError):
            mim.apply_mask(self.x, mim.empty_mask(4, 4, 2), mim.LEARNED)


class TestLoss:
    def test_exact_prediction(self):
        x = np.random.default_rng(1).uniform(size=(14, 8, 8))
        assert mim.masked_l1_loss(x, x, mim.gen_mask(4, 4, 0.5, 0, 2)) == 0.0

    def test_unmasked_perturbation_ignored(self):
        rng = np.random.default_rng(2)
        x, y = rng.uniform(size=(2, 14, 8, 8))
        m = mim.gen_mask(4, 4, 0.5, 0, 2)
        px = m.pixel_mask()
        y2 = np.where(px, y, y + rng.normal(size=y.shape))
        assert mim.masked_l1_loss(x, y, m) == mim.masked_l1_loss(x, y2, m)

    def test_constant_error(self):
        grid = np.zeros((4, 4), bool)
        grid[2, 3] = True
        x = np.zeros((14, 8, 8))
        y = x + 0.1
        assert mim.masked_l1_loss(x, y, mim.MaskSpec(grid, 2, 1 / 16)) == pytest.approx(0.1, rel=1e-12)

    def test_empty_mask(self):
        x = np.zeros((14, 8, 8))
        with pytest.raises(DegenerateLossError):
            mim.masked_l1_loss(x, x, mim.empty_mask(4, 4, 2))

    def test_shape_mismatch(self):
        with pytest.raises(ParameterError):
            mim.masked_l1_loss(np.zeros((14, 8, 8)), np.zeros((13, 8, 8)), mim.gen_mask(4, 4, 1.0, 0, 2))

    def test_torch_matches_numpy(self):
        rng = np.random.default_rng(3)
        x, y = rng.uniform(size=(2, 3, 14, 8, 8))
        masks = np.stack([mim.gen_mask(4, 4, 0.6, i, 2).pixel_mask() for i in range(3)])
        t = mim.masked_l1_loss(torch.from_numpy(x), torch.from_numpy(y), masks)
        assert float(t) == pytest.approx(mim.masked_l1_loss(x, y, masks), rel=1e-12)

    def test_locality_finite_difference(self):
        rng = np.random.default_rng(4)
        pred, target = rng.uniform(size=(2, 14, 8, 8))
        m = mim.gen_mask(4, 4, 0.5, 7, 2)
        px = m.pixel_mask()
        eps = 1e-6
        for idx in [(0, r, c) for r in range(8) for c in range(8)]:
            up, dn = pred.copy(), pred.copy()
            up[idx] += eps
            dn[idx] -= eps
            g = (mim.masked_l1_loss(up, target, m) - mim.masked_l1_loss(dn, target, m)) / (2 * eps)
            if not px[idx[1:]]:
                assert g == 0.0
            else:
                assert abs(g) == pytest.approx(1.0 / (px.sum() * 14), rel=1e-4)

    def test_locality_autograd(self):
        rng = np.random.default_rng(5)
        pred = torch.tensor(rng.uniform(size=(2, 14, 8, 8)), requires_grad=True)
        target = torch.tensor(rng.uniform(size=(2, 14, 8, 8)))
        masks = np.stack([mim.gen_mask(4, 4, 0.5, i, 2).pixel_mask() for i in range(2)])
        mim.masked_l1_loss(pred, target, masks).backward()
        unmasked = torch.from_numpy(~masks)[:, None].expand_as(pred)
        assert (pred.grad[unmasked] == 0).all()
