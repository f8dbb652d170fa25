import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from guidnoise.errors import InvalidConfigError, ShapeError
from guidnoise.losses import (
    HistogramDist,
    LossWeights,
    bin_centers,
    diffusion_loss,
    kl_divergence,
    refine_loss,
    soft_histogram,
    total_loss,
)


def kernel_oracle(values, bins, lo=-1.0, hi=1.0):
    """Per-value, per-center triangular kernel weights, summed and normalized."""
    centers = np.linspace(lo, hi, bins)
    spacing = centers[1] - centers[0]
    out = np.zeros(bins)
    for v in values:
        v = min(max(v, lo), hi)
        for k, c in enumerate(centers):
            out[k] += max(0.0, 1.0 - abs(v - c) / spacing)
    return out / len(values)


def hist(values, bins, lo=-1.0, hi=1.0):
    return soft_histogram(torch.tensor(values, dtype=torch.float64),
                          LossWeights(bins=bins, lo=lo, hi=hi))


class TestWeights:
    @pytest.mark.parametrize("kw", [dict(lam=-1), dict(gamma=-0.1), dict(t_split=0), dict(bins=1),
                                    dict(lo=1.0, hi=1.0), dict(eps_h=0.0), dict(domain="x")])
    def test_invalid(self, kw):
        with pytest.raises(InvalidConfigError):
            LossWeights(**kw)

    def test_defaults(self):
        w = LossWeights()
        assert (w.lam, w.gamma, w.t_split, w.bins, w.eps_h) == (0.1, 0.1, 2, 256, 1e-10)


class TestDiffusionLoss:
    def test_zero(self):
        v = torch.randn(2, 3, 4, 4)
        assert float(diffusion_loss(v, v)) == 0.0

    def test_constant_offset(self):
        v = torch.randn(2, 3, 4, 4, dtype=torch.float64)
        assert float(diffusion_loss(v + 0.1, v)) == pytest.approx(0.01, abs=1e-12)

    def test_symmetric(self):
        a, b = torch.randn(5), torch.randn(5)
        assert float(diffusion_loss(a, b)) == float(diffusion_loss(b, a))

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            diffusion_loss(torch.zeros(3), torch.zeros(4))


class TestSoftHistogram:
    def test_value_on_center(self):
        c = bin_centers(5, -1, 1, torch.float64)
        h = hist([float(c[3])] * 4, 5)
        np.testing.assert_allclose(h.probs.numpy(), [0, 0, 0, 1, 0], atol=1e-12)

    def test_midpoint(self):
        h = hist([0.25], 5)  # centers -1, -.5, 0, .5, 1
        np.testing.assert_allclose(h.probs.numpy(), [0, 0, 0.5, 0.5, 0], atol=1e-12)

    def test_three_values_four_bins(self):
        vals = [-0.3, 0.0, 0.3]
        expected = kernel_oracle(vals, 4)
        np.testing.assert_allclose(expected, [0, 0.5, 0.5, 0], atol=1e-12)
        np.testing.assert_allclose(hist(vals, 4).probs.numpy(), expected, atol=1e-12)

    def test_asymmetric_values_match_oracle(self):
        vals = [-0.9, 0.1, 0.55, 0.99, -1.4, 2.0]
        np.testing.assert_allclose(hist(vals, 7).probs.numpy(), kernel_oracle(vals, 7), atol=1e-12)

    def test_clamping(self):
        np.testing.assert_allclose(hist([-5.0, 5.0], 3).probs.numpy(), [0.5, 0, 0.5], atol=1e-12)

    def test_empty(self):
        with pytest.raises(ValueError):
            soft_histogram(torch.zeros(0))

    @settings(max_examples=60, deadline=None)
    @given(values=st.lists(st.floats(-3, 3, allow_nan=False), min_size=1, max_size=200),
           bins=st.integers(2, 300))
    def test_mass_sums_to_one(self, values, bins):
        h = hist(values, bins)
        assert abs(float(h.probs.sum()) - 1.0) <= 1e-6
        assert float(h.probs.min()) >= 0.0

    @settings(max_examples=30, deadline=None)
    @given(values=st.lists(st.floats(-1, 1, allow_nan=False), min_size=1, max_size=40),
           bins=st.integers(2, 40))
    def test_matches_oracle_property(self, values, bins):
        np.testing.assert_allclose(hist(values, bins).probs.numpy(), kernel_oracle(values, bins),
                                   atol=1e-9)

    def test_centers_uniform(self):
        c = bin_centers(256, -1, 1, torch.float64).numpy()
        d = np.diff(c)
        assert np.all(d > 0) and np.allclose(d, 2 / 255)

    def test_gradient_matches_finite_difference(self):
        w = LossWeights(bins=16)
        rng = np.random.default_rng(0)
        spacing = 2 / 15
        # keep every value well away from a kernel kink (bin center)
        vals = rng.uniform(-0.9, 0.9, 30)
        vals = np.where(np.abs(((vals + 1) / spacing) % 1 - 0.5) > 0.4, vals + 0.3 * spacing, vals)
        x = torch.tensor(vals, requires_grad=True)
        weights = torch.linspace(0.3, 2.0, 16, dtype=torch.float64)

        def f(t):
            return float((soft_histogram(t, w).probs * weights).sum())

        (soft_histogram(x, w).probs * weights).sum().backward()
        step = 1e-3 * spacing
        for i in range(len(vals)):
            up, down = x.detach().clone(), x.detach().clone()
            up[i] += step
            down[i] -= step
            numeric = (f(up) - f(down)) / (2 * step)
            assert abs(numeric - float(x.grad[i])) <= 1e-3 * abs(float(x.grad[i]))


class TestKL:
    def test_self_is_zero(self):
        h = hist(list(np.linspace(-0.5, 0.5, 50)), 32)
        assert float(kl_divergence(h, h)) == 0.0

    def test_two_bin_oracle(self):
        c = bin_centers(2, -1, 1, torch.float64)
        p = HistogramDist(c, torch.tensor([0.5, 0.5], dtype=torch.float64))
        q = HistogramDist(c, torch.tensor([0.9, 0.1], dtype=torch.float64))
        expected = 0.5 * math.log(5 / 9) + 0.5 * math.log(5)
        assert expected == pytest.approx(0.5108256237659907, abs=1e-15)
        assert float(kl_divergence(p, q, 1e-15)) == pytest.approx(expected, abs=1e-9)

    def test_center_mismatch(self):
        a = HistogramDist(bin_centers(4, -1, 1), torch.full((4,), 0.25))
        b = HistogramDist(bin_centers(4, -2, 2), torch.full((4,), 0.25))
        with pytest.raises(ShapeError):
            kl_divergence(a, b)

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 10**6), bins=st.integers(2, 64))
    def test_gibbs_inequality(self, seed, bins):
        rng = np.random.default_rng(seed)
        c = bin_centers(bins, -1, 1, torch.float64)
        p = rng.dirichlet(np.full(bins, 0.3))
        q = rng.dirichlet(np.full(bins, 0.3))
        p_dist = HistogramDist(c, torch.from_numpy(p))
        kl = float(kl_divergence(p_dist, HistogramDist(c, torch.from_numpy(q))))
        assert kl >= -1e-9
        assert float(kl_divergence(p_dist, p_dist)) == 0.0


class TestRefineLoss:
    def setup_method(self):
        g = torch.Generator().manual_seed(0)
        self.c = torch.rand(1, 3, 16, 16, generator=g, dtype=torch.float64)
        self.noise = 0.1 * torch.randn(1, 3, 16, 16, generator=g, dtype=torch.float64)

    def test_identical_is_zero(self):
        x = self.c + self.noise
        assert float(refine_loss(x, x, self.c)) == 0.0

    def test_clean_vs_noisy(self):
        x_real = self.c + self.noise
        full = float(refine_loss(self.c, x_real, self.c, LossWeights(gamma=0.1)))
        kld_only = float(refine_loss(self.c, x_real, self.c, LossWeights(gamma=0.0)))
        mse = float(torch.mean(self.noise**2))
        assert full > 0
        assert full == pytest.approx(kld_only + 0.1 * mse, rel=1e-12)
        assert kld_only > 100 * 0.1 * mse

    def test_shift_increases_kld(self):
        w = LossWeights(gamma=0.0)
        x_real = self.c + self.noise
        g = torch.Generator().manual_seed(1)
        x_hat = self.c + 0.1 * torch.randn(1, 3, 16, 16, generator=g, dtype=torch.float64)
        base = float(refine_loss(x_hat, x_real, self.c, w))
        shifted = float(refine_loss(x_hat + 0.1, x_real, self.c, w))
        assert shifted > base

    def test_pixel_gradient(self):
        w = LossWeights()
        x_real = self.c + self.noise
        g = torch.Generator().manual_seed(2)
        x_hat = (self.c + 0.12 * torch.randn(1, 3, 16, 16, generator=g, dtype=torch.float64))
        x_hat.requires_grad_(True)
        refine_loss(x_hat, x_real, self.c, w).backward()
        spacing = 2 / 255
        checked = 0
        for idx in [(0, 0, 0, 0), (0, 1, 5, 7), (0, 2, 15, 3), (0, 0, 9, 9), (0, 1, 2, 14)]:
            pos = (float(x_hat.detach()[idx] - self.c[idx]) + 1) / spacing
            if abs(pos - round(pos)) < 0.01:
                continue
            step = 1e-6
            up, down = x_hat.detach().clone(), x_hat.detach().clone()
            up[idx] += step
            down[idx] -= step
            numeric = (float(refine_loss(up, x_real, self.c, w))
                       - float(refine_loss(down, x_real, self.c, w))) / (2 * step)
            analytic = float(x_hat.grad[idx])
            assert abs(numeric - analytic) <= 1e-3 * abs(analytic)
            checked += 1
        assert checked >= 4

    def test_target_is_not_differentiated(self):
        x_real = (self.c + self.noise).requires_grad_(True)
        x_hat = (self.c + 0.5 * self.noise).requires_grad_(True)
        refine_loss(x_hat, x_real, self.c, LossWeights(gamma=0.0)).backward()
        assert x_real.grad is None or torch.count_nonzero(x_real.grad) == 0
        assert torch.count_nonzero(x_hat.grad) > 0

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            refine_loss(self.c, self.c[..., :8], self.c)


class TestTotal:
    def test_lambda_zero(self):
        assert float(total_loss(torch.tensor(0.7), torch.tensor(5.0), LossWeights(lam=0))) == pytest.approx(0.7)

    def test_scalar_oracle(self):
        assert float(total_loss(torch.tensor(1.0, dtype=torch.float64),
                                torch.tensor(2.0, dtype=torch.float64))) == pytest.approx(1.2, abs=1e-15)

    @settings(max_examples=40, deadline=None)
    @given(a=st.floats(-10, 10), b=st.floats(-10, 10), d=st.floats(-10, 10))
    def test_linear_in_refine(self, a, b, d):
        w = LossWeights()
        f = lambda r: float(total_loss(torch.tensor(a, dtype=torch.float64),  # noqa: E731
                                       torch.tensor(r, dtype=torch.float64), w))
        assert f(b + d) - f(b) == pytest.approx(0.1 * d, abs=1e-9)
