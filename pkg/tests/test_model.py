import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from guidnoise.errors import InvalidConfigError, ShapeError
from guidnoise.model import (
    AffineParams,
    GuidedNoiseNet,
    ModelConfig,
    count_parameters,
    gafm_modulate,
    sinusoidal_table,
)

SMALL = ModelConfig(base_channels=8, time_embed_dim=16, guidance_embed_dim=16, patch_size=16)
MICRO = ModelConfig(base_channels=1, num_levels=2, time_embed_dim=4, guidance_embed_dim=4,
                    patch_size=4)


def randomize(model, seed=0, scale=0.2):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return model


def inputs(cfg, b=2, seed=1):
    g = torch.Generator().manual_seed(seed)
    shape = (b, cfg.in_channels, cfg.patch_size, cfg.patch_size)
    return [torch.randn(shape, generator=g), torch.rand(shape, generator=g) * 2 - 1,
            torch.rand(shape, generator=g) * 2 - 1, torch.rand(shape, generator=g) * 2 - 1]


@pytest.fixture(scope="module")
def net():
    torch.manual_seed(0)
    return randomize(GuidedNoiseNet(SMALL)).eval()


class TestConfig:
    def test_channels(self):
        assert ModelConfig().channels == [32, 64, 128]

    @pytest.mark.parametrize("kw", [dict(patch_size=30), dict(base_channels=0),
                                    dict(layers_per_block=1), dict(time_embed_dim=7),
                                    dict(latent="pixels")])
    def test_invalid(self, kw):
        with pytest.raises(InvalidConfigError):
            ModelConfig(**kw)

    def test_default_size_is_desk_scale(self):
        n = count_parameters(GuidedNoiseNet())
        assert 1_000_000 <= n <= 3_500_000


class TestTimeEmbed:
    def test_table_endpoints_differ(self):
        tab = sinusoidal_table(torch.tensor([0, 50]), 128)
        assert (tab[0] - tab[1]).abs().gt(1e-3).sum() >= 64

    def test_table_at_zero(self):
        tab = sinusoidal_table(torch.tensor([0]), 8)[0].numpy()
        np.testing.assert_array_equal(tab, [0, 0, 0, 0, 1, 1, 1, 1])

    def test_table_frequencies(self):
        tab = sinusoidal_table(torch.tensor([1]), 6)[0].numpy()
        freqs = [1.0, 1e-2, 1e-4]
        np.testing.assert_allclose(tab, [np.sin(f) for f in freqs] + [np.cos(f) for f in freqs],
                                   atol=1e-12)

    def test_deterministic_and_sized(self, net):
        a, b = net.time_embed(0), net.time_embed(0)
        assert torch.equal(a, b)
        assert a.shape == (1, SMALL.time_embed_dim)
        assert not torch.allclose(net.time_embed(0), net.time_embed(50))


class TestEncoder:
    def test_feature_shapes(self):
        m = GuidedNoiseNet(ModelConfig())
        out = m.encode(torch.zeros(1, 3, 32, 32), m.time_embed(3))
        assert [tuple(f.shape[1:]) for f in out.F] == [(32, 32, 32), (64, 16, 16), (128, 8, 8)]
        assert out.z is out.F[-1]

    def test_pure(self, net):
        x = inputs(SMALL)[0]
        a = net.encode(x, net.time_embed(4))
        b = net.encode(x, net.time_embed(4))
        for fa, fb in zip(a.F, b.F):
            assert torch.equal(fa, fb)

    def test_zero_weights_give_zero_features(self):
        m = GuidedNoiseNet(SMALL)
        with torch.no_grad():
            for p in m.encoder.parameters():
                p.zero_()
        out = m.encode(inputs(SMALL)[1], m.time_embed(10))
        assert all(torch.count_nonzero(f) == 0 for f in out.F)

    def test_shape_error(self, net):
        with pytest.raises(ShapeError):
            net.encode(torch.zeros(1, 3, 8, 8), net.time_embed(1))

    def test_single_shared_encoder(self, net):
        enc_ids = {id(p) for p in net.encoder.parameters()}
        all_ids = [id(p) for p in net.parameters()]
        assert len(all_ids) == len(set(all_ids))
        encoders = [m for m in net.modules() if type(m).__name__ == "Encoder"]
        assert len(encoders) == 1
        assert enc_ids <= set(all_ids)

    def test_encoder_change_reaches_every_stream(self):
        m = randomize(GuidedNoiseNet(SMALL))
        x_t, c, x_r, c_r = inputs(SMALL)
        t = 5
        base_h = m.guidance_embed(x_r, c_r, m.time_embed(t))
        base_c = m.encode(c, m.time_embed(t)).z
        with torch.no_grad():
            m.encoder.stem.bias.add_(0.5)
        assert not torch.allclose(m.guidance_embed(x_r, c_r, m.time_embed(t)), base_h)
        assert not torch.allclose(m.encode(c, m.time_embed(t)).z, base_c)


class TestGuidance:
    def test_dimension(self, net):
        _, _, x_r, c_r = inputs(SMALL)
        assert net.guidance_embed(x_r, c_r, net.time_embed(2)).shape == (2, SMALL.guidance_embed_dim)

    def test_order_matters(self, net):
        _, _, x_r, c_r = inputs(SMALL)
        temb = net.time_embed(2)
        diff = net.guidance_embed(x_r, c_r, temb) - net.guidance_embed(c_r, x_r, temb)
        assert diff.abs().max() > 0

    def test_noise_free_guidance_is_finite(self, net):
        c = inputs(SMALL)[1]
        assert torch.isfinite(net.guidance_embed(c, c, net.time_embed(0))).all()


class TestAffine:
    def test_zero_at_init(self):
        m = GuidedNoiseNet(SMALL)
        h = torch.randn(2, SMALL.guidance_embed_dim)
        for i in range(1, SMALL.num_levels + 1):
            p = m.affine_params(h, m.time_embed(3), i)
            assert torch.count_nonzero(p.alpha) == 0 and torch.count_nonzero(p.beta) == 0

    def test_sizes_follow_decoder_block(self, net):
        h = torch.randn(1, SMALL.guidance_embed_dim)
        sizes = [net.affine_params(h, net.time_embed(3), i).alpha.shape[1] for i in (1, 2, 3)]
        assert sizes == [32, 16, 8]

    def test_distinct_h(self, net):
        temb = net.time_embed(3)
        a = net.affine_params(torch.zeros(1, 16), temb, 2)
        b = net.affine_params(torch.ones(1, 16), temb, 2)
        assert (a.alpha - b.alpha).abs().max() > 0 and (a.beta - b.beta).abs().max() > 0

    @pytest.mark.parametrize("i", [0, 4])
    def test_index_out_of_range(self, net, i):
        with pytest.raises(IndexError):
            net.affine_params(torch.zeros(1, 16), net.time_embed(1), i)


class TestGAFM:
    def test_identity(self):
        f = torch.randn(2, 3, 4, 4)
        z = torch.zeros(3)
        assert torch.equal(gafm_modulate(f, AffineParams(z, z)), f)

    def test_alpha_minus_one_gives_beta(self):
        f = torch.randn(1, 3, 4, 4)
        beta = torch.tensor([0.3, -1.0, 2.0])
        out = gafm_modulate(f, AffineParams(-torch.ones(3), beta))
        assert torch.equal(out, beta[None, :, None, None].expand_as(f))

    def test_elementwise_oracle(self):
        rng = np.random.default_rng(0)
        f = rng.standard_normal((1, 3, 2, 2))
        alpha, beta = [0.5, -0.5, 0.0], [0.1, 0.0, -0.1]
        expected = np.empty_like(f)
        for ch in range(3):
            for i in range(2):
                for j in range(2):
                    expected[0, ch, i, j] = (1 + alpha[ch]) * f[0, ch, i, j] + beta[ch]
        out = gafm_modulate(torch.from_numpy(f),
                            AffineParams(torch.tensor(alpha, dtype=torch.float64),
                                         torch.tensor(beta, dtype=torch.float64)))
        np.testing.assert_allclose(out.numpy(), expected, atol=1e-15)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            gafm_modulate(torch.zeros(1, 4, 2, 2), AffineParams(torch.zeros(3), torch.zeros(3)))

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000), c=st.integers(1, 6))
    def test_identity_property(self, seed, c):
        f = torch.randn(2, c, 3, 3, generator=torch.Generator().manual_seed(seed))
        z = torch.zeros(2, c)
        assert torch.equal(gafm_modulate(f, AffineParams(z, z)), f)


class TestDecodeAndPredict:
    def _parts(self, m, t=7):
        x_t, c, x_r, c_r = inputs(SMALL)
        temb = m.time_embed(t)
        ex = m.encode(x_t, temb)
        ec = m.encode(c, temb)
        h = m.guidance_embed(x_r, c_r, temb)
        return ex, ec, h, temb

    def test_output_shape(self, net):
        x_t, c, x_r, c_r = inputs(SMALL)
        assert net(x_t, c, x_r, c_r, 9).shape == x_t.shape

    def test_zero_affine_equals_unmodulated_path(self):
        m = GuidedNoiseNet(SMALL)
        with torch.no_grad():
            for name, p in m.named_parameters():
                if not name.startswith("affine") or name.endswith("out.weight") or name.endswith("out.bias"):
                    continue
                p.normal_()
        ex, ec, h, temb = self._parts(m)
        a = m.decode(ex.z, ex.F, ec.F, h, temb, modulate=True)
        b = m.decode(ex.z, ex.F, ec.F, h, temb, modulate=False)
        assert torch.equal(a, b)

    def test_h_changes_output(self, net):
        ex, ec, h, temb = self._parts(net)
        a = net.decode(ex.z, ex.F, ec.F, h, temb)
        b = net.decode(ex.z, ex.F, ec.F, h + 1.0, temb)
        assert (a - b).norm() > 0

    def test_missing_skip_level(self, net):
        ex, ec, h, temb = self._parts(net)
        with pytest.raises(ShapeError):
            net.decode(ex.z, ex.F[:-1], ec.F, h, temb)

    def test_predict_matches_composition(self, net):
        x_t, c, x_r, c_r = inputs(SMALL)
        temb = net.time_embed(7)
        ex, ec = net.encode(x_t, temb), net.encode(c, temb)
        h = net.guidance_embed(x_r, c_r, temb)
        composed = net.decode(ex.z, ex.F, ec.F, h, temb)
        torch.testing.assert_close(net.predict(x_t, c, x_r, c_r, 7), composed, atol=1e-5, rtol=1e-5)

    def test_batch_independence(self, net):
        x_t, c, x_r, c_r = inputs(SMALL, b=4)
        t = torch.tensor([1, 10, 30, 50])
        batched = net(x_t, c, x_r, c_r, t)
        for k in range(4):
            single = net(x_t[k:k + 1], c[k:k + 1], x_r[k:k + 1], c_r[k:k + 1], int(t[k]))
            assert (batched[k] - single[0]).abs().max() <= 1e-5

    def test_deterministic(self, net):
        args = inputs(SMALL)
        assert torch.equal(net(*args, 3), net(*args, 3))

    def test_finite_on_extreme_inputs(self, net):
        x_t, c, x_r, c_r = inputs(SMALL)
        x_t = torch.full_like(x_t, 6.0)
        assert torch.isfinite(net(x_t, torch.ones_like(c), -torch.ones_like(x_r), c_r, 50)).all()

    def test_guidance_changes_prediction(self, net):
        x_t, c, x_r, c_r = inputs(SMALL)
        a = net(x_t, c, x_r, c_r, 20)
        b = net(x_t, c, c_r + 0.3 * torch.randn_like(c_r), c_r, 20)
        assert (a - b).norm() > 0


def test_gradient_matches_finite_difference():
    torch.manual_seed(0)
    m = randomize(GuidedNoiseNet(MICRO), seed=3, scale=0.5)
    assert count_parameters(m) <= 1000
    args = inputs(MICRO, b=1, seed=4)
    target = torch.randn_like(args[0], generator=torch.Generator().manual_seed(9))

    def loss():
        return ((m(*args, 12) - target) ** 2).mean()

    m.zero_grad()
    loss().backward()
    params = dict(m.named_parameters())
    rng = np.random.default_rng(0)
    names = sorted(params)
    checked = 0
    for name in rng.choice(names, size=12, replace=False):
        p = params[name]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        analytic = float(p.grad[idx])
        if abs(analytic) < 1e-3:
            continue
        step = 1e-2
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + step
            up = loss().item()
            p[idx] = orig - step
            down = loss().item()
            p[idx] = orig
        numeric = (up - down) / (2 * step)
        assert abs(numeric - analytic) / abs(analytic) < 1e-2, name
        checked += 1
    assert checked >= 4
