import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from sider.diffusion import (Autoencoder, ConditionEmbedding, Denoiser, GuidanceConfig, LatentDiffusion,
                             ThumbnailCondition, eval_denoiser, forward_noise, make_schedule, strength_to_start,
                             train_denoiser)


def _diff(width=16, T=20, latent_channels=4, dtype=torch.float32):
    torch.manual_seed(0)
    dn = Denoiser(latent_channels, width, 49, T)
    # the condition projection starts at zero; give it weights so c matters
    with torch.no_grad():
        dn.cond_proj.weight.normal_(0, 0.2)
    return LatentDiffusion(Autoencoder("conv", latent_channels, 8), dn, make_schedule(T, 0.005, 0.2)).to(dtype).eval()


def test_schedule_examples():
    s = make_schedule(1, 0.1, 0.1)
    assert s.alpha_bar[0] == pytest.approx(0.9)
    s = make_schedule(2, 0.1, 0.2)
    np.testing.assert_allclose(s.alpha_bar, [0.9, 0.72])
    assert s.abar(0) == 1.0
    with pytest.raises(ValueError):
        make_schedule(0, 0.1, 0.2)
    with pytest.raises(ValueError):
        make_schedule(5, 0.3, 0.2)
    with pytest.raises(ValueError):
        make_schedule(5, 0.1, 1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 200), st.floats(1e-5, 0.5), st.floats(0.0, 0.49))
def test_schedule_strictly_decreasing(T, bmin, extra):
    s = make_schedule(T, bmin, bmin + extra)
    assert np.all(s.beta > 0) and np.all(s.beta < 1)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert s.alpha_bar[-1] <= s.alpha_bar[0]


def test_strength_mapping():
    assert strength_to_start(0.75, 20) == 15
    assert strength_to_start(1.0, 20) == 20
    assert strength_to_start(0.01, 20) == 1
    assert strength_to_start(0.525, 20) == 11  # half rounds up
    with pytest.raises(ValueError):
        strength_to_start(0.0, 20)


def test_forward_noise_closed_form_and_errors():
    s = make_schedule(20, 0.005, 0.2)
    z0, eps = torch.randn(2, 4, 4, 4), torch.randn(2, 4, 4, 4)
    a = s.abar(15)
    torch.testing.assert_close(forward_noise(s, z0, 15, eps), math.sqrt(a) * z0 + math.sqrt(1 - a) * eps)
    with pytest.raises(ValueError, match="outside"):
        forward_noise(s, z0, 0, eps)
    with pytest.raises(ValueError, match="shaped"):
        forward_noise(s, z0, 3, eps[:1])


def test_tiny_beta_limit_returns_input():
    s = make_schedule(10, 1e-12, 1e-12)
    z0 = torch.randn(1, 4, 4, 4, dtype=torch.float64)
    torch.testing.assert_close(forward_noise(s, z0, 10, torch.randn_like(z0)), z0, atol=1e-5, rtol=0)


def test_thumbnail_condition():
    prov = ThumbnailCondition(4)
    c = prov(torch.zeros(2, 3, 16, 16))
    assert c.values.shape == (2, 49) and not c.is_null
    assert torch.all(c.values[:, 0] == 1) and torch.all(c.values[:, 1:] == -1)
    n = c.as_null()
    assert n.is_null and torch.all(n.values == 0)


def test_guidance_lambda_zero_is_unconditional_bitwise():
    d = _diff()
    z = torch.randn(2, 4, 8, 8)
    c = ThumbnailCondition()(torch.rand(2, 3, 32, 32))
    with torch.no_grad():
        uncond = d.eps(z, 7, c.as_null())
        assert torch.equal(d.guided_score(z, 7, c, GuidanceConfig(1.0, 0.0)), uncond)
        assert torch.equal(d.guided_score(z, 7, c, GuidanceConfig(0.0, 3.0)), uncond)
        assert torch.equal(d.guided_score(z, 7, c.as_null(), GuidanceConfig(1.0, 3.0)), uncond)


def test_guidance_affine_in_lambda():
    d = _diff(dtype=torch.float64)
    z = torch.randn(2, 4, 8, 8, dtype=torch.float64)
    c = ThumbnailCondition()(torch.rand(2, 3, 32, 32, dtype=torch.float64))
    with torch.no_grad():
        e0 = d.guided_score(z, 5, c, GuidanceConfig(1.0, 0.0))
        e1 = d.guided_score(z, 5, c, GuidanceConfig(1.0, 1.0))
        assert not torch.allclose(e0, e1)
        for lam in (0.5, 2.0, 3.0, 7.25):
            got = d.guided_score(z, 5, c, GuidanceConfig(1.0, lam))
            torch.testing.assert_close(got, e0 + lam * (e1 - e0), atol=1e-6, rtol=0)


@pytest.mark.parametrize("t_start", range(1, 21))
def test_oracle_ddim_reconstructs_clean_latent(t_start):
    d = _diff(dtype=torch.float64)
    s = d.schedule
    z0 = torch.randn(3, 4, 8, 8, dtype=torch.float64)
    zT = forward_noise(s, z0, t_start, torch.randn_like(z0))

    def oracle(z, t):
        a = s.abar(t)
        return (z - math.sqrt(a) * z0) / math.sqrt(1 - a)

    out = d.sample_omega(zT, t_start, ConditionEmbedding.null(3, 49, torch.float64), GuidanceConfig(), oracle)
    assert float((out - z0).abs().max()) < 1e-5


def test_ddim_step_guards():
    d = _diff()
    z = torch.randn(1, 4, 8, 8)
    c = ConditionEmbedding.null(1, 49)
    with pytest.raises(ValueError, match="already denoised"):
        d.ddim_step(z, 0, c, GuidanceConfig())
    with pytest.raises(ValueError):
        d.sample_omega(z, 21, c, GuidanceConfig())


def test_autoencoder_modes_and_shapes():
    ident = Autoencoder("identity")
    x = torch.rand(2, 3, 16, 16)
    assert torch.equal(ident.decode(ident.encode(x)), x)
    ae = Autoencoder("conv", 4, 8)
    assert ae.encode(x).shape == (2, 4, 4, 4) and ae.latent_shape(16) == (4, 4, 4)
    out = ae.decode(torch.randn(2, 4, 4, 4) * 50)
    assert out.min() >= 0 and out.max() <= 1
    with pytest.raises(ValueError):
        ae.encode(torch.rand(2, 3, 18, 18))
    with pytest.raises(ValueError):
        ae.decode(torch.randn(2, 3, 4, 4))
    with pytest.raises(ValueError):
        Autoencoder("vq")


def test_untrained_denoiser_ignores_condition_until_trained():
    dn = Denoiser(4, 16, 49, 20)
    z, t = torch.randn(2, 4, 8, 8), torch.tensor([3, 9])
    with torch.no_grad():
        assert torch.equal(dn(z, t, torch.randn(2, 49)), dn(z, t, torch.zeros(2, 49)))


def test_denoiser_training_reduces_eps_mse():
    rng = np.random.default_rng(0)
    # structured latents: smooth random fields
    base = rng.standard_normal((64, 4, 2, 2)).astype(np.float32)
    z = torch.nn.functional.interpolate(torch.from_numpy(base), size=8, mode="bilinear").numpy()
    c = np.concatenate([np.ones((64, 1)), rng.uniform(-1, 1, (64, 48))], 1).astype(np.float32)
    s = make_schedule(20, 0.005, 0.2)
    before = eval_denoiser(Denoiser(4, 16, 49, 20), s, z, c)
    dn = train_denoiser(z, c, s, epochs=25, width=16, lr=3e-3)
    assert eval_denoiser(dn, s, z, c) < 0.7 * before


def test_zero_epochs_returns_init_weights():
    s = make_schedule(20, 0.005, 0.2)
    z = np.zeros((4, 4, 8, 8), np.float32)
    c = np.zeros((4, 49), np.float32)
    a = train_denoiser(z, c, s, epochs=0, width=16, seed=3)
    torch.manual_seed(3)
    b = Denoiser(4, 16, 49, 20)
    for (k, u), (_, v) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(u, v), k
