import math

import numpy as np
import pytest
import torch
from torch import nn

from seqaug.gan import GAN, GanConfig, gan_losses, gradient_penalty
from seqaug.training import TrainingPolicy, fit_generator, get_family

from conftest import make_matrix


def test_config_defaults():
    assert GanConfig(variant="wgan").n_critic == 5
    assert GanConfig(variant="wgangp").n_critic == 5
    assert GanConfig(variant="gan").n_critic == 1
    cfg = GanConfig()
    assert (cfg.noise_dim, cfg.generator_widths, cfg.discriminator_widths) == (32, (128, 256), (256, 128))
    assert (cfg.clip_c, cfg.lambda_gp) == (0.01, 10.0)
    with pytest.raises(ValueError):
        GanConfig(n_critic=0)


def test_architecture_widths():
    m = GAN(30, GanConfig())
    assert [l.out_features for l in m.generator if isinstance(l, nn.Linear)] == [128, 256, 30]
    assert [l.out_features for l in m.critic if isinstance(l, nn.Linear)] == [256, 128, 1]


def test_loss_examples():
    assert gan_losses([1, 1], [0, 0], "wgan") == (-1.0, -0.0)
    loss_d, loss_g = gan_losses([0.5], [0.5], "gan")
    assert loss_d == pytest.approx(2 * math.log(2), abs=1e-12)
    assert round(loss_d, 3) == 1.386
    assert loss_g == pytest.approx(math.log(2), abs=1e-12)
    assert gan_losses([0.3, -2.0], [0.3, -2.0], "wgangp")[0] == 0


def test_gan_loss_domain():
    with pytest.raises(ValueError):
        gan_losses([1.0], [0.5], "gan")
    with pytest.raises(ValueError):
        gan_losses([0.5], [0.5], "lsgan")


def _linear_critic(w):
    w = torch.as_tensor(w, dtype=torch.float64)
    return lambda x: x @ w


@pytest.mark.parametrize("w,expected", [([0.6, 0.8, 0.0], 0.0), ([1.2, 1.6, 0.0], 10.0)])
def test_penalty_linear_critic(w, expected):
    gen = torch.Generator().manual_seed(0)
    x_real = torch.randn(16, 3, dtype=torch.float64, generator=gen)
    x_fake = torch.randn(16, 3, dtype=torch.float64, generator=gen)
    gp = gradient_penalty(_linear_critic(w), x_real, x_fake, 10.0, generator=gen)
    assert abs(gp.item() - expected) < 1e-10


def test_penalty_gradients_match_finite_differences():
    torch.manual_seed(3)
    critic = nn.Sequential(nn.Linear(4, 6), nn.Tanh(), nn.Linear(6, 1)).double()
    x_real = torch.randn(5, 4, dtype=torch.float64)
    x_fake = torch.randn(5, 4, dtype=torch.float64)
    eps = torch.rand(5, 1, dtype=torch.float64)

    # input gradient used inside the penalty
    x_hat = (eps * x_real + (1 - eps) * x_fake).requires_grad_(True)
    grad, = torch.autograd.grad(critic(x_hat).sum(), x_hat)
    h = 1e-6
    for i in range(5):
        for j in range(4):
            up, down = x_hat.detach().clone(), x_hat.detach().clone()
            up[i, j] += h
            down[i, j] -= h
            with torch.no_grad():
                fd = (critic(up).sum() - critic(down).sum()).item() / (2 * h)
            assert abs(grad[i, j].item() - fd) <= 1e-4 * max(abs(fd), 1e-3)

    # gradient of the penalty itself w.r.t. a critic weight (double backprop)
    def penalty():
        return gradient_penalty(critic, x_real, x_fake, 10.0, eps=eps)

    w = critic[0].weight
    analytic = torch.autograd.grad(penalty(), w)[0]

    def penalty_at(idx, value):
        with torch.no_grad():
            w[idx] = value
        return penalty().item()

    for idx in [(0, 0), (3, 2), (5, 1)]:
        old = w[idx].item()
        up, down = penalty_at(idx, old + h), penalty_at(idx, old - h)
        penalty_at(idx, old)
        fd = (up - down) / (2 * h)
        assert abs(analytic[idx].item() - fd) <= 1e-4 * max(abs(fd), 1e-3)


def _one_feature_data(n=60, seed=0):
    rng = np.random.default_rng(seed)
    x = np.where(rng.random(n) < 0.5, rng.normal(3, 0.3, n), rng.normal(8, 0.3, n))
    return make_matrix(x[None, :].clip(0), scale="log2p1")


def test_wgan_clip_invariant_every_critic_step():
    data = _one_feature_data()
    worst = []

    def check(module, step):
        worst.append(max(p.abs().max().item() for p in module.critic.parameters()))

    g = fit_generator(data, "wgan", GanConfig(variant="wgan").to_dict(),
                      TrainingPolicy(epochs=50, batch_fraction=0.2, seed=0), on_critic_step=check)
    assert len(worst) == g.training_log[-1]["critic_steps"] > 0
    assert max(worst) <= 0.01


def test_critic_generator_step_ratio():
    data = _one_feature_data(n=50)
    g = fit_generator(data, "wgangp", GanConfig().to_dict(), TrainingPolicy(epochs=4, batch_fraction=0.1, seed=1))
    last = g.training_log[-1]
    assert last["critic_steps"] == 5 * last["generator_steps"]
    # 10 batches per epoch -> 2 generator steps of 5 critic steps each
    assert [r["generator_steps"] for r in g.training_log] == [2, 4, 6, 8]


def test_vanilla_gan_alternates_one_to_one():
    g = fit_generator(_one_feature_data(n=20), "gan", GanConfig(variant="gan").to_dict(),
                      TrainingPolicy(epochs=2, batch_fraction=0.5, seed=0))
    assert g.training_log[-1]["critic_steps"] == g.training_log[-1]["generator_steps"] == 4


def test_wgangp_does_not_collapse():
    for seed in range(5):
        g = fit_generator(_one_feature_data(seed=seed), "wgangp", GanConfig().to_dict(),
                          TrainingPolicy(epochs=30, batch_fraction=0.2, seed=seed))
        out = g.generate(200, seed=seed).counts
        assert out.std() > 0
        assert np.all(np.isfinite(out))


def test_gan_is_unconditional():
    with pytest.raises(ValueError):
        get_family("wgangp").build(GanConfig().to_dict(), 5, 1)


def test_generate_single_sample_reproducible():
    g = fit_generator(_one_feature_data(n=10), "gan", GanConfig(variant="gan").to_dict(), TrainingPolicy(epochs=1))
    one = g.generate(1, seed=3)
    assert one.counts.shape == (1, 1)
    assert one == g.generate(1, seed=3)
