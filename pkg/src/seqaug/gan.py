"""GAN, WGAN (weight clipping) and WGAN-GP generators."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
import torch
from torch import nn

from .data import ValidationError
from .training import (Family, TrainingPolicy, batch_size_for, he_init, make_batches, make_optimizer, mlp,
                       register, run_epochs)

VARIANTS = ("gan", "wgan", "wgangp")
_PROB_EPS = 1e-7


@dataclass(frozen=True)
class GanConfig:
    variant: str = "wgangp"
    noise_dim: int = 32
    generator_widths: tuple = (128, 256)
    discriminator_widths: tuple = (256, 128)
    n_critic: int | None = None
    clip_c: float = 0.01
    lambda_gp: float = 10.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown GAN variant {self.variant!r}")
        object.__setattr__(self, "generator_widths", tuple(self.generator_widths))
        object.__setattr__(self, "discriminator_widths", tuple(self.discriminator_widths))
        if self.n_critic is None:
            object.__setattr__(self, "n_critic", 1 if self.variant == "gan" else 5)
        if self.n_critic < 1:
            raise ValidationError("n_critic must be >= 1")
        if not self.clip_c > 0:
            raise ValidationError("clip_c must be positive")
        if self.lambda_gp < 0:
            raise ValidationError("lambda_gp must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["generator_widths"] = list(self.generator_widths)
        d["discriminator_widths"] = list(self.discriminator_widths)
        return d


def gan_losses(d_real, d_fake, variant: str):
    """(discriminator loss, generator loss) from discriminator outputs.

    For ``gan`` the outputs are probabilities and the generator uses the
    non-saturating loss -E log D(G(z)); for the Wasserstein variants they are
    raw critic scores.
    """
    as_numpy = not isinstance(d_real, torch.Tensor)
    if as_numpy:
        d_real = torch.as_tensor(np.asarray(d_real, dtype=float))
        d_fake = torch.as_tensor(np.asarray(d_fake, dtype=float))
    if variant == "gan":
        for d in (d_real, d_fake):
            if torch.any(d <= 0) or torch.any(d >= 1):
                raise ValueError("GAN discriminator outputs must lie in (0, 1)")
        loss_d = -torch.log(d_real).mean() - torch.log1p(-d_fake).mean()
        loss_g = -torch.log(d_fake).mean()
    elif variant in ("wgan", "wgangp"):
        loss_d = d_fake.mean() - d_real.mean()
        loss_g = -d_fake.mean()
    else:
        raise ValueError(f"unknown GAN variant {variant!r}")
    if as_numpy:
        return float(loss_d), float(loss_g)
    return loss_d, loss_g


def gradient_penalty(critic: Callable, x_real: torch.Tensor, x_fake: torch.Tensor,
                     lambda_gp: float = 10.0, generator: torch.Generator | None = None,
                     eps: torch.Tensor | None = None) -> torch.Tensor:
    """lambda * mean((||grad critic(x_hat)||_2 - 1)^2) on real/fake interpolates.

    The interpolation weight is Uniform(0, 1) per sample unless ``eps`` is given.
    """
    if x_real.shape != x_fake.shape:
        raise ValueError("real and fake batches must have the same shape")
    if eps is None:
        eps = torch.rand(x_real.shape[0], 1, generator=generator, dtype=x_real.dtype)
    x_hat = (eps * x_real + (1 - eps) * x_fake).detach().requires_grad_(True)
    out = critic(x_hat)
    grad, = torch.autograd.grad(out.sum(), x_hat, create_graph=True)
    norm = grad.flatten(1).norm(2, dim=1)
    return lambda_gp * ((norm - 1.0) ** 2).mean()


class GAN(nn.Module):
    def __init__(self, n_features: int, cfg: GanConfig):
        super().__init__()
        self.noise_dim = cfg.noise_dim
        self.generator = mlp([cfg.noise_dim, *cfg.generator_widths, n_features])
        self.critic = mlp([n_features, *cfg.discriminator_widths, 1])
        he_init(self)

    def d_out(self, x, variant: str) -> torch.Tensor:
        """Discriminator probability for ``gan``, raw critic score otherwise."""
        score = self.critic(x).squeeze(1)
        if variant == "gan":
            return torch.sigmoid(score).clamp(_PROB_EPS, 1 - _PROB_EPS)
        return score


def _build(config: dict, n_features: int, n_cond: int) -> GAN:
    if n_cond:
        raise ValidationError("GAN generators are unconditional")
    return GAN(n_features, GanConfig(**config))


def _sample(module: GAN, n: int, cond, gen, config) -> torch.Tensor:
    return module.generator(torch.randn(n, module.noise_dim, generator=gen))


def _start_at_mean(module: GAN, x: torch.Tensor) -> None:
    with torch.no_grad():
        module.generator[-1].bias.copy_(x.mean(dim=0))


def _batch_stream(n, fraction, rng):
    while True:
        yield from make_batches(n, fraction, rng)


def _train(module: GAN, x, cond, config: dict, policy: TrainingPolicy, log: list, rng,
           on_critic_step: Callable | None = None) -> None:
    cfg = GanConfig(**config)
    variant = cfg.variant
    opt_d = make_optimizer(module.critic.parameters(), policy)
    opt_g = make_optimizer(module.generator.parameters(), policy)
    n = x.shape[0]
    bsz = batch_size_for(n, policy.batch_fraction)
    n_batches = math.ceil(n / bsz)
    g_iters = max(1, math.ceil(n_batches / cfg.n_critic))
    stream = _batch_stream(n, policy.batch_fraction, rng)
    counts = {"critic": 0, "generator": 0}

    def epoch(_):
        module.train()
        loss_d_sum = loss_g_sum = w_sum = 0.0
        for _ in range(g_iters):
            for _ in range(cfg.n_critic):
                xb = x[next(stream)]
                fake = module.generator(torch.randn(len(xb), cfg.noise_dim)).detach()
                d_real, d_fake = module.d_out(xb, variant), module.d_out(fake, variant)
                loss_d, _ = gan_losses(d_real, d_fake, variant)
                if variant == "wgangp":
                    loss_d = loss_d + gradient_penalty(module.critic, xb, fake, cfg.lambda_gp)
                opt_d.zero_grad()
                loss_d.backward()
                opt_d.step()
                if variant == "wgan":
                    with torch.no_grad():
                        for p in module.critic.parameters():
                            p.clamp_(-cfg.clip_c, cfg.clip_c)
                counts["critic"] += 1
                if on_critic_step is not None:
                    on_critic_step(module, counts["critic"])
                loss_d_sum += loss_d.item()
                w_sum += (d_real.mean() - d_fake.mean()).item()
            fake = module.generator(torch.randn(bsz, cfg.noise_dim))
            d_gen = module.d_out(fake, variant)
            _, loss_g = gan_losses(d_gen, d_gen, variant)
            opt_g.zero_grad()
            loss_g.backward()
            opt_g.step()
            counts["generator"] += 1
            loss_g_sum += loss_g.item()
        n_d = g_iters * cfg.n_critic
        return {"loss_d": loss_d_sum / n_d, "loss_g": loss_g_sum / g_iters,
                "w_distance": w_sum / n_d, "critic_steps": counts["critic"],
                "generator_steps": counts["generator"]}

    run_epochs(policy, epoch, "loss_g" if variant == "gan" else "w_distance", log)


for _variant in VARIANTS:
    register(_variant, Family(_build, _sample, _train, data_init=_start_at_mean))
