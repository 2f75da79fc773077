"""Variational and conditional variational autoencoders."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

from .data import ValidationError
from .training import Family, TrainingPolicy, he_init, make_batches, make_optimizer, mlp, register, run_epochs


@dataclass(frozen=True)
class VaeConfig:
    encoder_widths: tuple = (256, 128, 64)
    latent_dim: int = 32
    w_rec: float = 1.0
    w_kl: float = 1.0
    mc_samples: int = 1
    conditional: bool = False

    def __post_init__(self):
        object.__setattr__(self, "encoder_widths", tuple(int(w) for w in self.encoder_widths))
        if self.latent_dim < 1 or any(w < 1 for w in self.encoder_widths):
            raise ValidationError("layer widths must be positive")
        if not (self.w_rec > 0 and self.w_kl > 0):
            raise ValidationError("loss weights must be positive")
        if self.mc_samples < 1:
            raise ValidationError("mc_samples must be >= 1")

    @classmethod
    def from_ratio(cls, ratio: str, conditional: bool = False, **kwargs) -> "VaeConfig":
        """``"1-10"`` means reconstruction weight 1, KL weight 10."""
        rec, _, kl = ratio.partition("-")
        return cls(w_rec=float(rec), w_kl=float(kl), conditional=conditional, **kwargs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        return d


def kl_gaussian(mu, log_var):
    """KL(N(mu, diag(exp(log_var))) || N(0, I)), summed over the last axis."""
    if not isinstance(mu, torch.Tensor):
        mu_t = torch.as_tensor(np.asarray(mu, dtype=float))
        lv_t = torch.as_tensor(np.asarray(log_var, dtype=float))
        out = kl_gaussian(mu_t, lv_t).numpy()
        return float(out) if out.ndim == 0 else out
    # expm1 keeps exp(v) - 1 - v from going slightly negative near v = 0
    return 0.5 * torch.sum(torch.expm1(log_var) - log_var + mu ** 2, dim=-1)


def reparameterize(mu, log_var, eps):
    if isinstance(mu, torch.Tensor):
        return mu + torch.exp(0.5 * log_var) * eps
    return np.asarray(mu) + np.exp(0.5 * np.asarray(log_var)) * np.asarray(eps)


class VaeLossParts(NamedTuple):
    recon: torch.Tensor
    kl: torch.Tensor
    total: torch.Tensor


def assemble_loss(recon, kl, w_rec: float, w_kl: float) -> VaeLossParts:
    return VaeLossParts(recon, kl, w_rec * recon + w_kl * kl)


class VAE(nn.Module):
    def __init__(self, n_features: int, cfg: VaeConfig, n_cond: int = 0):
        super().__init__()
        self.n_cond = n_cond
        widths = list(cfg.encoder_widths)
        self.encoder = mlp([n_features + n_cond, *widths], final_activation=nn.ReLU())
        self.mu = nn.Linear(widths[-1], cfg.latent_dim)
        self.log_var = nn.Linear(widths[-1], cfg.latent_dim)
        self.decoder = mlp([cfg.latent_dim + n_cond, *widths[::-1], n_features])
        self.latent_dim = cfg.latent_dim
        he_init(self)
        # He-scaled heads on unstandardized log counts give exp(log_var) in the
        # millions on the first step
        for head in (self.mu, self.log_var):
            nn.init.xavier_normal_(head.weight, gain=0.1)

    def _join(self, x, cond):
        return x if cond is None else torch.cat([x, cond], dim=1)

    def encode(self, x, cond=None):
        h = self.encoder(self._join(x, cond))
        return self.mu(h), self.log_var(h)

    def decode(self, z, cond=None):
        return self.decoder(self._join(z, cond))

    def loss(self, x, cond, eps, w_rec: float, w_kl: float) -> VaeLossParts:
        """Batch-averaged loss; ``eps`` has shape (M, batch, latent_dim)."""
        mu, log_var = self.encode(x, cond)
        recon = 0.0
        for e in eps:
            x_hat = self.decode(reparameterize(mu, log_var, e), cond)
            recon = recon + torch.sum((x - x_hat) ** 2, dim=1).mean()
        recon = recon / len(eps)
        kl = kl_gaussian(mu, log_var).mean()
        return assemble_loss(recon, kl, w_rec, w_kl)


def _start_at_mean(module: VAE, x: torch.Tensor) -> None:
    """Decoder output bias = per-feature training mean."""
    with torch.no_grad():
        module.decoder[-1].bias.copy_(x.mean(dim=0))


def _build(config: dict, n_features: int, n_cond: int) -> VAE:
    return VAE(n_features, VaeConfig(**config), n_cond)


def _sample(module: VAE, n: int, cond, gen, config) -> torch.Tensor:
    z = torch.randn(n, module.latent_dim, generator=gen)
    return module.decode(z, cond)


def _train(module: VAE, x, cond, config: dict, policy: TrainingPolicy, log: list, rng) -> None:
    cfg = VaeConfig(**config)
    opt = make_optimizer(module.parameters(), policy)
    n = x.shape[0]

    def epoch(_):
        module.train()
        sums = np.zeros(3)
        for idx in make_batches(n, policy.batch_fraction, rng):
            xb = x[idx]
            cb = None if cond is None else cond[idx]
            eps = torch.randn(cfg.mc_samples, len(idx), module.latent_dim)
            parts = module.loss(xb, cb, eps, cfg.w_rec, cfg.w_kl)
            opt.zero_grad()
            parts.total.backward()
            opt.step()
            sums += len(idx) * np.array([p.item() for p in parts])
        recon, kl, total = sums / n
        return {"loss": float(total), "recon": float(recon), "kl": float(kl)}

    run_epochs(policy, epoch, "loss", log)


register("vae", Family(_build, _sample, _train, data_init=_start_at_mean))
register("cvae", Family(_build, _sample, _train, conditional=True, data_init=_start_at_mean))
