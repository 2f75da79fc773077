"""Offline (pre-training) expansion of a pilot dataset."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .data import LOG2P1, CountMatrix, ScaleError, ValidationError, concat_samples
from .training import (TrainingPolicy, derive_seeds, he_init, make_batches, make_optimizer, mlp, run_epochs,
                       samples_tensor)

METHODS = ("none", "gaussian", "ae")


@dataclass(frozen=True)
class OfflineConfig:
    method: str = "none"
    replicates: int = 9
    noise_sd: float = 0.1
    iterations: int = 2

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(f"unknown offline method {self.method!r}")
        if self.method == "gaussian" and (self.replicates < 1 or not self.noise_sd > 0):
            raise ValidationError("gaussian head needs replicates >= 1 and noise_sd > 0")
        if self.iterations < 0:
            raise ValidationError("iterations must be >= 0")

    @classmethod
    def from_string(cls, spec: str) -> "OfflineConfig":
        """``none``, ``gaussian:R:sigma`` or ``ae:t``."""
        parts = spec.split(":")
        try:
            if parts[0] == "none" and len(parts) == 1:
                return cls("none")
            if parts[0] == "gaussian" and len(parts) <= 3:
                r = int(parts[1]) if len(parts) > 1 else 9
                sd = float(parts[2]) if len(parts) > 2 else 0.1
                return cls("gaussian", replicates=r, noise_sd=sd)
            if parts[0] == "ae" and len(parts) <= 2:
                return cls("ae", iterations=int(parts[1]) if len(parts) > 1 else 2)
        except ValueError:
            pass
        raise ValidationError(f"bad offline augmentation spec {spec!r}")


def _check_scale(m: CountMatrix) -> None:
    if m.scale != LOG2P1:
        raise ScaleError("offline augmentation works on log2p1 data")


def gaussian_head(pilot: CountMatrix, cfg: OfflineConfig, seed: int) -> CountMatrix:
    """Pilot followed by R noisy copies (i.i.d. N(0, sd^2) per entry, clamped at 0)."""
    _check_scale(pilot)
    if cfg.method != "gaussian":
        raise ValidationError("config method is not 'gaussian'")
    rng = np.random.default_rng(seed)
    copies = [pilot]
    for r in range(1, cfg.replicates + 1):
        noisy = np.maximum(0.0, pilot.counts + rng.normal(0.0, cfg.noise_sd, pilot.counts.shape))
        ids = [f"{s}_g{r}" for s in pilot.sample_ids]
        groups = None if pilot.groups is None else dict(zip(ids, pilot.labels))
        copies.append(pilot.replace(sample_ids=ids, counts=noisy, groups=groups))
    return concat_samples(*copies)


class Autoencoder(nn.Module):
    def __init__(self, n_features: int, widths=(256, 128), code_dim: int = 64):
        super().__init__()
        self.encoder = mlp([n_features, *widths, code_dim])
        self.decoder = mlp([code_dim, *widths[::-1], n_features])
        he_init(self)

    def forward(self, x):
        return self.decoder(self.encoder(x))


def train_autoencoder(x: torch.Tensor, policy: TrainingPolicy, seed: int) -> Autoencoder:
    init_seed, batch_seed = derive_seeds(seed, 2)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(init_seed)
        model = Autoencoder(x.shape[1])
    opt = make_optimizer(model.parameters(), policy)
    rng = np.random.default_rng(batch_seed)
    log: list = []

    def epoch(_):
        total = 0.0
        for idx in make_batches(x.shape[0], policy.batch_fraction, rng):
            loss = nn.functional.mse_loss(model(x[idx]), x[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        return {"loss": total / x.shape[0]}

    run_epochs(policy, epoch, "loss", log)
    return model


def ae_head(pilot: CountMatrix, cfg: OfflineConfig, policy: TrainingPolicy, seed: int) -> CountMatrix:
    """Grow the pool t times: train an autoencoder on it, append its reconstructions."""
    _check_scale(pilot)
    if cfg.method != "ae":
        raise ValidationError("config method is not 'ae'")
    if cfg.iterations < 0:
        raise ValidationError("iterations must be >= 0")
    if pilot.n_samples < 2:
        raise ValidationError("AE head needs at least two samples")
    pool = pilot
    for it, it_seed in enumerate(derive_seeds(seed, cfg.iterations), start=1):
        x = samples_tensor(pool)
        model = train_autoencoder(x, policy, it_seed)
        model.eval()
        with torch.no_grad():
            recon = torch.clamp(model(x), min=0.0).double().numpy().T
        ids = [f"{s}_ae{it}" for s in pool.sample_ids]
        groups = None if pool.groups is None else dict(zip(ids, pool.labels))
        pool = concat_samples(pool, pool.replace(sample_ids=ids, counts=recon, groups=groups))
    return pool


def offline_augment(pilot: CountMatrix, cfg: OfflineConfig, policy: TrainingPolicy,
                    seed: int) -> CountMatrix:
    if cfg.method == "gaussian":
        return gaussian_head(pilot, cfg, seed)
    if cfg.method == "ae":
        return ae_head(pilot, cfg, policy, seed)
    _check_scale(pilot)
    return pilot
