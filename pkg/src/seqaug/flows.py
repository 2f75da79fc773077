"""Normalizing flows: RealNVP, GLOW and MAF.

Every layer maps data towards the base space in ``forward`` and returns the
per-sample log |det dz/dx|; ``inverse`` runs the generative direction.
"""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .data import ValidationError
from .training import Family, TrainingPolicy, he_init, make_batches, make_optimizer, register, run_epochs

VARIANTS = ("realnvp", "glow", "maf")
LOG_SCALE_BOUND = 5.0
_LOG_2PI = math.log(2 * math.pi)


@dataclass(frozen=True)
class FlowConfig:
    variant: str = "maf"
    n_blocks: int = 5
    hidden_width: int = 256
    mask_fraction: float = 0.30
    validation_ratio: float = 0.15
    batch_norm_between_blocks: bool = True
    bn_momentum: float = 0.9
    conditional: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown flow variant {self.variant!r}")
        if self.n_blocks < 1 or self.hidden_width < 1:
            raise ValidationError("n_blocks and hidden_width must be >= 1")
        if not 0 < self.validation_ratio < 1:
            raise ValidationError("validation_ratio must lie in (0, 1)")
        if not 0 <= self.mask_fraction < 1:
            raise ValidationError("mask_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


def bounded_log_scale(raw: torch.Tensor) -> torch.Tensor:
    return LOG_SCALE_BOUND * torch.tanh(raw / LOG_SCALE_BOUND)


# ------------------------------------------------------ affine coupling

def coupling_forward(z, log_s, t, mask):
    """Generative coupling step.

    Entries with ``mask == 1`` pass through; the others become
    ``exp(log_s) * z + t``. Returns ``(x, log_det)`` with log_det summed over
    the transformed entries.
    """
    free = 1 - mask
    x = mask * z + free * (z * torch.exp(log_s) + t)
    return x, torch.sum(free * log_s, dim=-1)


def coupling_inverse(x, log_s, t, mask):
    free = 1 - mask
    return mask * x + free * (x - t) * torch.exp(-log_s)


def _conditioner(n_in: int, n_out: int, width: int) -> nn.Sequential:
    net = nn.Sequential(nn.Linear(n_in, width), nn.ReLU(), nn.Linear(width, width), nn.ReLU(),
                        nn.Linear(width, n_out))
    he_init(net)
    # start every block at the identity map
    nn.init.zeros_(net[-1].weight)
    nn.init.zeros_(net[-1].bias)
    return net


class AffineCoupling(nn.Module):
    def __init__(self, mask: torch.Tensor, width: int, n_cond: int = 0):
        super().__init__()
        d = mask.numel()
        self.register_buffer("mask", mask.clone().to(torch.get_default_dtype()))
        self.net = _conditioner(d + n_cond, 2 * d, width)

    def params(self, x_fixed, cond=None):
        h = x_fixed * self.mask
        if cond is not None:
            h = torch.cat([h, cond], dim=1)
        raw_s, t = self.net(h).chunk(2, dim=1)
        free = 1 - self.mask
        return bounded_log_scale(raw_s) * free, t * free

    def forward(self, x, cond=None):
        log_s, t = self.params(x, cond)
        return coupling_inverse(x, log_s, t, self.mask), -torch.sum(log_s, dim=-1)

    def inverse(self, z, cond=None):
        log_s, t = self.params(z, cond)
        return coupling_forward(z, log_s, t, self.mask)[0]


# ------------------------------------------------- normalization layers

class BatchNormFlow(nn.Module):
    """Batch normalization as an invertible layer; running stats at eval time."""

    def __init__(self, d: int, momentum: float = 0.9, eps: float = 1e-5):
        super().__init__()
        self.log_gamma = nn.Parameter(torch.zeros(d))
        self.beta = nn.Parameter(torch.zeros(d))
        self.momentum = momentum
        self.eps = eps
        self.register_buffer("running_mean", torch.zeros(d))
        self.register_buffer("running_var", torch.ones(d))

    def _stats(self, x):
        if self.training:
            mean = x.mean(0)
            var = (x - mean).pow(2).mean(0) + self.eps
            with torch.no_grad():
                self.running_mean.mul_(self.momentum).add_((1 - self.momentum) * mean)
                self.running_var.mul_(self.momentum).add_((1 - self.momentum) * var)
            self._batch = (mean, var)
            return mean, var
        return self.running_mean, self.running_var

    def forward(self, x, cond=None):
        mean, var = self._stats(x)
        y = (x - mean) / var.sqrt() * torch.exp(self.log_gamma) + self.beta
        log_det = torch.sum(self.log_gamma - 0.5 * torch.log(var)).expand(x.shape[0])
        return y, log_det

    def inverse(self, z, cond=None):
        mean, var = self._batch if self.training else (self.running_mean, self.running_var)
        return (z - self.beta) * torch.exp(-self.log_gamma) * var.sqrt() + mean


class ActNorm(nn.Module):
    """Per-dimension affine map, initialized from the first batch it sees."""

    def __init__(self, d: int):
        super().__init__()
        self.loc = nn.Parameter(torch.zeros(d))
        self.log_scale = nn.Parameter(torch.zeros(d))
        self.register_buffer("initialized", torch.tensor(0, dtype=torch.uint8))

    def initialize(self, x):
        with torch.no_grad():
            self.loc.copy_(x.mean(0))
            std = x.std(0, unbiased=False)
            self.log_scale.copy_(torch.log(torch.clamp(std, min=1e-6)))
            self.initialized.fill_(1)

    def forward(self, x, cond=None):
        if not self.initialized:
            self.initialize(x)
        y = (x - self.loc) * torch.exp(-self.log_scale)
        return y, (-self.log_scale.sum()).expand(x.shape[0])

    def inverse(self, z, cond=None):
        return z * torch.exp(self.log_scale) + self.loc


class InvertibleLinear(nn.Module):
    """Full D x D mixing matrix, the tabular stand-in for a 1x1 convolution."""

    def __init__(self, d: int):
        super().__init__()
        q, r = torch.linalg.qr(torch.randn(d, d))
        q = q * torch.sign(torch.diagonal(r)).unsqueeze(0)
        self.weight = nn.Parameter(q)

    def log_abs_det(self):
        sign, logabs = torch.linalg.slogdet(self.weight)
        if sign == 0 or logabs.item() < math.log(1e-12):
            raise FloatingPointError("mixing matrix is singular; reinitialize the layer")
        return logabs

    def forward(self, x, cond=None):
        return x @ self.weight.T, self.log_abs_det().expand(x.shape[0])

    def inverse(self, z, cond=None):
        return torch.linalg.solve(self.weight, z.T).T


class Reverse(nn.Module):
    def forward(self, x, cond=None):
        return x.flip(1), x.new_zeros(x.shape[0])

    def inverse(self, z, cond=None):
        return z.flip(1)


def actnorm_and_mix(actnorm: ActNorm, mix: InvertibleLinear, x):
    """GLOW's actnorm followed by the invertible mixing map."""
    y, ld1 = actnorm(x)
    y, ld2 = mix(y)
    return y, ld1 + ld2


# ------------------------------------------------------------------ MAF

def made_degrees(d: int, width: int):
    inp = torch.arange(1, d + 1)
    hidden = torch.arange(width) % (d - 1) + 1 if d > 1 else torch.zeros(width, dtype=torch.long)
    return inp, hidden


class MaskedLinear(nn.Linear):
    def __init__(self, n_in: int, n_out: int, mask: torch.Tensor):
        super().__init__(n_in, n_out)
        self.register_buffer("mask", mask.to(torch.get_default_dtype()))

    def forward(self, x):
        return nn.functional.linear(x, self.weight * self.mask, self.bias)


class MADE(nn.Module):
    """Masked autoregressive affine layer: (log s_i, t_i) depend on x_{<i} only.

    Beyond the autoregressive masks, a fixed random share ``mask_fraction`` of
    the hidden-to-hidden connections is switched off.
    """

    def __init__(self, d: int, width: int, n_cond: int = 0, mask_fraction: float = 0.3):
        super().__init__()
        deg_in, deg_h = made_degrees(d, width)
        in_mask = (deg_h.unsqueeze(1) >= deg_in.unsqueeze(0))
        hid_mask = (deg_h.unsqueeze(1) >= deg_h.unsqueeze(0))
        if mask_fraction > 0:
            hid_mask &= torch.rand(width, width) >= mask_fraction
        out_mask = (deg_in.unsqueeze(1) > deg_h.unsqueeze(0)).repeat(2, 1)
        self.inp = MaskedLinear(d, width, in_mask)
        self.cond = nn.Linear(n_cond, width, bias=False) if n_cond else None
        self.hidden = MaskedLinear(width, width, hid_mask)
        self.out = MaskedLinear(width, 2 * d, out_mask)
        he_init(self)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def params(self, x, cond=None):
        h = self.inp(x)
        if self.cond is not None:
            h = h + self.cond(cond)
        h = self.hidden(torch.relu(h))
        raw_s, t = self.out(torch.relu(h)).chunk(2, dim=1)
        return bounded_log_scale(raw_s), t

    def forward(self, x, cond=None):
        log_s, t = self.params(x, cond)
        return (x - t) * torch.exp(-log_s), -torch.sum(log_s, dim=-1)

    def inverse(self, z, cond=None):
        x = torch.zeros_like(z)
        for i in range(z.shape[1]):
            log_s, t = self.params(x, cond)
            x = x.clone()
            x[:, i] = z[:, i] * torch.exp(log_s[:, i]) + t[:, i]
        return x


def maf_transform(made: MADE, x, cond=None):
    return made(x, cond)


# ----------------------------------------------------------- the model

class FlowModel(nn.Module):
    def __init__(self, n_features: int, cfg: FlowConfig, n_cond: int = 0):
        super().__init__()
        d = n_features
        layers: list[nn.Module] = []
        for k in range(cfg.n_blocks):
            if cfg.variant == "realnvp":
                mask = (torch.arange(d) + k) % 2 == 0
                layers.append(AffineCoupling(mask, cfg.hidden_width, n_cond))
            elif cfg.variant == "glow":
                layers.append(ActNorm(d))
                layers.append(InvertibleLinear(d))
                layers.append(AffineCoupling(torch.arange(d) < d // 2, cfg.hidden_width, n_cond))
            else:
                layers.append(MADE(d, cfg.hidden_width, n_cond, cfg.mask_fraction))
            if cfg.batch_norm_between_blocks:
                layers.append(BatchNormFlow(d, cfg.bn_momentum))
            if cfg.variant == "maf":
                layers.append(Reverse())
        self.layers = nn.ModuleList(layers)
        self.n_features = d

    def forward(self, x, cond=None):
        log_det = x.new_zeros(x.shape[0])
        for layer in self.layers:
            x, ld = layer(x, cond)
            log_det = log_det + ld
        return x, log_det

    def inverse(self, z, cond=None):
        for layer in reversed(self.layers):
            z = layer.inverse(z, cond)
        return z

    def log_prob(self, x, cond=None):
        z, log_det = self(x, cond)
        base = -0.5 * (z ** 2).sum(1) - 0.5 * z.shape[1] * _LOG_2PI
        return base + log_det


def flow_log_prob(model: FlowModel, x, cond=None):
    return model.log_prob(x, cond)


def split_validation(n: int, ratio: float, rng) -> tuple[np.ndarray, np.ndarray]:
    """(train, validation) index arrays; validation size is round(ratio * n)."""
    n_val = int(round(ratio * n))
    if n_val < 2 or n - n_val < 2:
        raise ValidationError(
            f"{n} samples are too few for a {ratio:.2f} validation split (need >= 2 in each part)")
    perm = rng.permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _build(config: dict, n_features: int, n_cond: int) -> FlowModel:
    return FlowModel(n_features, FlowConfig(**config), n_cond)


def _sample(module: FlowModel, n: int, cond, gen, config) -> torch.Tensor:
    z = torch.randn(n, module.n_features, generator=gen)
    return module.inverse(z, cond)


def _train(module: FlowModel, x, cond, config: dict, policy: TrainingPolicy, log: list, rng) -> None:
    cfg = FlowConfig(**config)
    tr, va = split_validation(x.shape[0], cfg.validation_ratio, rng)
    x_tr, x_va = x[tr], x[va]
    c_tr = None if cond is None else cond[tr]
    c_va = None if cond is None else cond[va]
    opt = make_optimizer(module.parameters(), policy)
    best = {}

    def epoch(_):
        module.train()
        total = 0.0
        for idx in make_batches(len(tr), policy.batch_fraction, rng):
            if len(idx) < 2 and cfg.batch_norm_between_blocks:
                continue  # batch statistics need two rows
            nll = -module.log_prob(x_tr[idx], None if c_tr is None else c_tr[idx]).mean()
            opt.zero_grad()
            nll.backward()
            opt.step()
            total += nll.item() * len(idx)
        module.eval()
        with torch.no_grad():
            val = -module.log_prob(x_va, c_va).mean().item()
        return {"train_nll": total / len(tr), "val_nll": val}

    def snapshot():
        best["state"] = copy.deepcopy(module.state_dict())

    run_epochs(policy, epoch, "val_nll", log, on_improve=snapshot)
    if "state" in best:
        module.load_state_dict(best["state"])


for _variant in VARIANTS:
    register(_variant, Family(_build, _sample, _train))
