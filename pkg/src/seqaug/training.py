"""Shared machinery for the generative models: training policy, batching,
early stopping, the trained-generator container and its on-disk format."""
from __future__ import annotations

import io
import json
import logging
import math
import zipfile
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .data import LOG2P1, CountMatrix, ValidationError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
FAMILIES = ("vae", "cvae", "gan", "wgan", "wgangp", "realnvp", "glow", "maf")


class CorruptModelError(ValueError):
    pass


class ModelVersionError(ValueError):
    pass


@dataclass(frozen=True)
class TrainingPolicy:
    """How long and how to train.

    ``epochs`` is the fixed epoch count; with ``early_stop`` it is ignored and
    training runs until the monitored loss stalls for ``patience`` epochs or
    ``max_epochs`` is reached.
    """

    epochs: int = 1000
    early_stop: bool = False
    patience: int = 30
    max_epochs: int = 5000
    batch_fraction: float = 0.1
    learning_rate: float = 0.0005
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.batch_fraction <= 1:
            raise ValidationError("batch_fraction must lie in (0, 1]")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be positive")
        if self.epochs < 0 or self.max_epochs < 1 or self.patience < 1:
            raise ValidationError("epoch settings must be positive")
        object.__setattr__(self, "betas", tuple(self.betas))

    @property
    def epoch_budget(self) -> int:
        return self.max_epochs if self.early_stop else self.epochs

    @classmethod
    def from_string(cls, spec: str, **kwargs) -> "TrainingPolicy":
        """Parse ``fixed:1000`` or ``early`` / ``early:30``."""
        kind, _, arg = spec.partition(":")
        if kind == "fixed":
            return cls(epochs=int(arg), early_stop=False, **kwargs)
        if kind == "early":
            if arg:
                kwargs["patience"] = int(arg)
            return cls(early_stop=True, **kwargs)
        raise ValidationError(f"bad epoch strategy {spec!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def early_stopper(losses: Sequence[float], patience: int = 30) -> int:
    """1-based epoch at which training stops.

    Improvement means a strict decrease below the best loss so far; the stop
    fires once ``patience`` epochs have passed without one. Returns
    ``len(losses)`` when the rule never fires.
    """
    if len(losses) == 0:
        raise ValueError("empty loss sequence")
    if not np.all(np.isfinite(losses)):
        raise ValueError("losses must be finite")
    stopper = EarlyStopping(patience)
    for epoch, loss in enumerate(losses, start=1):
        if stopper.update(loss):
            return epoch
    return len(losses)


class EarlyStopping:
    def __init__(self, patience: int = 30):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.epoch = 0

    def update(self, loss: float) -> bool:
        """Record one epoch's loss; True means stop now."""
        if math.isnan(loss):
            raise ValueError(f"NaN loss at epoch {self.epoch + 1}")
        self.epoch += 1
        if loss < self.best:
            self.best, self.best_epoch = loss, self.epoch
            return False
        return self.epoch - self.best_epoch >= self.patience


def batch_size_for(n: int, fraction: float) -> int:
    return max(1, int(round(fraction * n)))


def make_batches(n: int, fraction: float, rng) -> list[np.ndarray]:
    """One epoch of shuffled index batches; the last one may be short."""
    if n < 1:
        raise ValueError("n must be positive")
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    size = batch_size_for(n, fraction)
    perm = rng.permutation(n)
    return [perm[i:i + size] for i in range(0, n, size)]


def derive_seeds(seed: int, k: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(k)]


def he_init(module: nn.Module) -> None:
    """Kaiming-normal weights, zero biases, for every Linear layer."""
    for layer in module.modules():
        if isinstance(layer, nn.Linear):
            nn.init.kaiming_normal_(layer.weight, nonlinearity="relu")
            if layer.bias is not None:
                nn.init.zeros_(layer.bias)


def mlp(widths: Sequence[int], final_activation: nn.Module | None = None) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i in range(len(widths) - 1):
        layers.append(nn.Linear(widths[i], widths[i + 1]))
        if i < len(widths) - 2:
            layers.append(nn.ReLU())
    if final_activation is not None:
        layers.append(final_activation)
    return nn.Sequential(*layers)


def make_optimizer(params, policy: TrainingPolicy) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=policy.learning_rate, betas=policy.betas,
                            eps=policy.eps)


# ----------------------------------------------------- label conditioning

def encode_labels(labels: Sequence[str], levels: Sequence[str]) -> torch.Tensor:
    """Two levels use a single 0/1 node, more levels a one-hot block."""
    index = {g: i for i, g in enumerate(levels)}
    try:
        idx = torch.tensor([index[str(g)] for g in labels], dtype=torch.long)
    except KeyError as exc:
        raise ValidationError(f"unknown group label {exc.args[0]!r}") from None
    if len(levels) == 2:
        return idx.to(torch.get_default_dtype()).unsqueeze(1)
    return nn.functional.one_hot(idx, len(levels)).to(torch.get_default_dtype())


def cond_width(levels: Sequence[str]) -> int:
    if not levels:
        return 0
    return 1 if len(levels) == 2 else len(levels)


def samples_tensor(m: CountMatrix) -> torch.Tensor:
    """Samples x features float tensor from a log2p1 matrix."""
    if m.scale != LOG2P1:
        raise ValidationError("generators are trained on log2p1 data")
    return torch.tensor(np.array(m.counts.T, order="C"), dtype=torch.get_default_dtype())


# ------------------------------------------------------- family registry

@dataclass
class Family:
    build: Callable      # (config, n_features, n_cond) -> nn.Module
    sample: Callable     # (module, n, cond, generator, config) -> tensor
    train: Callable      # (module, data, cond, config, policy, log) -> None
    conditional: bool = False
    data_init: Callable | None = None   # (module, data) -> None, fresh modules only


_REGISTRY: dict[str, Family] = {}


def register(name: str, family: Family) -> None:
    _REGISTRY[name] = family


def get_family(name: str) -> Family:
    if name not in _REGISTRY:
        raise ModelVersionError(f"unknown model family {name!r}")
    return _REGISTRY[name]


@dataclass
class TrainedGenerator:
    """A trained generative model plus what is needed to rebuild it."""

    family: str
    config: dict
    module: nn.Module
    marker_ids: tuple
    group_levels: list = field(default_factory=list)
    training_log: list = field(default_factory=list)
    policy: dict = field(default_factory=dict)

    @property
    def feature_count(self) -> int:
        return len(self.marker_ids)

    @property
    def conditional(self) -> bool:
        return bool(self.group_levels)

    @property
    def weights(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.module.state_dict().items()}

    def generate(self, n: int, labels: Sequence[str] | None = None, seed: int = 0) -> CountMatrix:
        """Draw ``n`` samples on the log2p1 scale, clamped at zero."""
        if n < 0:
            raise ValueError("n must be non-negative")
        if self.conditional:
            if labels is None or len(labels) != n:
                raise ValidationError("conditional generator needs one label per sample")
            cond = encode_labels(labels, self.group_levels)
        else:
            if labels is not None:
                raise ValidationError("labels given to an unconditional generator")
            cond = None
        ids = [f"gen{i + 1:05d}" for i in range(n)]
        if n == 0:
            return CountMatrix(self.marker_ids, [], np.zeros((self.feature_count, 0)),
                               LOG2P1, {} if self.conditional else None)
        gen = torch.Generator().manual_seed(int(seed))
        self.module.eval()
        with torch.no_grad():
            x = get_family(self.family).sample(self.module, n, cond, gen, self.config)
        x = torch.clamp(x, min=0.0).double().numpy()
        if not np.all(np.isfinite(x)):
            raise FloatingPointError("generator produced non-finite values")
        groups = dict(zip(ids, map(str, labels))) if self.conditional else None
        return CountMatrix(self.marker_ids, ids, x.T, LOG2P1, groups)

    def generate_per_group(self, n_per_group: int, seed: int = 0) -> CountMatrix:
        labels = [g for g in self.group_levels for _ in range(n_per_group)]
        return self.generate(len(labels), labels, seed)


def _new_module(family: str, config: dict, n_features: int, levels, seed: int) -> nn.Module:
    fam = get_family(family)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        module = fam.build(config, n_features, cond_width(levels))
    return module


def fit_generator(data: CountMatrix, family: str, config: dict, policy: TrainingPolicy,
                  init: TrainedGenerator | None = None, **train_kwargs) -> TrainedGenerator:
    """Train a model of ``family`` on log2p1 ``data``.

    With ``init`` the weights of that generator are the starting point and its
    log is extended (used for fine-tuning).
    """
    fam = get_family(family)
    if data.n_samples < 2:
        raise ValidationError("need at least two samples to train")
    conditional = fam.conditional or bool((init.config if init else config).get("conditional"))
    levels = data.group_levels if conditional else []
    if conditional:
        if data.groups is None:
            raise ValidationError(f"{family} needs group labels")
        if len(levels) < 2:
            raise ValidationError(f"{family} needs at least two groups")
    x = samples_tensor(data)
    cond = encode_labels(data.labels, levels) if conditional else None
    init_seed, train_seed = derive_seeds(policy.seed, 2)
    if init is not None:
        if init.family != family or tuple(init.marker_ids) != tuple(data.marker_ids):
            raise ValidationError("initial generator does not match family/markers")
        if list(init.group_levels) != list(levels):
            raise ValidationError("initial generator was trained on different groups")
        module = _new_module(family, init.config, data.n_markers, levels, init_seed)
        module.load_state_dict(init.module.state_dict())
        log = [dict(r) for r in init.training_log]
        config = dict(init.config)
    else:
        module = _new_module(family, config, data.n_markers, levels, init_seed)
        if fam.data_init is not None:
            fam.data_init(module, x)
        log = []
    phase = 1 + max((r.get("phase", 1) for r in log), default=0)
    phase_log: list[dict] = []
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(train_seed)
        fam.train(module, x, cond, config, policy, phase_log, np.random.default_rng(train_seed),
                  **train_kwargs)
    for r in phase_log:
        r["phase"] = phase
    return TrainedGenerator(family, dict(config), module, tuple(data.marker_ids),
                            list(levels), log + phase_log, policy.to_dict())


def run_epochs(policy: TrainingPolicy, epoch_fn: Callable[[int], dict], monitor: str,
               log: list, on_improve: Callable[[], None] | None = None) -> None:
    """Drive ``epoch_fn`` under the policy; ``monitor`` names the stopping loss."""
    stopper = EarlyStopping(policy.patience)
    for epoch in range(1, policy.epoch_budget + 1):
        record = epoch_fn(epoch)
        record["epoch"] = epoch
        log.append(record)
        value = record[monitor]
        improved = value < stopper.best
        stop = stopper.update(value)
        if improved and on_improve is not None:
            on_improve()
        if policy.early_stop and stop:
            logger.info("early stop at epoch %d (best %d)", epoch, stopper.best_epoch)
            break


def pretrain_finetune(pretrain_data: CountMatrix, pilot: CountMatrix, family: str,
                      config: dict, policy: TrainingPolicy,
                      pretrain_policy: TrainingPolicy | None = None) -> TrainedGenerator:
    """Train on a large related dataset, then continue on the pilot."""
    if tuple(pretrain_data.marker_ids) != tuple(pilot.marker_ids):
        raise ValidationError("pre-training and pilot data must share markers in the same order")
    if pretrain_policy is None:
        pretrain_policy = TrainingPolicy(epochs=1000, batch_fraction=0.1,
                                         learning_rate=0.0005, seed=policy.seed)
    base = fit_generator(pretrain_data, family, config, pretrain_policy)
    return fit_generator(pilot, family, config, policy, init=base)


# ----------------------------------------------------------- persistence

_FIXED_DATE = (1980, 1, 1, 0, 0, 0)


def _zip_write(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_FIXED_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def save_generator(g: TrainedGenerator, path) -> None:
    """Write a zip of ``.npy`` arrays plus a JSON header; byte-stable for equal inputs."""
    meta = {
        "format_version": FORMAT_VERSION,
        "family": g.family,
        "config": g.config,
        "marker_ids": list(g.marker_ids),
        "group_levels": list(g.group_levels),
        "training_log": g.training_log,
        "policy": g.policy,
    }
    state = g.module.state_dict()
    with zipfile.ZipFile(path, "w") as zf:
        _zip_write(zf, "meta.json", json.dumps(meta, sort_keys=True).encode())
        for name in sorted(state):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, state[name].detach().cpu().numpy(), allow_pickle=False)
            _zip_write(zf, f"arrays/{name}.npy", buf.getvalue())


def load_generator(path) -> TrainedGenerator:
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            arrays = {}
            for name in zf.namelist():
                if name.startswith("arrays/"):
                    buf = io.BytesIO(zf.read(name))
                    arrays[name[len("arrays/"):-len(".npy")]] = np.lib.format.read_array(
                        buf, allow_pickle=False)
    except (zipfile.BadZipFile, KeyError, EOFError, json.JSONDecodeError, ValueError,
            zlib.error) as exc:
        raise CorruptModelError(f"{path}: corrupt generator file ({exc})") from None
    if meta.get("format_version") != FORMAT_VERSION:
        raise ModelVersionError(f"{path}: unsupported format version {meta.get('format_version')}")
    family = meta.get("family")
    if family not in FAMILIES:
        raise ModelVersionError(f"{path}: unknown model family {family!r}")
    levels = meta["group_levels"]
    module = _new_module(family, meta["config"], len(meta["marker_ids"]), levels, 0)
    state = {k: torch.from_numpy(v.copy()) for k, v in arrays.items()}
    try:
        module.load_state_dict(state)
    except RuntimeError as exc:
        raise CorruptModelError(f"{path}: weights do not match architecture ({exc})") from None
    return TrainedGenerator(family, meta["config"], module, tuple(meta["marker_ids"]),
                            levels, meta["training_log"], meta["policy"])
