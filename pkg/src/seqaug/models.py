"""Model spec strings (``vae:1-10``, ``cvae:1-100``, ``wgangp``, ``maf`` ...)."""
from __future__ import annotations

from .data import ValidationError
from .flows import FlowConfig
from .gan import GanConfig
from .vae import VaeConfig

FLOW_FAMILIES = ("realnvp", "glow", "maf")
GAN_FAMILIES = ("gan", "wgan", "wgangp")
DEFAULT_EPOCHS = {**{f: 200 for f in FLOW_FAMILIES}, **{f: 1000 for f in ("vae", "cvae", *GAN_FAMILIES)}}


def parse_model_spec(spec: str, conditional: bool = False) -> tuple[str, dict]:
    """Family name and config dict for a model spec.

    ``conditional`` requests label conditioning for flows; VAE specs pick it
    from the family (``cvae``).
    """
    family, _, arg = spec.partition(":")
    if family in ("vae", "cvae"):
        return family, VaeConfig.from_ratio(arg or "1-1", conditional=family == "cvae").to_dict()
    if family in GAN_FAMILIES:
        if arg or conditional:
            raise ValidationError(f"{family} takes no options and cannot be conditional")
        return family, GanConfig(variant=family).to_dict()
    if family in FLOW_FAMILIES:
        if arg:
            raise ValidationError(f"{family} takes no options")
        return family, FlowConfig(variant=family, conditional=conditional).to_dict()
    raise ValidationError(f"unknown model {spec!r}")
