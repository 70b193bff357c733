"""Model hyperparameters and the ablation switches."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

INJECTION_SITES = ("image_encoder", "prompt_encoder", "mask_decoder", "none")
TEXT_PLACEMENTS = ("mlp_only", "mlp_and_mhsa")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    bottleneck: int = 16
    text_dim: int = 64
    decoder_dim: int = 64
    # Frozen backbone MLP expansion. Kept wide so the frozen set dominates the
    # parameter count the way a ViT-B encoder does.
    mlp_ratio: int = 16
    num_mask_upsample: int = 1
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads or self.decoder_dim % self.heads:
            raise ValueError(f"embed_dim/decoder_dim must be divisible by heads={self.heads}")
        if not 0 < self.bottleneck < self.embed_dim:
            raise ValueError(f"bottleneck must satisfy 0 < r < d, got r={self.bottleneck}, d={self.embed_dim}")
        if self.num_mask_upsample != 1:
            raise ValueError("num_mask_upsample is fixed to 1")
        if self.image_size // self.patch_size < 2:
            raise ValueError("token grid must be at least 2x2")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def mask_size(self) -> int:
        return 2 * self.grid

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class VariantSpec:
    injection_site: str = "image_encoder"
    text_placement: str = "mlp_only"
    adapters_enabled: bool = True
    decoder_trainable: bool = True

    def __post_init__(self):
        if self.injection_site not in INJECTION_SITES:
            raise ValueError(f"injection_site must be one of {INJECTION_SITES}, got {self.injection_site!r}")
        if self.text_placement not in TEXT_PLACEMENTS:
            raise ValueError(f"text_placement must be one of {TEXT_PLACEMENTS}, got {self.text_placement!r}")
        if self.injection_site == "image_encoder" and not self.adapters_enabled:
            raise ValueError("image_encoder injection needs adapters_enabled")

    @property
    def uses_text(self) -> bool:
        return self.injection_site != "none"

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.injection_site != "image_encoder":
            # placement is meaningless off the image encoder; normalise it away
            d["text_placement"] = "mlp_only"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VariantSpec":
        return cls(**d)


VARIANTS: dict[str, VariantSpec] = {
    "none": VariantSpec("none", "mlp_only", adapters_enabled=False, decoder_trainable=False),
    "decoder_only": VariantSpec("none", "mlp_only", adapters_enabled=False, decoder_trainable=True),
    "parallel": VariantSpec("none", "mlp_only", adapters_enabled=True, decoder_trainable=True),
    "parallel_text": VariantSpec("image_encoder", "mlp_only", adapters_enabled=True, decoder_trainable=True),
    "inject_prompt": VariantSpec("prompt_encoder", "mlp_only", adapters_enabled=True, decoder_trainable=True),
    "inject_decoder": VariantSpec("mask_decoder", "mlp_only", adapters_enabled=True, decoder_trainable=True),
    "text_mlp_mhsa": VariantSpec("image_encoder", "mlp_and_mhsa", adapters_enabled=True, decoder_trainable=True),
}


def variant(name: str) -> VariantSpec:
    try:
        return VARIANTS[name]
    except KeyError:
        raise ValueError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}") from None


def variant_name(spec: VariantSpec) -> str | None:
    for name, v in VARIANTS.items():
        if v.to_dict() == spec.to_dict():
            return name
    return None
