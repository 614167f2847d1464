"""Detector configuration and its key=value text form."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

from ..attention import AnchorSet, AttentionConfig, AttentionConfigError, head_scale_assignment

MECHANISMS = ("base", "fixed", "adaptive")
FEATURE_STRIDES = (4, 8, 16)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    # input and backbone
    image_size: int = 64
    patch_size: int = 8
    backbone_dim: int = 64
    backbone_heads: int = 4
    backbone_depth: int = 4
    global_blocks: tuple[int, ...] = (2, 4)  # 1-based block positions with global attention
    window: int = 4  # windowed-attention side, in patches
    # detection head
    encoder_dim: int = 32
    decoder_dim: int = 32
    heads: int = 4
    decoder_heads: int | None = None  # defaults to ``heads``
    feature_stride: int = 8  # encoder feature scale is 1/feature_stride
    num_queries: int = 25
    encoder_layers: int = 2
    decoder_layers: int = 2
    ffn_ratio: int = 4
    # scale-aware attention
    mechanism: str = "adaptive"
    scales: int = 4
    anchor_base: float = 4.0  # pixels
    temperature_denominator: float | None = None
    share_scale_offsets: bool = False
    grid: int = 2
    decoder_grid: int = 14
    # outputs
    num_classes: int = 3
    task: str = "detect"
    pixel_head_layers: int = 1
    window_update: str = "iterative"

    def __post_init__(self):
        if self.feature_stride not in FEATURE_STRIDES:
            raise ConfigError(f"encoder feature scale must be 1/4, 1/8 or 1/16, got 1/{self.feature_stride}")
        if self.num_queries < 1:
            raise ConfigError(f"query count must be >= 1, got {self.num_queries}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if self.mechanism not in MECHANISMS:
            raise ConfigError(f"unknown attention mechanism {self.mechanism!r}; expected one of {MECHANISMS}")
        if self.task not in ("detect", "instance", "panoptic"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.window_update not in ("iterative", "static"):
            raise ConfigError(f"window update must be 'iterative' or 'static', got {self.window_update!r}")
        if any(not 1 <= b <= self.backbone_depth for b in self.global_blocks):
            raise ConfigError(f"global blocks {self.global_blocks} outside 1..{self.backbone_depth}")
        if self.image_size % self.feature_stride or self.num_queries > self.feature_grid ** 2:
            raise ConfigError(f"{self.num_queries} queries need at least that many encoder texels; "
                              f"1/{self.feature_stride} scale gives {self.feature_grid ** 2}")
        ratio = self.patch_size / self.feature_stride
        if ratio not in (0.5, 1.0, 2.0, 4.0):
            raise ConfigError(f"cannot project backbone stride {self.patch_size} to 1/{self.feature_stride}")
        # surface head/scale divisibility problems at construction time
        try:
            self.encoder_attention()
            self.decoder_attention()
            if self.mechanism == "fixed":
                head_scale_assignment(self.heads, self.scales)
        except AttentionConfigError as exc:
            raise ConfigError(str(exc)) from exc

    # -- derived -------------------------------------------------------------------------------
    @property
    def backbone_grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def feature_grid(self) -> int:
        return self.image_size // self.feature_stride

    def anchors(self) -> AnchorSet:
        return AnchorSet(self.anchor_base, self.scales if self.mechanism != "base" else 1, self.image_size)

    def encoder_attention(self) -> AttentionConfig:
        scales = 1 if self.mechanism == "base" else self.scales
        return AttentionConfig(self.encoder_dim, self.heads, scales, self.temperature_denominator,
                               self.grid, self.share_scale_offsets)

    def decoder_attention(self) -> AttentionConfig:
        return AttentionConfig(self.decoder_dim, self.num_decoder_heads, grid=self.decoder_grid)

    @property
    def num_decoder_heads(self) -> int:
        return self.heads if self.decoder_heads is None else self.decoder_heads

    def backbone_attention(self) -> AttentionConfig:
        return AttentionConfig(self.backbone_dim, self.backbone_heads)

    @property
    def uses_masks(self) -> bool:
        return self.task != "detect"

    # -- presets -------------------------------------------------------------------------------
    @classmethod
    def femto(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def base(cls, **overrides) -> "ModelConfig":
        """ViT-B sized settings at 1024 px; constructible, not exercised at desk scale."""
        values = dict(
            image_size=1024, patch_size=16, backbone_dim=768, backbone_heads=12, backbone_depth=12,
            global_blocks=(3, 6, 9, 12), window=14, encoder_dim=384, decoder_dim=256, heads=12,
            feature_stride=8, num_queries=300, encoder_layers=6, decoder_layers=6, scales=4,
            anchor_base=32.0, num_classes=80,
            # 256 channels do not split over 12 heads; 8 keeps the 32-wide head size
            decoder_heads=8,
        )
        values.update(overrides)
        return cls(**values)

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)

    # -- text form -----------------------------------------------------------------------------
    def to_text(self) -> str:
        lines = []
        for key, value in asdict(self).items():
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif value is None:
                value = "none"
            lines.append(f"{key}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        values = parse_key_values(text)
        unknown = set(values) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**{k: coerce_field(k, v) for k, v in values.items()})


def parse_key_values(text: str) -> dict[str, str]:
    """key=value lines; blank lines and '#' comments ignored."""
    out: dict[str, str] = {}
    for number, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {number}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {number}: duplicate key {key!r}")
        out[key] = value
    return out


def coerce_field(key: str, text: str):
    defaults = ModelConfig()
    default = getattr(defaults, key)
    try:
        if key == "temperature_denominator":
            return None if text.lower() == "none" else float(text)
        if key == "decoder_heads":
            return None if text.lower() == "none" else int(text)
        if isinstance(default, bool):
            if text.lower() not in ("true", "false"):
                raise ValueError(text)
            return text.lower() == "true"
        if isinstance(default, tuple):
            return tuple(int(v) for v in text.split(",") if v.strip())
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc
