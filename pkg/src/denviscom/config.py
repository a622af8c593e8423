"""Model hyperparameters and their JSON file form.

The config document mirrors ``ModelConfig`` exactly: every field is a key,
unknown keys are rejected.  ``encoder_channels`` may be omitted (null), in
which case it derives from the embedding width as [embed/4, embed/2, embed].
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .tensor import ConfigError


@dataclass
class ModelConfig:
    embed: int = 128
    encoder_channels: list[int] | None = None
    downsample: int = 8
    patch_side_stage1: int = 14
    patch_side_stage2: int = 7
    depth_n: int = 4
    heads_h: int = 4
    state_n: int = 16
    conv_kernel: int = 3
    mlp_ratio: int = 4
    no_fusion: bool = False
    no_self: bool = False
    no_cross: bool = False
    no_attention: bool = False
    share_encoders: bool = False
    tie_conv_branches: bool = False

    def __post_init__(self):
        if self.encoder_channels is None:
            self.encoder_channels = [max(self.embed // 4, 1), max(self.embed // 2, 1), self.embed]
        self.encoder_channels = list(self.encoder_channels)
        self.validate()

    def validate(self) -> None:
        if self.embed % 2 != 0:
            raise ConfigError(f"embed must be even, got {self.embed}")
        if self.downsample != 8:
            raise ConfigError(f"the encoder is a fixed 8x pyramid; downsample must be 8, got {self.downsample}")
        if self.patch_side_stage2 < 1 or self.patch_side_stage1 % self.patch_side_stage2 != 0:
            raise ConfigError(
                f"patch_side_stage1 ({self.patch_side_stage1}) must be divisible by "
                f"patch_side_stage2 ({self.patch_side_stage2})"
            )
        if len(self.encoder_channels) != 3:
            raise ConfigError(f"encoder_channels needs 3 stages, got {self.encoder_channels}")
        if self.encoder_channels[-1] != self.embed:
            raise ConfigError(
                f"encoder_channels[-1] ({self.encoder_channels[-1]}) must equal embed ({self.embed})"
            )
        if self.heads_h < 1 or self.embed % (2 * self.heads_h) != 0:
            raise ConfigError(
                f"embed ({self.embed}) must be divisible by 2*heads_h ({2 * self.heads_h}); "
                "stage 2 runs with doubled heads"
            )
        if self.conv_kernel % 2 == 0:
            raise ConfigError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if self.depth_n < 1:
            raise ConfigError(f"depth_n must be >= 1, got {self.depth_n}")
        if self.state_n < 1:
            raise ConfigError(f"state_n must be >= 1, got {self.state_n}")

    # effective attention flags: no_attention implies both
    @property
    def effective_no_self(self) -> bool:
        return self.no_self or self.no_attention

    @property
    def effective_no_cross(self) -> bool:
        return self.no_cross or self.no_attention

    @property
    def input_multiple(self) -> int:
        """Inputs are padded to multiples of this (downsample x stage-1 side)."""
        return self.downsample * self.patch_side_stage1

    @property
    def stage2_depth(self) -> int:
        return self.depth_n // 2

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "ModelConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def reduced_config(embed: int = 64, depth_n: int = 2, heads_h: int = 2, **kwargs) -> ModelConfig:
    """Small configuration used by the toy-training and gradient harnesses."""
    return ModelConfig(embed=embed, depth_n=depth_n, heads_h=heads_h, **kwargs)
