"""Feature trunk: paired encoders, positional embedding, patching, two stages.

Each image passes through a small residual encoder (stem + two strided
residual blocks) to an 8x-downsampled map with ``embed`` channels.  A learned
positional embedding (shared by both views) is added, the two maps are
stacked, cut into non-overlapping windows (stage 1 side 14), and the patch
stack runs through ``depth_n`` mixer+attention pairs.  The windows are then
re-cut at side 7, quadrupling the patch count, and ``depth_n // 2`` more
pairs run with doubled attention heads.  Window order and within-window
flattening are row-major; both are pinned because checkpoints depend on
them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import AttentionBlockWeights, attention_block_forward
from .blocks import BlockWeights, PatchSet, denviscom_forward
from .config import ModelConfig
from .tensor import ShapeError, Tensor


@dataclass
class ResidualStageWeights:
    conv1_w: Tensor
    conv1_b: Tensor
    norm1_g: Tensor
    norm1_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    norm2_g: Tensor
    norm2_b: Tensor
    skip_w: Tensor
    skip_b: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, c_in: int, c_out: int) -> "ResidualStageWeights":
        def he(cin, k):
            return np.sqrt(2.0 / (cin * k * k))

        return cls(
            conv1_w=T.parameter(rng.normal(0.0, he(c_in, 3), size=(c_out, c_in, 3, 3))),
            conv1_b=T.parameter(np.zeros(c_out)),
            norm1_g=T.parameter(np.ones(c_out)),
            norm1_b=T.parameter(np.zeros(c_out)),
            conv2_w=T.parameter(rng.normal(0.0, he(c_out, 3), size=(c_out, c_out, 3, 3))),
            conv2_b=T.parameter(np.zeros(c_out)),
            norm2_g=T.parameter(np.ones(c_out)),
            norm2_b=T.parameter(np.zeros(c_out)),
            skip_w=T.parameter(rng.normal(0.0, he(c_in, 1), size=(c_out, c_in, 1, 1))),
            skip_b=T.parameter(np.zeros(c_out)),
        )


@dataclass
class EncoderWeights:
    stem_w: Tensor
    stem_b: Tensor
    stem_norm_g: Tensor
    stem_norm_b: Tensor
    stage1: ResidualStageWeights
    stage2: ResidualStageWeights

    @classmethod
    def init(cls, rng: np.random.Generator, channels: list[int]) -> "EncoderWeights":
        c0, c1, c2 = channels
        return cls(
            stem_w=T.parameter(rng.normal(0.0, np.sqrt(2.0 / (3 * 9)), size=(c0, 3, 3, 3))),
            stem_b=T.parameter(np.zeros(c0)),
            stem_norm_g=T.parameter(np.ones(c0)),
            stem_norm_b=T.parameter(np.zeros(c0)),
            stage1=ResidualStageWeights.init(rng, c0, c1),
            stage2=ResidualStageWeights.init(rng, c1, c2),
        )


def _channel_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """LayerNorm over the channel axis of a [C, H, W] map."""
    xt = T.transpose(x, (1, 2, 0))
    return T.transpose(T.layer_norm(xt, gamma, beta), (2, 0, 1))


def _residual_stage(x: Tensor, w: ResidualStageWeights) -> Tensor:
    h = T.conv2d(x, w.conv1_w, w.conv1_b, stride=2, pad=1)
    h = T.relu(_channel_norm(h, w.norm1_g, w.norm1_b))
    h = T.conv2d(h, w.conv2_w, w.conv2_b, stride=1, pad=1)
    h = _channel_norm(h, w.norm2_g, w.norm2_b)
    skip = T.conv2d(x, w.skip_w, w.skip_b, stride=2, pad=0)
    return T.relu(T.add(h, skip))


def encode_image(img: Tensor, w: EncoderWeights) -> Tensor:
    """[3, H, W] in [-1, 1] -> [embed, H/8, W/8]."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"encode_image: expected a [3, H, W] image, got {img.shape}")
    h = T.conv2d(img, w.stem_w, w.stem_b, stride=2, pad=1)
    h = T.relu(_channel_norm(h, w.stem_norm_g, w.stem_norm_b))
    h = _residual_stage(h, w.stage1)
    return _residual_stage(h, w.stage2)


def encode_pair(img_l: Tensor, img_r: Tensor, w_l: EncoderWeights, w_r: EncoderWeights | None):
    """Each image through its own encoder; ``w_r=None`` ties the weights."""
    return encode_image(img_l, w_l), encode_image(img_r, w_r if w_r is not None else w_l)


def add_pos_and_concat(f_l: Tensor, f_r: Tensor, pos: Tensor) -> Tensor:
    """Add the shared positional embedding to both maps and stack them: [2, E, h, w]."""
    if f_l.shape != f_r.shape:
        raise ShapeError(f"add_pos_and_concat: feature shapes differ: {f_l.shape} vs {f_r.shape}")
    if pos.shape != f_l.shape:
        raise ShapeError(f"add_pos_and_concat: pos {pos.shape} does not match features {f_l.shape}")
    stacked = T.concat(
        [T.reshape(f_l, (1,) + f_l.shape), T.reshape(f_r, (1,) + f_r.shape)], axis=0
    )
    return T.add(stacked, T.reshape(pos, (1,) + pos.shape))


def resize_pos(pos: Tensor, hw: tuple[int, int]) -> Tensor:
    """Bilinearly adapt the learned embedding to a different feature-map size."""
    if pos.shape[1:] == tuple(hw):
        return pos
    return T.bilinear_resize(pos, hw)


def patchify(f_c: Tensor, side: int) -> PatchSet:
    """[2, E, h, w] -> PatchSet with row-major windows and row-major flattening.

    Left-image windows fill the first half of the patch axis, right-image
    windows the second half, in the same window order, which is what
    establishes the left/right correspondence the mixer fuses on.
    """
    two, embed, h, w = f_c.shape
    if two != 2:
        raise ShapeError(f"patchify: expected a side axis of 2, got {f_c.shape}")
    if h % side or w % side:
        raise ShapeError(f"patchify: spatial dims {h}x{w} not divisible by side {side}")
    nh, nw = h // side, w // side
    x = T.reshape(f_c, (2, embed, nh, side, nw, side))
    x = T.transpose(x, (0, 2, 4, 3, 5, 1))  # [2, nh, nw, side, side, E]
    data = T.reshape(x, (2 * nh * nw, side * side, embed))
    return PatchSet(data, grid=(nh, nw), side=side)


def unpatchify(ps: PatchSet, embed: int) -> Tensor:
    """Exact inverse of patchify: PatchSet -> [2, E, h, w]."""
    nh, nw = ps.grid
    side = ps.side
    x = T.reshape(ps.data, (2, nh, nw, side, side, embed))
    x = T.transpose(x, (0, 5, 1, 3, 2, 4))  # [2, E, nh, side, nw, side]
    return T.reshape(x, (2, embed, nh * side, nw * side))


def repatch(ps: PatchSet, new_side: int, embed: int) -> PatchSet:
    """Re-cut the windows at a smaller side (values are only rearranged)."""
    return patchify(unpatchify(ps, embed), new_side)


@dataclass
class TrunkWeights:
    encoder_l: EncoderWeights
    encoder_r: EncoderWeights | None  # None when encoders are shared
    pos: Tensor  # (embed, base, base), base = input_multiple / downsample
    stage1_mixers: list[BlockWeights]
    stage1_attn: list[AttentionBlockWeights]
    stage2_mixers: list[BlockWeights]
    stage2_attn: list[AttentionBlockWeights]

    @classmethod
    def init(cls, rng: np.random.Generator, cfg: ModelConfig) -> "TrunkWeights":
        base = cfg.input_multiple // cfg.downsample
        mixer_kwargs = dict(
            kernel_size=cfg.conv_kernel,
            n_state=cfg.state_n,
            mlp_ratio=cfg.mlp_ratio,
            tie_conv_branches=cfg.tie_conv_branches,
        )
        attn_kwargs = dict(
            mlp_ratio=cfg.mlp_ratio,
            no_self=cfg.effective_no_self,
            no_cross=cfg.effective_no_cross,
        )
        return cls(
            encoder_l=EncoderWeights.init(rng, cfg.encoder_channels),
            encoder_r=None if cfg.share_encoders else EncoderWeights.init(rng, cfg.encoder_channels),
            pos=T.parameter(rng.normal(0.0, 0.02, size=(cfg.embed, base, base))),
            stage1_mixers=[BlockWeights.init(rng, cfg.embed, **mixer_kwargs) for _ in range(cfg.depth_n)],
            stage1_attn=[
                AttentionBlockWeights.init(rng, cfg.embed, cfg.heads_h, **attn_kwargs)
                for _ in range(cfg.depth_n)
            ],
            stage2_mixers=[
                BlockWeights.init(rng, cfg.embed, **mixer_kwargs) for _ in range(cfg.stage2_depth)
            ],
            stage2_attn=[
                AttentionBlockWeights.init(rng, cfg.embed, 2 * cfg.heads_h, **attn_kwargs)
                for _ in range(cfg.stage2_depth)
            ],
        )


def trunk_forward(img_l: Tensor, img_r: Tensor, w: TrunkWeights, cfg: ModelConfig):
    """Full trunk on a padded, normalized image pair -> (f_out_l, f_out_r)."""
    f_l, f_r = encode_pair(img_l, img_r, w.encoder_l, w.encoder_r)
    pos = resize_pos(w.pos, f_l.shape[1:])
    f_c = add_pos_and_concat(f_l, f_r, pos)

    ps = patchify(f_c, cfg.patch_side_stage1)
    for mixer, attn in zip(w.stage1_mixers, w.stage1_attn):
        ps = denviscom_forward(ps, mixer, no_fusion=cfg.no_fusion)
        ps = attention_block_forward(
            ps, attn, no_self=cfg.effective_no_self, no_cross=cfg.effective_no_cross
        )

    ps = repatch(ps, cfg.patch_side_stage2, cfg.embed)
    for mixer, attn in zip(w.stage2_mixers, w.stage2_attn):
        ps = denviscom_forward(ps, mixer, no_fusion=cfg.no_fusion)
        ps = attention_block_forward(
            ps, attn, no_self=cfg.effective_no_self, no_cross=cfg.effective_no_cross
        )

    f_out = unpatchify(ps, cfg.embed)
    return f_out[0], f_out[1]
