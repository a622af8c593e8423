"""The correspondence-fused sequence mixer block.

Each block sees a stack of patches from two views (left patches first, right
patches second, with patch ``j`` and patch ``j + p/2`` covering the same
spatial window).  Inside the mixer the embedding is split in half: one half
feeds a joint scan branch that concatenates corresponding left/right patches
along the channel axis so the state-space scan reads both views at once; the
other half feeds two per-side convolution branches that restore locality the
scan's sequential reading loses.  The branch outputs are concatenated back to
the full embedding, projected, and wrapped in the usual pre-norm residual
mixer + MLP pair.

The ``no_fusion`` variant keeps the exact same weights (the scan branch
still sees 2c channels) but groups consecutive same-side patches instead of
corresponding left/right pairs, so the scan never mixes the two views.  Note
that with p == 2 there is only one possible grouping and the two variants
coincide; the distinction is observable from p >= 4.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .ssm import SelectiveScanWeights, selective_scan
from .tensor import ConfigError, ContractError, ShapeError, Tensor


@dataclass
class PatchSet:
    """Patches from a pair of views: data is [p, patch_len, embed].

    The first ``p/2`` patches come from the left (or first) image, the rest
    from the right (or second) image, in the same window order, so patch j
    and patch j + p/2 are spatially corresponding.
    """

    data: Tensor
    grid: tuple[int, int]  # windows per side: (rows, cols)
    side: int  # spatial window size; patch_len == side * side

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ShapeError(f"PatchSet: data must be [p, L, embed], got {self.data.shape}")
        if self.data.shape[0] % 2 != 0:
            raise ContractError(f"PatchSet: patch count must be even, got {self.data.shape[0]}")

    @property
    def left_count(self) -> int:
        return self.data.shape[0] // 2

    @property
    def patch_len(self) -> int:
        return self.data.shape[1]

    @property
    def embed(self) -> int:
        return self.data.shape[2]


def split_embed(x: Tensor) -> tuple[Tensor, Tensor]:
    """Split [p, embed, L] along the channel axis into two equal halves."""
    if x.ndim != 3:
        raise ShapeError(f"split_embed: expected [p, embed, L], got {x.shape}")
    embed = x.shape[1]
    if embed % 2 != 0:
        raise ConfigError(f"split_embed: embedding dimension must be even, got {embed}")
    half = embed // 2
    return x[:, :half], x[:, half:]


def fuse_lr(f_m: Tensor) -> Tensor:
    """Concatenate corresponding left/right patches along channels.

    [p, c, L] -> [p/2, 2c, L]; output patch j holds left patch j in channels
    [0, c) and right patch j (input patch j + p/2) in channels [c, 2c).
    """
    p = f_m.shape[0]
    if p % 2 != 0:
        raise ContractError(f"fuse_lr: patch count must be even, got {p}")
    return T.concat([f_m[: p // 2], f_m[p // 2 :]], axis=1)


def unfuse_lr(fused: Tensor) -> Tensor:
    """Exact inverse of fuse_lr: [p/2, 2c, L] -> [p, c, L]."""
    two_c = fused.shape[1]
    if two_c % 2 != 0:
        raise ContractError(f"unfuse_lr: channel count must be even, got {two_c}")
    c = two_c // 2
    return T.concat([fused[:, :c], fused[:, c:]], axis=0)


def group_adjacent(f_m: Tensor) -> Tensor:
    """Pair consecutive same-side patches channel-wise (the no-fusion path).

    [p, c, L] -> [p/2, 2c, L] by a pure reshape, so patches (0,1), (2,3), ...
    share a scan without any left/right correspondence.
    """
    p, c, length = f_m.shape
    if p % 2 != 0:
        raise ContractError(f"group_adjacent: patch count must be even, got {p}")
    return T.reshape(f_m, (p // 2, 2 * c, length))


def ungroup_adjacent(fused: Tensor) -> Tensor:
    half_p, two_c, length = fused.shape
    if two_c % 2 != 0:
        raise ContractError(f"ungroup_adjacent: channel count must be even, got {two_c}")
    return T.reshape(fused, (2 * half_p, two_c // 2, length))


@dataclass
class ConvBranchWeights:
    w: Tensor  # (c, c) linear over channels
    b: Tensor  # (c,)
    kernel: Tensor  # (c, K) depthwise
    kbias: Tensor  # (c,)

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int, kernel_size: int) -> "ConvBranchWeights":
        scale = 1.0 / np.sqrt(channels)
        return cls(
            w=T.parameter(rng.normal(0.0, scale, size=(channels, channels))),
            b=T.parameter(np.zeros(channels)),
            kernel=T.parameter(rng.normal(0.0, 1.0 / np.sqrt(kernel_size), size=(channels, kernel_size))),
            kbias=T.parameter(np.zeros(channels)),
        )


def conv_branch(f_side: Tensor, w: ConvBranchWeights) -> Tensor:
    """SiLU(DepthwiseConv1D(Linear(f_side))) along the in-patch axis."""
    perm = (0, 2, 1)
    h = T.transpose(T.linear(T.transpose(f_side, perm), w.w, w.b), perm)
    return T.silu(T.depthwise_conv1d(h, w.kernel, w.kbias))


@dataclass
class ScanBranchWeights:
    w: Tensor  # (2c, 2c)
    b: Tensor  # (2c,)
    kernel: Tensor  # (2c, K)
    kbias: Tensor  # (2c,)
    scan: SelectiveScanWeights

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int, kernel_size: int, n_state: int) -> "ScanBranchWeights":
        scale = 1.0 / np.sqrt(channels)
        return cls(
            w=T.parameter(rng.normal(0.0, scale, size=(channels, channels))),
            b=T.parameter(np.zeros(channels)),
            kernel=T.parameter(rng.normal(0.0, 1.0 / np.sqrt(kernel_size), size=(channels, kernel_size))),
            kbias=T.parameter(np.zeros(channels)),
            scan=SelectiveScanWeights.init(rng, channels, n_state),
        )


def scan_branch(f_fused: Tensor, w: ScanBranchWeights, lti: bool = False) -> Tensor:
    """SSM(SiLU(DepthwiseConv1D(Linear(f_fused)))) over the in-patch axis."""
    perm = (0, 2, 1)
    h = T.transpose(T.linear(T.transpose(f_fused, perm), w.w, w.b), perm)
    h = T.silu(T.depthwise_conv1d(h, w.kernel, w.kbias))
    return selective_scan(h, w.scan, lti=lti)


@dataclass
class BlockWeights:
    """All parameters of one mixer block (norms, branches, projection, MLP)."""

    norm1_g: Tensor
    norm1_b: Tensor
    conv_left: ConvBranchWeights
    conv_right: ConvBranchWeights | None  # None when branches are tied
    scan: ScanBranchWeights
    out_w: Tensor  # (embed, embed)
    out_b: Tensor  # (embed,)
    norm2_g: Tensor
    norm2_b: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        embed: int,
        kernel_size: int = 3,
        n_state: int = 16,
        mlp_ratio: int = 4,
        tie_conv_branches: bool = False,
    ) -> "BlockWeights":
        if embed % 2 != 0:
            raise ConfigError(f"BlockWeights: embed must be even, got {embed}")
        half = embed // 2
        hidden = mlp_ratio * embed
        scale = 1.0 / np.sqrt(embed)
        return cls(
            norm1_g=T.parameter(np.ones(embed)),
            norm1_b=T.parameter(np.zeros(embed)),
            conv_left=ConvBranchWeights.init(rng, half, kernel_size),
            conv_right=None if tie_conv_branches else ConvBranchWeights.init(rng, half, kernel_size),
            scan=ScanBranchWeights.init(rng, embed, kernel_size, n_state),
            out_w=T.parameter(rng.normal(0.0, scale, size=(embed, embed))),
            out_b=T.parameter(np.zeros(embed)),
            norm2_g=T.parameter(np.ones(embed)),
            norm2_b=T.parameter(np.zeros(embed)),
            mlp_w1=T.parameter(rng.normal(0.0, scale, size=(embed, hidden))),
            mlp_b1=T.parameter(np.zeros(hidden)),
            mlp_w2=T.parameter(rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, embed))),
            mlp_b2=T.parameter(np.zeros(embed)),
        )


def _mixer(x: Tensor, w: BlockWeights, no_fusion: bool, lti_scan: bool) -> Tensor:
    """The split/fuse/scan/conv/concat core, on normalized input [p, L, embed]."""
    p = x.shape[0]
    xt = T.transpose(x, (0, 2, 1))  # [p, embed, L]
    f_m, f_s = split_embed(xt)

    # per-side convolution branches on the second half
    half_p = p // 2
    x_left = conv_branch(f_s[:half_p], w.conv_left)
    x_right = conv_branch(f_s[half_p:], w.conv_right if w.conv_right is not None else w.conv_left)
    conv_out = T.concat([x_left, x_right], axis=0)  # [p, c, L]

    # joint scan branch on the first half
    if no_fusion:
        fused = group_adjacent(f_m)
        scan_out = ungroup_adjacent(scan_branch(fused, w.scan, lti=lti_scan))
    else:
        fused = fuse_lr(f_m)
        scan_out = unfuse_lr(scan_branch(fused, w.scan, lti=lti_scan))

    mixed = T.concat([scan_out, conv_out], axis=1)  # [p, embed, L], scan half first
    return T.linear(T.transpose(mixed, (0, 2, 1)), w.out_w, w.out_b)


def _mlp(x: Tensor, w: BlockWeights) -> Tensor:
    return T.linear(T.gelu(T.linear(x, w.mlp_w1, w.mlp_b1)), w.mlp_w2, w.mlp_b2)


def denviscom_forward(
    x: PatchSet,
    w: BlockWeights,
    no_fusion: bool = False,
    lti_scan: bool = False,
) -> PatchSet:
    """Pre-norm residual mixer followed by a pre-norm residual MLP."""
    d = x.data
    d = T.add(d, _mixer(T.layer_norm(d, w.norm1_g, w.norm1_b), w, no_fusion, lti_scan))
    d = T.add(d, _mlp(T.layer_norm(d, w.norm2_g, w.norm2_b), w))
    return PatchSet(d, x.grid, x.side)
