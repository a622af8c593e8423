"""Per-view self-attention followed by bidirectional cross-attention.

After each sequence mixer, an attention block splits the patch stack back
into its two views.  Self-attention runs within each view (shared weights);
then both views are snapshotted and cross-attention runs in both directions
from the same snapshots: the left view is updated with queries taken from
the right snapshot while keys and values come from the left snapshot, and
symmetrically for the right view.  Using pre-update snapshots for both
directions makes the two updates order-independent; a ``sequential_cross``
switch restores the ordered reading (left updated first, then consumed by
the right update) for ablation fidelity.  Everything is wrapped in pre-norm
residuals and followed by a shared MLP.

The ``no_self`` / ``no_cross`` flags drop the corresponding sublayer and its
parameters entirely, giving the four ablation variants (full, w/o self,
w/o cross, w/o attention).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .blocks import PatchSet
from .tensor import ConfigError, Tensor


@dataclass
class AttnProjections:
    q_w: Tensor
    q_b: Tensor
    k_w: Tensor
    k_b: Tensor
    v_w: Tensor
    v_b: Tensor
    o_w: Tensor
    o_b: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, embed: int) -> "AttnProjections":
        scale = 1.0 / np.sqrt(embed)

        def lin():
            return T.parameter(rng.normal(0.0, scale, size=(embed, embed)))

        return cls(
            q_w=lin(), q_b=T.parameter(np.zeros(embed)),
            k_w=lin(), k_b=T.parameter(np.zeros(embed)),
            v_w=lin(), v_b=T.parameter(np.zeros(embed)),
            o_w=lin(), o_b=T.parameter(np.zeros(embed)),
        )


def multi_head_attention(q, k, v, proj: AttnProjections, heads: int) -> Tensor:
    """Scaled dot-product attention: softmax(QK^T / sqrt(embed/heads)) V per head.

    ``q`` is [b, Lq, embed]; ``k``/``v`` are [b, Lk, embed] and must share
    length.  Heads are concatenated and output-projected.
    """
    q, k, v = T._as_tensor(q), T._as_tensor(k), T._as_tensor(v)
    embed = q.shape[-1]
    if k.shape[-1] != embed or v.shape[-1] != embed:
        raise T.ShapeError(f"multi_head_attention: embed mismatch {q.shape} / {k.shape} / {v.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise T.ShapeError(f"multi_head_attention: key/value lengths differ: {k.shape} vs {v.shape}")
    if heads < 1 or embed % heads != 0:
        raise ConfigError(f"multi_head_attention: heads={heads} must divide embed={embed}")
    head_dim = embed // heads

    def split_heads(x, length):
        # [b, L, embed] -> [b, heads, L, head_dim]
        b = x.shape[0]
        return T.transpose(T.reshape(x, (b, length, heads, head_dim)), (0, 2, 1, 3))

    lq, lk = q.shape[-2], k.shape[-2]
    qh = split_heads(T.linear(q, proj.q_w, proj.q_b), lq)
    kh = split_heads(T.linear(k, proj.k_w, proj.k_b), lk)
    vh = split_heads(T.linear(v, proj.v_w, proj.v_b), lk)

    scores = T.mul(T.matmul(qh, T.transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(head_dim))
    attn = T.softmax_lastdim(scores)
    ctx = T.matmul(attn, vh)  # [b, heads, Lq, head_dim]
    merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (q.shape[0], lq, embed))
    return T.linear(merged, proj.o_w, proj.o_b)


@dataclass
class AttentionBlockWeights:
    """One attention block: optional self/cross sublayers plus a shared MLP."""

    heads: int
    self_attn: AttnProjections | None
    self_norm_g: Tensor | None
    self_norm_b: Tensor | None
    cross_attn: AttnProjections | None
    cross_norm_g: Tensor | None
    cross_norm_b: Tensor | None
    mlp_norm_g: Tensor
    mlp_norm_b: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        embed: int,
        heads: int,
        mlp_ratio: int = 4,
        no_self: bool = False,
        no_cross: bool = False,
    ) -> "AttentionBlockWeights":
        if heads < 1 or embed % heads != 0:
            raise ConfigError(f"AttentionBlockWeights: heads={heads} must divide embed={embed}")
        hidden = mlp_ratio * embed
        scale = 1.0 / np.sqrt(embed)
        return cls(
            heads=heads,
            self_attn=None if no_self else AttnProjections.init(rng, embed),
            self_norm_g=None if no_self else T.parameter(np.ones(embed)),
            self_norm_b=None if no_self else T.parameter(np.zeros(embed)),
            cross_attn=None if no_cross else AttnProjections.init(rng, embed),
            cross_norm_g=None if no_cross else T.parameter(np.ones(embed)),
            cross_norm_b=None if no_cross else T.parameter(np.zeros(embed)),
            mlp_norm_g=T.parameter(np.ones(embed)),
            mlp_norm_b=T.parameter(np.zeros(embed)),
            mlp_w1=T.parameter(rng.normal(0.0, scale, size=(embed, hidden))),
            mlp_b1=T.parameter(np.zeros(hidden)),
            mlp_w2=T.parameter(rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, embed))),
            mlp_b2=T.parameter(np.zeros(embed)),
        )


def attention_block_forward(
    x: PatchSet,
    w: AttentionBlockWeights,
    no_self: bool = False,
    no_cross: bool = False,
    sequential_cross: bool = False,
    attach_to_query: bool = False,
) -> PatchSet:
    """Self-attention per view, cross-attention between views, residual MLP.

    With both flags set the block reduces to the residual MLP alone.  By
    default cross-attention attaches its output to the key/value side
    (queries come from the other view); ``attach_to_query`` flips that
    convention.
    """
    d = x.data
    half = x.left_count
    f_l, f_r = d[:half], d[half:]

    if not no_self:
        if w.self_attn is None:
            raise ConfigError("attention_block_forward: self-attention requested but weights absent")
        nl = T.layer_norm(f_l, w.self_norm_g, w.self_norm_b)
        nr = T.layer_norm(f_r, w.self_norm_g, w.self_norm_b)
        f_l = T.add(f_l, multi_head_attention(nl, nl, nl, w.self_attn, w.heads))
        f_r = T.add(f_r, multi_head_attention(nr, nr, nr, w.self_attn, w.heads))

    if not no_cross:
        if w.cross_attn is None:
            raise ConfigError("attention_block_forward: cross-attention requested but weights absent")
        snap_l, snap_r = f_l, f_r
        nl = T.layer_norm(snap_l, w.cross_norm_g, w.cross_norm_b)
        nr = T.layer_norm(snap_r, w.cross_norm_g, w.cross_norm_b)
        if attach_to_query:
            new_l = T.add(snap_l, multi_head_attention(nl, nr, nr, w.cross_attn, w.heads))
        else:
            new_l = T.add(snap_l, multi_head_attention(nr, nl, nl, w.cross_attn, w.heads))
        if sequential_cross:
            # ordered reading: the right update consumes the already-updated left
            nl = T.layer_norm(new_l, w.cross_norm_g, w.cross_norm_b)
        if attach_to_query:
            new_r = T.add(snap_r, multi_head_attention(nr, nl, nl, w.cross_attn, w.heads))
        else:
            new_r = T.add(snap_r, multi_head_attention(nl, nr, nr, w.cross_attn, w.heads))
        f_l, f_r = new_l, new_r

    merged = T.concat([f_l, f_r], axis=0)
    normed = T.layer_norm(merged, w.mlp_norm_g, w.mlp_norm_b)
    mlp_out = T.linear(T.gelu(T.linear(normed, w.mlp_w1, w.mlp_b1)), w.mlp_w2, w.mlp_b2)
    return PatchSet(T.add(merged, mlp_out), x.grid, x.side)
