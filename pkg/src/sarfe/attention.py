"""Feature augmentation head: offset-attention blocks over RoI tokens.

Each block runs single-head scaled dot-product self-attention on the
token sequence, then a residual correction on the difference between
the attention output and its input:

    out = relu(feature_norm(linear(attended - x))) + x

A stack of these blocks plus the raw input is concatenated along
channels and fused back to the working width by one linear+relu layer.
One independent head per feature source; source outputs concatenate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numcore
from .errors import ShapeError
from .numcore import Parameter, TokenMatrix


@dataclass(frozen=True, eq=False)
class OaBlockParams:
    """Projections and residual-branch parameters of one offset-attention block."""

    wq: Parameter
    bq: Parameter
    wk: Parameter
    bk: Parameter
    wv: Parameter
    bv: Parameter
    w_post: Parameter
    b_post: Parameter
    gamma: Parameter
    beta: Parameter

    @property
    def width(self) -> int:
        return self.wq.values.shape[0]

    def named(self, prefix: str) -> dict[str, Parameter]:
        return {
            f"{prefix}.wq": self.wq, f"{prefix}.bq": self.bq,
            f"{prefix}.wk": self.wk, f"{prefix}.bk": self.bk,
            f"{prefix}.wv": self.wv, f"{prefix}.bv": self.bv,
            f"{prefix}.w_post": self.w_post, f"{prefix}.b_post": self.b_post,
            f"{prefix}.gamma": self.gamma, f"{prefix}.beta": self.beta,
        }


@dataclass(frozen=True, eq=False)
class AugmentatorParams:
    """A stack of offset-attention blocks plus the channel-fusion layer."""

    blocks: tuple[OaBlockParams, ...]
    w_fuse: Parameter
    b_fuse: Parameter

    @property
    def depth(self) -> int:
        return len(self.blocks)

    @property
    def width(self) -> int:
        return self.blocks[0].width

    def named(self, prefix: str) -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for i, blk in enumerate(self.blocks):
            out.update(blk.named(f"{prefix}.block{i}"))
        out[f"{prefix}.w_fuse"] = self.w_fuse
        out[f"{prefix}.b_fuse"] = self.b_fuse
        return out


def init_oa_block(rng: np.random.Generator, width: int) -> OaBlockParams:
    wq, bq = numcore.init_linear_params(rng, width, width)
    wk, bk = numcore.init_linear_params(rng, width, width)
    wv, bv = numcore.init_linear_params(rng, width, width)
    w_post, b_post = numcore.init_linear_params(rng, width, width)
    return OaBlockParams(
        wq=wq, bq=bq, wk=wk, bk=bk, wv=wv, bv=bv,
        w_post=w_post, b_post=b_post,
        gamma=Parameter(np.ones(width)), beta=Parameter(np.zeros(width)),
    )


def init_augmentator(rng: np.random.Generator, width: int, depth: int) -> AugmentatorParams:
    blocks = tuple(init_oa_block(rng, width) for _ in range(depth))
    w_fuse, b_fuse = numcore.init_linear_params(rng, (depth + 1) * width, width)
    return AugmentatorParams(blocks=blocks, w_fuse=w_fuse, b_fuse=b_fuse)


def attention_weights(x: TokenMatrix, p: OaBlockParams) -> TokenMatrix:
    """Row-stochastic attention matrix softmax(Q K^T / sqrt(d))."""
    if x.cols != p.width:
        raise ShapeError(f"attention: input width {x.cols} != block width {p.width}")
    q = numcore.linear(x, p.wq, p.bq)
    k = numcore.linear(x, p.wk, p.bk)
    scores = numcore.scale(numcore.matmul(q, numcore.transpose(k)), 1.0 / math.sqrt(p.width))
    return numcore.softmax_rows(scores)


def self_attention(x: TokenMatrix, p: OaBlockParams) -> TokenMatrix:
    """Single-head scaled dot-product attention; shape preserved."""
    attn = attention_weights(x, p)
    v = numcore.linear(x, p.wv, p.bv)
    return numcore.matmul(attn, v)


def offset_attention(x: TokenMatrix, p: OaBlockParams, eps: float = 1e-5) -> TokenMatrix:
    """Residual block on the offset between attended and raw tokens."""
    attended = self_attention(x, p)
    branch = numcore.linear(numcore.sub(attended, x), p.w_post, p.b_post)
    branch = numcore.relu(numcore.feature_norm(branch, p.gamma, p.beta, eps))
    return numcore.add(branch, x)


def augmentator(x: TokenMatrix, p: AugmentatorParams) -> TokenMatrix:
    """Chain the blocks, concatenate input plus every block output, fuse to d."""
    if x.cols != p.width:
        raise ShapeError(f"augmentator: input width {x.cols} != block width {p.width}")
    stages = [x]
    current = x
    for block in p.blocks:
        current = offset_attention(current, block)
        stages.append(current)
    fused = numcore.concat_cols(stages)
    return numcore.relu(numcore.linear(fused, p.w_fuse, p.b_fuse))


def sarfe_forward(
    sources: Sequence[TokenMatrix], params: Sequence[AugmentatorParams]
) -> TokenMatrix:
    """Independently augment each source's tokens, concatenate along channels."""
    if len(sources) != len(params):
        raise ValueError(f"got {len(sources)} sources but {len(params)} parameter sets")
    if not sources:
        raise ValueError("sarfe_forward: no sources")
    tokens = sources[0].rows
    for s in sources:
        if s.rows != tokens:
            raise ShapeError(f"token counts differ across sources: {tokens} vs {s.rows}")
    return numcore.concat_cols([augmentator(s, p) for s, p in zip(sources, params)])
