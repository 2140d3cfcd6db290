"""Hierarchical four-stage transformer encoder with spatial-reduction attention."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor_core import Conv2d, DimensionError, LayerNorm, Linear, Module, Tensor, ops, scope


class ConfigError(ValueError):
    """Raised for inconsistent architecture or run settings."""


@dataclass(frozen=True)
class BackboneConfig:
    dims: tuple[int, ...]
    depths: tuple[int, ...]
    heads: tuple[int, ...]
    sr_ratios: tuple[int, ...]
    mlp_ratio: int = 4
    in_chans: int = 3
    ffn_act: str = "gelu"

    def __post_init__(self):
        n = len(self.dims)
        if not (len(self.depths) == len(self.heads) == len(self.sr_ratios) == n):
            raise ConfigError("dims, depths, heads and sr_ratios must have one entry per stage")
        for c, h in zip(self.dims, self.heads):
            if c % h:
                raise ConfigError(f"stage width {c} is not divisible by {h} heads")

    @property
    def num_stages(self) -> int:
        return len(self.dims)

    @property
    def patch_specs(self) -> list[tuple[int, int, int]]:
        """(kernel, stride, pad) per stage."""
        return [(7, 4, 3)] + [(3, 2, 1)] * (self.num_stages - 1)

    def stage_in_chans(self, i: int) -> int:
        """Channels entering stage ``i`` (1-based) patch embedding."""
        return self.in_chans if i == 1 else self.dims[i - 2]

    @property
    def total_stride(self) -> int:
        return 4 * 2 ** (self.num_stages - 1)


PRESETS = {
    "toy": BackboneConfig(dims=(16, 32, 48, 64), depths=(1, 1, 2, 1), heads=(1, 2, 2, 4), sr_ratios=(4, 2, 2, 1)),
    "mit_b5_shape": BackboneConfig(dims=(64, 128, 320, 512), depths=(3, 6, 40, 3), heads=(1, 2, 5, 8), sr_ratios=(8, 4, 2, 1)),
}


def backbone_preset(name: str) -> BackboneConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown backbone preset {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass
class StageFeatures:
    """Per-stage token maps ``(B, H_i*W_i, C_i)`` and their spatial extents."""

    tokens: list[Tensor] = field(default_factory=list)
    sizes: list[tuple[int, int]] = field(default_factory=list)

    def append(self, z: Tensor, h: int, w: int) -> None:
        self.tokens.append(z)
        self.sizes.append((h, w))

    def __len__(self) -> int:
        return len(self.tokens)


# -- parameter containers -------------------------------------------------

class PatchEmbed(Module):
    def __init__(self, cin, cout, kernel, stride, pad, rng, dtype=np.float32):
        super().__init__()
        self.kernel = kernel
        self.proj = Conv2d(cin, cout, kernel, stride, pad, rng, dtype)
        self.norm = LayerNorm(cout, dtype)

    def __call__(self, x: Tensor):
        return overlap_patch_embed(x, self)


class Attention(Module):
    def __init__(self, dim, heads, sr_ratio, rng, dtype=np.float32):
        super().__init__()
        self.heads, self.sr_ratio = heads, sr_ratio
        self.wq = Linear(dim, dim, rng, dtype)
        self.wk = Linear(dim, dim, rng, dtype)
        self.wv = Linear(dim, dim, rng, dtype)
        self.wo = Linear(dim, dim, rng, dtype)
        if sr_ratio > 1:
            self.sr = Conv2d(dim, dim, sr_ratio, sr_ratio, 0, rng, dtype)
            self.sr_norm = LayerNorm(dim, dtype)


class FFN(Module):
    def __init__(self, dim, ratio, rng, dtype=np.float32, act="gelu"):
        super().__init__()
        self.act = act
        self.fc1 = Linear(dim, dim * ratio, rng, dtype)
        self.fc2 = Linear(dim * ratio, dim, rng, dtype)

    def __call__(self, z: Tensor) -> Tensor:
        return ffn(z, self)


class SAL(Module):
    """One pre-norm self-attention layer: attention then feed-forward."""

    def __init__(self, dim, heads, sr_ratio, mlp_ratio, rng, dtype=np.float32, act="gelu"):
        super().__init__()
        self.norm1 = LayerNorm(dim, dtype)
        self.msa = Attention(dim, heads, sr_ratio, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.ffn = FFN(dim, mlp_ratio, rng, dtype, act)


class Stage(Module):
    def __init__(self, cfg: BackboneConfig, i: int, rng, dtype=np.float32):
        super().__init__()
        k, s, p = cfg.patch_specs[i - 1]
        dim = cfg.dims[i - 1]
        self.index = i
        self.patch_embed = PatchEmbed(cfg.stage_in_chans(i), dim, k, s, p, rng, dtype)
        self.sals = []
        for n in range(cfg.depths[i - 1]):
            sal = SAL(dim, cfg.heads[i - 1], cfg.sr_ratios[i - 1], cfg.mlp_ratio, rng, dtype, cfg.ffn_act)
            setattr(self, f"sal{n + 1}", sal)
            self.sals.append(sal)


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.stages = []
        for i in range(1, cfg.num_stages + 1):
            stage = Stage(cfg, i, rng, dtype)
            setattr(self, f"stage{i}", stage)
            self.stages.append(stage)

    def embed(self, image: Tensor):
        """The frozen RGB patch embedding (stage-1 patch embed)."""
        return overlap_patch_embed(image, self.stages[0].patch_embed)

    def __call__(self, image: Tensor, adapters=None) -> StageFeatures:
        z, h, w = self.embed(image)
        feats = StageFeatures()
        for i in range(1, self.cfg.num_stages + 1):
            z, h, w = block_forward(i, z, h, w, self, adapters[i - 1] if adapters else None)
            feats.append(z, h, w)
        return feats


# -- forward functions ----------------------------------------------------

def tokens_to_image(z: Tensor, h: int, w: int) -> Tensor:
    B, N, C = z.shape
    if N != h * w:
        raise DimensionError(f"{N} tokens cannot form a {h}x{w} grid")
    return ops.reshape(ops.transpose(z, (0, 2, 1)), (B, C, h, w))


def image_to_tokens(x: Tensor) -> tuple[Tensor, int, int]:
    B, C, h, w = x.shape
    return ops.transpose(ops.reshape(x, (B, C, h * w)), (0, 2, 1)), h, w


def overlap_patch_embed(x: Tensor, params: PatchEmbed) -> tuple[Tensor, int, int]:
    """Strided conv, flatten to tokens, then layer norm."""
    pad = params.proj.pad
    if min(x.shape[-2:]) + 2 * pad < params.kernel:
        raise DimensionError(f"input {x.shape} is smaller than the {params.kernel}x{params.kernel} patch kernel")
    tokens, h, w = image_to_tokens(params.proj(x))
    return params.norm(tokens), h, w


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, return_weights: bool = False):
    """Scaled dot-product attention; q is (B, Nq, C), k/v are (B or 1, Nk, C)."""
    B, nq, C = q.shape
    if C % heads:
        raise ConfigError(f"attention width {C} not divisible by {heads} heads")
    d = C // heads

    def split(t):
        return ops.transpose(ops.reshape(t, (t.shape[0], t.shape[1], heads, d)), (0, 2, 1, 3))

    qh, kh, vh = split(q), split(k), split(v)
    scores = ops.mul(ops.matmul(qh, ops.transpose(kh, (0, 1, 3, 2))), d ** -0.5)
    weights = ops.softmax(scores, axis=-1)
    out = ops.matmul(weights, vh)
    out = ops.reshape(ops.transpose(out, (0, 2, 1, 3)), (B, nq, C))
    return (out, weights) if return_weights else out


def efficient_msa(z: Tensor, h: int, w: int, params: Attention, sr_ratio: int | None = None,
                  return_query: bool = False):
    """Self-attention whose keys/values come from an ``sr_ratio``-reduced grid.

    With ``return_query`` the post-projection query (B, N, C) is returned too,
    which is what an adapter hook consumes.
    """
    sr = params.sr_ratio if sr_ratio is None else sr_ratio
    B, N, C = z.shape
    if N != h * w:
        raise DimensionError(f"{N} tokens do not match a {h}x{w} grid")
    if h % sr or w % sr:
        raise ConfigError(f"spatial-reduction ratio {sr} does not divide the {h}x{w} grid")
    q = params.wq(z)
    src = z
    if sr > 1:
        reduced, _, _ = image_to_tokens(params.sr(tokens_to_image(z, h, w)))
        src = params.sr_norm(reduced)
    out = multi_head_attention(q, params.wk(src), params.wv(src), params.heads)
    out = params.wo(out)
    return (out, q) if return_query else out


def ffn(z: Tensor, params: FFN) -> Tensor:
    return params.fc2(ops.activation(params.fc1(z), params.act))


def sal_forward(z: Tensor, h: int, w: int, params: SAL, adapter=None) -> Tensor:
    """``u = z + MSA(LN z) [+ A(q)]``; ``out = u + FFN(LN u)``."""
    attn, q = efficient_msa(params.norm1(z), h, w, params.msa, return_query=True)
    if adapter is not None:
        a = adapter(q)
        if a.shape != attn.shape:
            raise DimensionError(f"adapter output {a.shape} does not match attention output {attn.shape}")
        attn = ops.add(attn, a)
    u = ops.add(z, attn)
    return ops.add(u, ffn(params.norm2(u), params.ffn))


def block_forward(i: int, z_in: Tensor, h: int, w: int, backbone: Backbone, adapters=None):
    """Encoder block ``i`` (1-based); blocks after the first downsample on entry."""
    cfg = backbone.cfg
    stage = backbone.stages[i - 1]
    expect_c = cfg.dims[0] if i == 1 else cfg.dims[i - 2]
    if z_in.ndim != 3 or z_in.shape[1] != h * w or z_in.shape[2] != expect_c:
        raise DimensionError(f"block {i} expects (B, {h * w}, {expect_c}) tokens, got {z_in.shape}")
    z = z_in
    if i > 1:
        z, h, w = overlap_patch_embed(tokens_to_image(z_in, h, w), stage.patch_embed)
    for k, sal in enumerate(stage.sals):
        adapter = adapters[k] if adapters else None
        with scope(f"stage{i}.sal{k + 1}"):
            z = sal_forward(z, h, w, sal, adapter)
    return z, h, w


def freeze_backbone(backbone: Backbone) -> None:
    backbone.freeze(True)
