"""Multimodal prompt generators (MPG) and multimodal feature adapters (MFA).

MPG fuses the running RGB features with the auxiliary-modality prompt chain
through a channel bottleneck; MFA turns each self-attention query into an
additive correction by cross-attending to a few learnable tokens.  Both
output projections start at zero so a fresh stack leaves the frozen
backbone's behaviour untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .backbone import (
    BackboneConfig,
    ConfigError,
    PatchEmbed,
    multi_head_attention,
    overlap_patch_embed,
    tokens_to_image,
)
from .tensor_core import DimensionError, LayerNorm, Linear, Module, Parameter, Tensor, ops, trunc_normal


class ValidationError(ValueError):
    """Raised when inputs disagree with each other or with the model."""


@dataclass(frozen=True)
class PromptConfig:
    beta: int = 4
    theta: int = 32
    num_tokens: int = 30
    token_dim: int = 32
    mfa_heads: int = 1
    mpg_stages: tuple[bool, ...] = (True, True, True, True)
    mfa_stages: tuple[bool, ...] = (True, True, True, True)

    def validate(self, backbone: BackboneConfig) -> None:
        if self.beta < 1 or self.theta < 1:
            raise ConfigError("reduction factors beta and theta must be >= 1")
        if self.num_tokens < 1 or self.token_dim < 1 or self.mfa_heads < 1:
            raise ConfigError("num_tokens, token_dim and mfa_heads must be >= 1")
        n = backbone.num_stages
        if len(self.mpg_stages) != n or len(self.mfa_stages) != n:
            raise ConfigError(f"stage masks need {n} entries")
        for i, on in enumerate(self.mfa_stages):
            c = mfa_width(backbone.dims[i], self.theta)
            if on and c % self.mfa_heads:
                raise ConfigError(f"MFA width {c} at stage {i + 1} not divisible by {self.mfa_heads} heads")


def reduced(c: int, factor: int) -> int:
    return max(1, math.ceil(c / factor))


def mfa_width(c: int, theta: int) -> int:
    return reduced(c, theta)


def mpg_dims(backbone: BackboneConfig, i: int) -> tuple[int, int, int]:
    """(prompt-in channels, prompt-out channels, emb stride) for MPG ``i``.

    MPG ``i`` works at the geometry of the features entering block ``i``;
    block 1 keeps the embedding geometry, later blocks halve it on entry.
    """
    dims = backbone.dims
    c_out = dims[max(i - 2, 0)]
    c_in = dims[max(i - 3, 0)]
    return c_in, c_out, 1 if i <= 2 else 2


# -- parameter containers -------------------------------------------------

class MPG(Module):
    """Prompt generator for block ``i``; ``fuse=False`` keeps only the chain embedding."""

    def __init__(self, backbone: BackboneConfig, i: int, beta: int, rng, dtype=np.float32, fuse: bool = True):
        super().__init__()
        self.index, self.fuse = i, fuse
        c_in, c, stride = mpg_dims(backbone, i)
        if i > 1:
            self.emb = PatchEmbed(c_in, c, 3, stride, 1, rng, dtype)
        else:
            self.emb = None
        if fuse:
            r = reduced(c, beta)
            self.u1 = Linear(c, r, rng, dtype)
            self.u2 = Linear(c, r, rng, dtype)
            self.u3 = Linear(r, c, rng, dtype, zero=True)


class MFA(Module):
    def __init__(self, dim: int, cfg: PromptConfig, rng, dtype=np.float32):
        super().__init__()
        c = mfa_width(dim, cfg.theta)
        self.heads = cfg.mfa_heads
        self.tokens = Parameter(trunc_normal(rng, (cfg.num_tokens, cfg.token_dim)), dtype=dtype)
        self.ln = LayerNorm(cfg.token_dim, dtype)
        self.g1 = Linear(cfg.token_dim, c, rng, dtype)
        self.g2 = Linear(cfg.token_dim, c, rng, dtype)
        self.g3 = Linear(dim, c, rng, dtype)
        self.g4 = Linear(c, dim, rng, dtype, zero=True)

    def __call__(self, q: Tensor) -> Tensor:
        return mfa_forward(self, q)


class MFAStage(Module):
    def __init__(self, dim: int, depth: int, cfg: PromptConfig, rng, dtype=np.float32):
        super().__init__()
        self.layers = []
        for k in range(depth):
            mfa = MFA(dim, cfg, rng, dtype)
            setattr(self, f"layer{k + 1}", mfa)
            self.layers.append(mfa)


class PromptStack(Module):
    """Everything trainable that adapts the frozen encoder.

    ``mpgs[i-1]`` is the generator for block ``i`` (``None`` when neither the
    stage nor anything downstream needs it); ``mfas[i-1]`` lists one adapter
    per self-attention layer of block ``i`` (empty when disabled).
    """

    def __init__(self, backbone: BackboneConfig, cfg: PromptConfig, rng, dtype=np.float32):
        super().__init__()
        cfg.validate(backbone)
        self.cfg = cfg
        n = backbone.num_stages
        any_mpg = any(cfg.mpg_stages)
        if any_mpg:
            k, s, p = backbone.patch_specs[0]
            self.aux_embed = PatchEmbed(backbone.in_chans, backbone.dims[0], k, s, p, rng, dtype)
        else:
            self.aux_embed = None
        self.mpgs = []
        for i in range(1, n + 1):
            enabled = cfg.mpg_stages[i - 1]
            chain = any(cfg.mpg_stages[i:])
            mpg = MPG(backbone, i, cfg.beta, rng, dtype, fuse=enabled) if (enabled or chain) else None
            if mpg is not None:
                setattr(self, f"mpg{i}", mpg)
            self.mpgs.append(mpg)
        self.mfas = []
        for i in range(1, n + 1):
            if cfg.mfa_stages[i - 1]:
                stage = MFAStage(backbone.dims[i - 1], backbone.depths[i - 1], cfg, rng, dtype)
                setattr(self, f"mfa{i}", stage)
                self.mfas.append(stage.layers)
            else:
                self.mfas.append([])

    @property
    def num_mpgs(self) -> int:
        return sum(1 for m in self.mpgs if m is not None and m.fuse)

    @property
    def num_mfas(self) -> int:
        return sum(len(layers) for layers in self.mfas)

    def output_projections(self) -> list[Linear]:
        outs = [m.u3 for m in self.mpgs if m is not None and m.fuse]
        outs += [mfa.g4 for layers in self.mfas for mfa in layers]
        return outs


def build_prompt_stack(backbone: BackboneConfig, cfg: PromptConfig, rng=None, dtype=np.float32) -> PromptStack:
    """Build the prompt modules for the enabled stages; everything is trainable."""
    rng = np.random.default_rng(0) if rng is None else rng
    stack = PromptStack(backbone, cfg, rng, dtype)
    stack.freeze(False)
    return stack


# -- forward functions ----------------------------------------------------

def aux_embed(i_x: Tensor, params: PatchEmbed, rgb_hw: tuple[int, int] | None = None):
    """Learnable embedding of the auxiliary image; yields the initial prompt."""
    if rgb_hw is not None and tuple(i_x.shape[-2:]) != tuple(rgb_hw):
        raise ValidationError(f"auxiliary image {i_x.shape[-2:]} differs from RGB size {tuple(rgb_hw)}")
    return overlap_patch_embed(i_x, params)


def mpg_embed(p_prev: Tensor, p_hw: tuple[int, int], params: MPG) -> tuple[Tensor, int, int]:
    if params.emb is None:
        return p_prev, p_hw[0], p_hw[1]
    return overlap_patch_embed(tokens_to_image(p_prev, *p_hw), params.emb)


def mpg_forward(z_rgb_prev: Tensor, p_prev: Tensor, stage_index: int, params: MPG,
                p_hw: tuple[int, int] | None = None) -> Tensor:
    """``P_i = u3(u1(Z_rgb) + u2(emb(P_{i-1})))``; emb is identity for block 1."""
    if params.emb is not None and p_hw is None:
        raise ConfigError(f"MPG {stage_index} needs the spatial size of the previous prompt")
    p_hat = p_prev if params.emb is None else mpg_embed(p_prev, p_hw, params)[0]
    if p_hat.shape != z_rgb_prev.shape:
        raise ConfigError(
            f"MPG {stage_index}: embedded prompt {p_hat.shape} does not match RGB features {z_rgb_prev.shape}")
    return params.u3(ops.add(params.u1(z_rgb_prev), params.u2(p_hat)))


def inject(z_rgb_prev: Tensor, p_i: Tensor) -> Tensor:
    if z_rgb_prev.shape != p_i.shape:
        raise DimensionError(f"cannot inject prompt {p_i.shape} into features {z_rgb_prev.shape}")
    return ops.add(z_rgb_prev, p_i)


def mfa_forward(params: MFA, q: Tensor) -> Tensor:
    """Cross-attend the reduced query to the learnable tokens, then expand."""
    qp = params.g3(q)
    h = params.ln(params.tokens)
    kp = ops.reshape(params.g2(h), (1, h.shape[0], -1))
    vp = ops.reshape(params.g1(h), (1, h.shape[0], -1))
    return params.g4(multi_head_attention(qp, kp, vp, params.heads))
