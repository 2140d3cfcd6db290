"""DPLNet assembly: frozen RGB encoder, prompt stack and a learnable all-MLP decoder."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .backbone import (
    Backbone,
    BackboneConfig,
    ConfigError,
    StageFeatures,
    backbone_preset,
    block_forward,
    freeze_backbone,
    tokens_to_image,
)
from .prompts import (
    PromptConfig,
    PromptStack,
    ValidationError,
    aux_embed,
    build_prompt_stack,
    inject,
    mfa_width,
    mpg_dims,
    mpg_embed,
    mpg_forward,
    reduced,
)
from .tensor_core import Conv2d, Linear, Module, Tensor, ops

SUBTOTAL_KEYS = ("backbone", "aux_embed", "mpg", "mfa", "decoder")

# RGB uses the usual ImageNet statistics; the auxiliary channel a fixed 0.5/0.5.
RGB_MEAN = np.array([0.485, 0.456, 0.406])
RGB_STD = np.array([0.229, 0.224, 0.225])
AUX_MEAN, AUX_STD = 0.5, 0.5


class IntegrityError(RuntimeError):
    """A parameter ended up on the wrong side of the freeze boundary."""


@dataclass(frozen=True)
class DPLNetConfig:
    backbone: BackboneConfig
    prompts: PromptConfig = field(default_factory=PromptConfig)
    decoder_dim: int = 64
    num_classes: int = 5
    input_size: tuple[int, int] = (64, 64)
    decoder_act: str = "gelu"

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        stride = self.backbone.total_stride
        if any(s % stride for s in self.input_size):
            raise ConfigError(f"input size {self.input_size} must be divisible by {stride}")


DECODER_DIMS = {"toy": 64, "mit_b5_shape": 768}


def dplnet_config(preset: str = "toy", num_classes: int = 5, prompts: PromptConfig | None = None,
                  input_size=(64, 64), decoder_dim: int | None = None) -> DPLNetConfig:
    return DPLNetConfig(
        backbone=backbone_preset(preset),
        prompts=prompts or PromptConfig(),
        decoder_dim=decoder_dim or DECODER_DIMS[preset],
        num_classes=num_classes,
        input_size=tuple(input_size),
    )


class Decoder(Module):
    def __init__(self, dims, decoder_dim: int, num_classes: int, rng, dtype=np.float32, act: str = "gelu"):
        super().__init__()
        self.act = act
        self.projs = []
        for i, c in enumerate(dims):
            lin = Linear(c, decoder_dim, rng, dtype)
            setattr(self, f"proj{i + 1}", lin)
            self.projs.append(lin)
        self.fuse = Conv2d(decoder_dim * len(dims), decoder_dim, 1, 1, 0, rng, dtype)
        self.classify = Conv2d(decoder_dim, num_classes, 1, 1, 0, rng, dtype)


def decoder_forward(feats: StageFeatures, params: Decoder, out_hw: tuple[int, int]) -> Tensor:
    """Project every stage to a common width, upsample to the stage-1 grid, fuse, classify."""
    if len(feats) != len(params.projs):
        raise ValidationError(f"decoder expects {len(params.projs)} stage features, got {len(feats)}")
    h1, w1 = feats.sizes[0]
    maps = []
    for z, (h, w), proj in zip(feats.tokens, feats.sizes, params.projs):
        maps.append(ops.bilinear_resize(tokens_to_image(proj(z), h, w), h1, w1))
    x = ops.activation(params.fuse(ops.concat(maps, axis=1)), params.act)
    return ops.bilinear_resize(params.classify(x), *out_hw)


class DPLNet(Module):
    """Frozen encoder + trainable prompts + trainable decoder.

    Parameters are drawn from ``seed`` in construction order (backbone,
    prompts, decoder), so two models built from the same config and seed
    are bitwise identical.
    """

    def __init__(self, cfg: DPLNetConfig, seed: int = 0, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.backbone = Backbone(cfg.backbone, rng, dtype)
        self.prompts = build_prompt_stack(cfg.backbone, cfg.prompts, rng, dtype)
        self.decoder = Decoder(cfg.backbone.dims, cfg.decoder_dim, cfg.num_classes, rng, dtype, cfg.decoder_act)
        self.assign_names()
        freeze_backbone(self.backbone)

    def __call__(self, i_rgb, i_x=None, use_prompts: bool = True) -> Tensor:
        return dplnet_forward(i_rgb, i_x, self, use_prompts=use_prompts)

    def encode(self, i_rgb, i_x=None, use_prompts: bool = True) -> StageFeatures:
        return encode(i_rgb, i_x, self, use_prompts)


def _as_image(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def encode(i_rgb, i_x, model: DPLNet, use_prompts: bool = True) -> StageFeatures:
    i_rgb = _as_image(i_rgb)
    if i_rgb.ndim != 4 or i_rgb.shape[1] != model.cfg.backbone.in_chans:
        raise ValidationError(f"RGB input must be (B, 3, H, W), got {i_rgb.shape}")
    stride = model.cfg.backbone.total_stride
    if i_rgb.shape[2] % stride or i_rgb.shape[3] % stride:
        raise ValidationError(f"input size {i_rgb.shape[2:]} must be divisible by {stride}")
    stack: PromptStack = model.prompts
    backbone = model.backbone
    z_rgb, h, w = backbone.embed(i_rgb)
    p = phw = None
    if use_prompts and stack.aux_embed is not None:
        if i_x is None:
            raise ValidationError("this model needs an auxiliary image")
        i_x = _as_image(i_x)
        if i_x.shape != i_rgb.shape:
            raise ValidationError(f"auxiliary input {i_x.shape} does not match RGB input {i_rgb.shape}")
        p, ph, pw = aux_embed(i_x, stack.aux_embed, i_rgb.shape[-2:])
        phw = (ph, pw)
    feats = StageFeatures()
    for i in range(1, backbone.cfg.num_stages + 1):
        z_in = z_rgb
        mpg = stack.mpgs[i - 1] if use_prompts else None
        if mpg is not None:
            if mpg.fuse:
                p = mpg_forward(z_rgb, p, i, mpg, phw)
                z_in = inject(z_rgb, p)
            else:
                p = mpg_embed(p, phw, mpg)[0]
            phw = (h, w)
        adapters = stack.mfas[i - 1] if use_prompts else None
        z_rgb, h, w = block_forward(i, z_in, h, w, backbone, adapters or None)
        feats.append(z_rgb, h, w)
    return feats


def dplnet_forward(i_rgb, i_x, model: DPLNet, use_prompts: bool = True) -> Tensor:
    """Logits (B, M, H, W) for a batch of RGB / auxiliary image pairs.

    ``use_prompts=False`` runs the plain frozen encoder with the same decoder.
    """
    feats = encode(i_rgb, i_x, model, use_prompts)
    rgb = _as_image(i_rgb)
    return decoder_forward(feats, model.decoder, (rgb.shape[2], rgb.shape[3]))


def init_identity(model: DPLNet) -> None:
    """Zero every prompt output projection so prompts contribute nothing."""
    for lin in model.prompts.output_projections():
        lin.weight.data[...] = 0
        lin.bias.data[...] = 0


# -- parameter bookkeeping -------------------------------------------------

def group_of(name: str) -> str:
    """Subtotal bucket for a dotted parameter name."""
    head = name.split(".")[0]
    if head in ("backbone", "decoder"):
        return head
    if head == "prompts":
        sub = name.split(".")[1]
        if sub == "aux_embed":
            return "aux_embed"
        if sub.startswith("mpg"):
            return "mpg"
        if sub.startswith("mfa"):
            return "mfa"
    raise KeyError(f"parameter {name!r} belongs to no known group")


def module_group(name: str) -> str:
    """Finer grouping used by gradient checks: one entry per MPG / MFA layer."""
    parts = name.split(".")
    if parts[0] == "prompts":
        if parts[1].startswith("mfa"):
            return ".".join(parts[:3])
        return ".".join(parts[:2])
    return parts[0]


@dataclass
class ParamPartition:
    frozen: dict[str, int]
    trainable: dict[str, int]
    subtotals: dict[str, int]

    @property
    def frozen_total(self) -> int:
        return sum(self.frozen.values())

    @property
    def trainable_total(self) -> int:
        return sum(self.trainable.values())

    @property
    def total(self) -> int:
        return self.frozen_total + self.trainable_total

    def trainable_in(self, group: str) -> int:
        return sum(n for name, n in self.trainable.items() if group_of(name) == group)


def partition_parameters(model: Module, strict: bool = True) -> ParamPartition:
    """Split parameters into frozen / trainable and subtotal them by group.

    With ``strict`` a trainable backbone parameter is an integrity error.
    """
    frozen: dict[str, int] = {}
    trainable: dict[str, int] = {}
    subtotals = dict.fromkeys(SUBTOTAL_KEYS, 0)
    for name, p in model.named_parameters():
        if name in frozen or name in trainable:
            raise IntegrityError(f"duplicate parameter name {name!r}")
        (frozen if p.frozen else trainable)[name] = p.size
        subtotals[group_of(name)] += p.size
        if strict and not p.frozen and group_of(name) == "backbone":
            raise IntegrityError(f"backbone parameter {name!r} is trainable")
    return ParamPartition(frozen, trainable, subtotals)


def _linear(i: int, o: int) -> int:
    return i * o + o


def _conv(i: int, o: int, k: int) -> int:
    return i * o * k * k + o


def _ln(c: int) -> int:
    return 2 * c


def count_parameters(cfg: DPLNetConfig) -> dict[str, int]:
    """Closed-form parameter subtotals, without allocating any weights."""
    bb = cfg.backbone
    pc = cfg.prompts
    out = dict.fromkeys(SUBTOTAL_KEYS, 0)
    for i in range(1, bb.num_stages + 1):
        k, _, _ = bb.patch_specs[i - 1]
        c, r = bb.dims[i - 1], bb.sr_ratios[i - 1]
        out["backbone"] += _conv(bb.stage_in_chans(i), c, k) + _ln(c)
        sal = 2 * _ln(c) + 4 * _linear(c, c) + _linear(c, bb.mlp_ratio * c) + _linear(bb.mlp_ratio * c, c)
        if r > 1:
            sal += _conv(c, c, r) + _ln(c)
        out["backbone"] += bb.depths[i - 1] * sal
    if any(pc.mpg_stages):
        k, _, _ = bb.patch_specs[0]
        out["aux_embed"] = _conv(bb.in_chans, bb.dims[0], k) + _ln(bb.dims[0])
    for i in range(1, bb.num_stages + 1):
        enabled = pc.mpg_stages[i - 1]
        chain = any(pc.mpg_stages[i:])
        c_in, c, _ = mpg_dims(bb, i)
        if i > 1 and (enabled or chain):
            out["mpg"] += _conv(c_in, c, 3) + _ln(c)
        if enabled:
            r = reduced(c, pc.beta)
            out["mpg"] += 2 * _linear(c, r) + _linear(r, c)
    for i in range(1, bb.num_stages + 1):
        if not pc.mfa_stages[i - 1]:
            continue
        c = bb.dims[i - 1]
        m = mfa_width(c, pc.theta)
        per_layer = (pc.num_tokens * pc.token_dim + _ln(pc.token_dim) + 2 * _linear(pc.token_dim, m)
                     + _linear(c, m) + _linear(m, c))
        out["mfa"] += bb.depths[i - 1] * per_layer
    d = cfg.decoder_dim
    out["decoder"] = (sum(_linear(c, d) for c in bb.dims) + _conv(d * bb.num_stages, d, 1)
                      + _conv(d, cfg.num_classes, 1))
    return out


def with_prompts(cfg: DPLNetConfig, **changes) -> DPLNetConfig:
    return replace(cfg, prompts=replace(cfg.prompts, **changes))


# -- input preprocessing ---------------------------------------------------

def normalize_rgb(rgb: np.ndarray, dtype=np.float32) -> np.ndarray:
    """uint8 (B, 3, H, W) -> standardised float."""
    x = rgb.astype(np.float64) / 255.0
    x = (x - RGB_MEAN[:, None, None]) / RGB_STD[:, None, None]
    return x.astype(dtype)


def normalize_aux(aux: np.ndarray, dtype=np.float32, maxval: int = 65535) -> np.ndarray:
    """(B, H, W) or (B, 1|3, H, W) integer depth/thermal -> 3-channel float in [-1, 1]."""
    x = aux.astype(np.float64) / maxval
    x = (x - AUX_MEAN) / AUX_STD
    if x.ndim == 3:
        x = x[:, None]
    if x.shape[1] == 1:
        x = np.repeat(x, 3, axis=1)
    return x.astype(dtype)
