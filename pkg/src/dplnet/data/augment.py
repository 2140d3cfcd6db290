"""Geometric augmentation applied identically to rgb, aux and label."""

from __future__ import annotations

import numpy as np

from ..tensor_core.ops import interp_matrix
from .manifest import IGNORE_INDEX, SampleRecord


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """(C, H, W) integer image, resampled with half-pixel centres and rounded back."""
    C, H, W = img.shape
    if (H, W) == (out_h, out_w):
        return img.copy()
    rh, rw = interp_matrix(H, out_h), interp_matrix(W, out_w)
    out = rh @ img.astype(np.float64) @ rw.T
    info = np.iinfo(img.dtype)
    return np.clip(np.rint(out), info.min, info.max).astype(img.dtype)


def resize_nearest(label: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    H, W = label.shape
    if (H, W) == (out_h, out_w):
        return label.copy()
    ys = np.minimum(((np.arange(out_h) + 0.5) * H / out_h).astype(np.intp), H - 1)
    xs = np.minimum(((np.arange(out_w) + 0.5) * W / out_w).astype(np.intp), W - 1)
    return label[ys[:, None], xs[None, :]]


def hflip(sample: SampleRecord) -> SampleRecord:
    return SampleRecord(sample.rgb[:, :, ::-1].copy(), sample.aux[:, :, ::-1].copy(), sample.label[:, ::-1].copy())


def augment(sample: SampleRecord, rng: np.random.Generator, flip_p: float = 0.5,
            scale_range: tuple[float, float] = (0.5, 2.0), crop_size=None) -> SampleRecord:
    """Random rescale, crop (padding with ignore labels when short) and horizontal flip."""
    H, W = sample.label.shape
    ch, cw = (H, W) if crop_size is None else crop_size
    scale = float(rng.uniform(*scale_range)) if scale_range[0] != scale_range[1] else float(scale_range[0])
    rgb, aux, label = sample.rgb, sample.aux, sample.label
    if scale != 1.0:
        nh, nw = max(1, round(H * scale)), max(1, round(W * scale))
        rgb, aux, label = resize_bilinear(rgb, nh, nw), resize_bilinear(aux, nh, nw), resize_nearest(label, nh, nw)
    h, w = label.shape
    if h < ch or w < cw:
        ph, pw = max(ch - h, 0), max(cw - w, 0)
        rgb = np.pad(rgb, ((0, 0), (0, ph), (0, pw)))
        aux = np.pad(aux, ((0, 0), (0, ph), (0, pw)))
        label = np.pad(label, ((0, ph), (0, pw)), constant_values=IGNORE_INDEX)
        h, w = label.shape
    top = int(rng.integers(0, h - ch + 1)) if h > ch else 0
    left = int(rng.integers(0, w - cw + 1)) if w > cw else 0
    out = SampleRecord(rgb[:, top:top + ch, left:left + cw].copy(), aux[:, top:top + ch, left:left + cw].copy(),
                       label[top:top + ch, left:left + cw].copy())
    if flip_p > 0 and rng.random() < flip_p:
        out = hflip(out)
    return out
