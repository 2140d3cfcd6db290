"""Single-scale and multi-scale + flip evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..data import ConfusionMatrix, DatasetManifest, SampleRecord, miou, pixel_accuracy
from ..model import DPLNet, normalize_aux, normalize_rgb
from ..prompts import ValidationError
from ..tensor_core import Tensor, ops

MS_SCALES = (0.5, 0.75, 1.0, 1.25, 1.5)


@dataclass
class EvalResult:
    per_class_iou: list[float]
    miou: float
    pixel_acc: float
    confusion: ConfusionMatrix

    def format(self) -> str:
        lines = ["class\tiou"]
        lines += [f"{c}\t{'-' if np.isnan(v) else f'{v:.6f}'}" for c, v in enumerate(self.per_class_iou)]
        lines.append(f"miou\t{self.miou:.6f}")
        lines.append(f"pixel_acc\t{self.pixel_acc:.6f}")
        return "\n".join(lines)


def scaled_size(n: int, scale: float, multiple: int) -> int:
    """``n * scale`` rounded up to the encoder's stride so every stage tiles exactly."""
    return max(multiple, math.ceil(n * scale / multiple) * multiple)


def predict_probs(model: DPLNet, i_rgb: np.ndarray, i_x: np.ndarray) -> np.ndarray:
    return ops.softmax(model(Tensor(i_rgb), Tensor(i_x)), axis=1).data


def predict_ms_flip(model: DPLNet, i_rgb: np.ndarray, i_x: np.ndarray, scales=MS_SCALES,
                    flip: bool = True) -> np.ndarray:
    """Class probabilities averaged over every (scale, flip) member at input resolution."""
    H, W = i_rgb.shape[-2:]
    stride = model.cfg.backbone.total_stride
    total = np.zeros((i_rgb.shape[0], model.cfg.num_classes, H, W), dtype=i_rgb.dtype)
    members = 0
    for s in scales:
        h, w = scaled_size(H, s, stride), scaled_size(W, s, stride)
        rgb = ops.bilinear_resize(Tensor(i_rgb), h, w).data
        aux = ops.bilinear_resize(Tensor(i_x), h, w).data
        views = [(rgb, aux, False)] + ([(rgb[..., ::-1], aux[..., ::-1], True)] if flip else [])
        for r, a, flipped in views:
            probs = predict_probs(model, np.ascontiguousarray(r), np.ascontiguousarray(a))
            if flipped:
                probs = probs[..., ::-1]
            total += ops.bilinear_resize(Tensor(np.ascontiguousarray(probs)), H, W).data
            members += 1
    return total / total.dtype.type(members)


def evaluate(model: DPLNet, records: list[SampleRecord], num_classes: int | None = None, mode: str = "ss",
             scales=MS_SCALES, flip: bool = True, batch_size: int = 4) -> EvalResult:
    """Accumulate a confusion matrix over ``records``; prediction is argmax of class probabilities."""
    m = model.cfg.num_classes
    if num_classes is not None and num_classes != m:
        raise ValidationError(f"data has {num_classes} classes but the model predicts {m}")
    if mode not in ("ss", "ms_flip"):
        raise ValueError(f"unknown evaluation mode {mode!r}")
    cm = ConfusionMatrix(m)
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        i_rgb = normalize_rgb(np.stack([r.rgb for r in chunk]))
        i_x = normalize_aux(np.stack([r.aux for r in chunk]))
        if mode == "ss":
            probs = predict_probs(model, i_rgb, i_x)
        else:
            probs = predict_ms_flip(model, i_rgb, i_x, scales, flip)
        cm.update(probs.argmax(axis=1), np.stack([r.label for r in chunk]))
    per, mean = miou(cm)
    return EvalResult(per, mean, pixel_accuracy(cm), cm)


def evaluate_ss(model: DPLNet, manifest: DatasetManifest, **kw) -> EvalResult:
    return evaluate(model, manifest.load_all(), manifest.num_classes, "ss", **kw)


def evaluate_ms_flip(model: DPLNet, manifest: DatasetManifest, scales=MS_SCALES, flip: bool = True,
                     **kw) -> EvalResult:
    return evaluate(model, manifest.load_all(), manifest.num_classes, "ms_flip", scales=scales, flip=flip, **kw)
