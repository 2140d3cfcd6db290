"""Synthetic RGB + depth-like scenes in which two classes differ only in depth.

Classes 2 and 3 are painted with the same RGB colour and drawn from the same
shape distribution; only the auxiliary channel (high for 2, low for 3) tells
them apart, so a model that ignores the auxiliary input cannot beat chance
on that pair.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .codec import save_image
from .manifest import DatasetManifest, SampleRecord, write_manifest

BASE_COLORS = [(40, 40, 40), (200, 60, 60), (60, 160, 220), (60, 160, 220), (220, 200, 60)]
BASE_AUX = [32000, 24000, 54000, 10000, 41000]


@dataclass(frozen=True)
class SynthSpec:
    size: int = 64
    min_shapes: int = 2
    max_shapes: int = 4
    min_extent: int = 12
    max_extent: int = 32
    grid: int = 4
    num_classes: int = 5
    aux_noise: int = 1500
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 4:
            raise ValueError("the ambiguous pair needs classes 2 and 3, so num_classes >= 4")

    def color(self, cls: int) -> tuple[int, int, int]:
        if cls < len(BASE_COLORS):
            return BASE_COLORS[cls]
        r = np.random.default_rng(1000 + cls).integers(0, 256, 3)
        return tuple(int(v) for v in r)

    def aux_level(self, cls: int) -> int:
        if cls < len(BASE_AUX):
            return BASE_AUX[cls]
        return 16000 + (cls * 7919) % 30000


def _snap(v: int, grid: int) -> int:
    return max(grid, (v // grid) * grid)


def render_sample(spec: SynthSpec, rng: np.random.Generator) -> SampleRecord:
    s = spec.size
    label = np.zeros((s, s), dtype=np.uint8)
    yy, xx = np.mgrid[0:s, 0:s]
    g = max(spec.grid, 1)
    for _ in range(int(rng.integers(spec.min_shapes, spec.max_shapes + 1))):
        cls = int(rng.integers(1, spec.num_classes))
        h = _snap(int(rng.integers(spec.min_extent, spec.max_extent + 1)), g)
        w = _snap(int(rng.integers(spec.min_extent, spec.max_extent + 1)), g)
        top = int(rng.integers(0, (s - h) // g + 1)) * g
        left = int(rng.integers(0, (s - w) // g + 1)) * g
        if rng.random() < 0.5:
            mask = (yy >= top) & (yy < top + h) & (xx >= left) & (xx < left + w)
        else:
            cy, cx = top + (h - 1) / 2, left + (w - 1) / 2
            mask = ((yy - cy) / (h / 2)) ** 2 + ((xx - cx) / (w / 2)) ** 2 <= 1.0
        label[mask] = cls
    palette = np.array([spec.color(c) for c in range(spec.num_classes)], dtype=np.uint8)
    rgb = palette[label].transpose(2, 0, 1).copy()
    levels = np.array([spec.aux_level(c) for c in range(spec.num_classes)], dtype=np.int64)
    noise = rng.integers(-spec.aux_noise, spec.aux_noise + 1, (s, s))
    aux = np.clip(levels[label] + noise, 0, 65535).astype(np.uint16)[None]
    return SampleRecord(rgb, aux, label)


def synth_samples(spec: SynthSpec, n: int) -> list[SampleRecord]:
    rng = np.random.default_rng(spec.seed)
    return [render_sample(spec, rng) for _ in range(n)]


def synth_generate(spec: SynthSpec, n: int, out_dir, split: str = "train") -> DatasetManifest:
    """Render ``n`` samples to ``out_dir/split/`` and write ``out_dir/split.txt``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    out_dir = Path(out_dir)
    (out_dir / split).mkdir(parents=True, exist_ok=True)
    entries = []
    for i, rec in enumerate(synth_samples(spec, n)):
        stem = f"{split}/{i:05d}"
        names = (f"{stem}_rgb.ppm", f"{stem}_aux.pgm", f"{stem}_label.pgm")
        save_image(rec.rgb.transpose(1, 2, 0), out_dir / names[0])
        save_image(rec.aux[0], out_dir / names[1])
        save_image(rec.label, out_dir / names[2])
        entries.append(names)
    write_manifest(out_dir / f"{split}.txt", entries, spec.num_classes)
    return DatasetManifest(out_dir, entries, spec.num_classes, split)
