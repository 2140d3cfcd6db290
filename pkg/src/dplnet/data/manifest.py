"""Dataset manifests: ``classes=M`` header then tab-separated (rgb, aux, label) paths."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codec import ImageFormatError, load_image

IGNORE_INDEX = 255


class ManifestError(ValueError):
    pass


@dataclass
class SampleRecord:
    """One aligned triple; rgb is (3, H, W) uint8, aux (1, H, W), label (H, W)."""

    rgb: np.ndarray
    aux: np.ndarray
    label: np.ndarray

    def __post_init__(self):
        hw = self.label.shape
        if self.rgb.shape[1:] != hw or self.aux.shape[1:] != hw:
            raise ManifestError(f"rgb {self.rgb.shape}, aux {self.aux.shape} and label {hw} disagree in size")

    def aux3(self) -> np.ndarray:
        """Auxiliary image replicated to three channels."""
        return np.repeat(self.aux, 3, axis=0) if self.aux.shape[0] == 1 else self.aux


@dataclass
class DatasetManifest:
    root: Path
    entries: list[tuple[str, str, str]]
    num_classes: int
    split: str = ""
    _cache: list = field(default_factory=list, repr=False)

    def __len__(self) -> int:
        return len(self.entries)

    def load(self, index: int) -> SampleRecord:
        rgb_p, aux_p, lab_p = (self.root / p for p in self.entries[index])
        rgb = load_image(rgb_p)
        aux = load_image(aux_p)
        label = load_image(lab_p)
        if rgb.ndim != 3 or aux.ndim != 2 or label.ndim != 2:
            raise ManifestError(f"entry {index}: expected P6 rgb and P5 aux/label images")
        rec = SampleRecord(rgb.transpose(2, 0, 1).copy(), aux[None].copy(), label.copy())
        bad = (rec.label >= self.num_classes) & (rec.label != IGNORE_INDEX)
        if bad.any():
            raise ManifestError(f"entry {index}: label values must be < {self.num_classes} or {IGNORE_INDEX}")
        return rec

    def load_all(self) -> list[SampleRecord]:
        if not self._cache:
            self._cache.extend(self.load(i) for i in range(len(self)))
        return self._cache

    def arrays(self):
        """Stack the corpus into (N,3,H,W) rgb, (N,1,H,W) aux and (N,H,W) labels."""
        recs = self.load_all()
        if not recs:
            return (np.zeros((0, 3, 0, 0), np.uint8), np.zeros((0, 1, 0, 0), np.uint16),
                    np.zeros((0, 0, 0), np.uint8))
        return (np.stack([r.rgb for r in recs]), np.stack([r.aux for r in recs]),
                np.stack([r.label for r in recs]))


def write_manifest(path, entries, num_classes: int) -> None:
    lines = [f"classes={num_classes}"] + ["\t".join(e) for e in entries]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path, validate: bool = True) -> DatasetManifest:
    path = Path(path)
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("classes="):
        raise ManifestError(f"{path}: first line must be 'classes=M'")
    try:
        num_classes = int(lines[0].split("=", 1)[1])
    except ValueError:
        raise ManifestError(f"{path}: bad class count {lines[0]!r}") from None
    entries = []
    seen = set()
    for n, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        if len(parts) != 3:
            raise ManifestError(f"{path}:{n}: expected 3 tab-separated paths")
        if parts[0] in seen:
            raise ManifestError(f"{path}:{n}: duplicate entry {parts[0]!r}")
        seen.add(parts[0])
        entries.append(tuple(parts))
    manifest = DatasetManifest(path.parent, entries, num_classes, split=path.stem)
    if validate:
        for entry in entries:
            for rel in entry:
                if not (manifest.root / rel).is_file():
                    raise ManifestError(f"{path}: missing file {rel}")
        try:
            manifest.load_all()
        except ImageFormatError as exc:
            raise ManifestError(f"{path}: {exc}") from exc
    return manifest
