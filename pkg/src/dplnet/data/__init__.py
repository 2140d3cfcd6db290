from .augment import augment, hflip, resize_bilinear, resize_nearest
from .codec import ImageFormatError, decode, encode, load_image, save_image
from .manifest import IGNORE_INDEX, DatasetManifest, ManifestError, SampleRecord, read_manifest, write_manifest
from .metrics import ConfusionMatrix, UndefinedMetricError, class_accuracy, confusion_update, miou, pixel_accuracy
from .synth import SynthSpec, render_sample, synth_generate, synth_samples

__all__ = [
    "augment", "hflip", "resize_bilinear", "resize_nearest", "ImageFormatError", "decode", "encode",
    "load_image", "save_image", "IGNORE_INDEX", "DatasetManifest", "ManifestError", "SampleRecord",
    "read_manifest", "write_manifest", "ConfusionMatrix", "UndefinedMetricError", "class_accuracy",
    "confusion_update", "miou", "pixel_accuracy", "SynthSpec", "render_sample", "synth_generate",
    "synth_samples",
]
